import numpy as np
import pytest
import torch

from viewsync.nets import (ConvBlockSpec, ConvLayerSpec, Decoder,
                           FeatureExtractor, MotionEstimator,
                           decoder_spec, feature_extractor_spec,
                           motion_net_spec, resize_flow, upsample_flow)


class TestConvBlockSpec:
    def test_rejects_even_kernel(self):
        with pytest.raises(ValueError, match="odd"):
            ConvBlockSpec((ConvLayerSpec(8, 4, kernel=(4, 4)),))

    def test_rejects_broken_channel_chain(self):
        with pytest.raises(ValueError, match="chain"):
            ConvBlockSpec((ConvLayerSpec(8, 4), ConvLayerSpec(8, 16)))

    def test_motion_net_param_count(self):
        # hand-summed filter volumes + biases for the 6-layer 5x5 chain with
        # 64 input channels: 128*(64*25+1) + 128*(128*25+1) + 64*(128*25+1)
        # + 64*(64*25+1) + 32*(64*25+1) + 2*(32*25+1)
        spec = motion_net_spec(64, width=1.0)
        expect = (128 * (64 * 25 + 1) + 128 * (128 * 25 + 1)
                  + 64 * (128 * 25 + 1) + 64 * (64 * 25 + 1)
                  + 32 * (64 * 25 + 1) + 2 * (32 * 25 + 1))
        assert spec.param_count() == expect
        net = MotionEstimator(64)
        assert sum(p.numel() for p in net.parameters()) == expect

    def test_round_trip_dict(self):
        spec = feature_extractor_spec(1, width=0.5)
        assert ConvBlockSpec.from_dict(spec.to_dict()) == spec


class TestFeatureExtractor:
    def test_scale_sizes_and_channels(self):
        fx = FeatureExtractor(in_channels=1, width=1.0)
        maps = fx(torch.randn(1, 288, 384))
        assert [m.shape for m in maps] == [
            torch.Size([16, 288, 384]),
            torch.Size([32, 144, 192]),
            torch.Size([32, 72, 96]),
        ]
        assert fx.out_channels == [16, 32, 32]

    def test_zero_input_zero_bias_gives_zero(self):
        fx = FeatureExtractor()
        for conv in fx.stack.convs:
            assert torch.equal(conv.bias, torch.zeros_like(conv.bias))
        maps = fx(torch.zeros(1, 16, 16))
        for m in maps:
            assert torch.equal(m, torch.zeros_like(m))

    def test_deterministic_given_seed(self):
        x = torch.randn(1, 16, 16)
        torch.manual_seed(123)
        a = FeatureExtractor()(x)
        torch.manual_seed(123)
        b = FeatureExtractor()(x)
        for ma, mb in zip(a, b):
            assert torch.equal(ma, mb)

    def test_non_divisible_input_names_padding(self):
        fx = FeatureExtractor()
        with pytest.raises(ValueError, match="20x20"):
            fx(torch.randn(1, 18, 19))


class TestMotionEstimator:
    def test_zero_flow_at_init(self):
        net = MotionEstimator(8)
        flow = net(torch.randn(8, 10, 12))
        assert torch.equal(flow, torch.zeros(2, 10, 12))

    def test_output_shape(self):
        net = MotionEstimator(64)
        assert net(torch.randn(64, 24, 40)).shape == (2, 24, 40)

    def test_channel_mismatch(self):
        with pytest.raises(ValueError, match="channels"):
            MotionEstimator(8)(torch.randn(6, 10, 10))

    def test_same_size_padding_everywhere(self):
        net = MotionEstimator(4, width=0.25)
        x = torch.randn(4, 9, 11).unsqueeze(0)
        for conv, layer in zip(net.stack.convs, net.stack.spec.layers):
            x = conv(x)
            assert x.shape[2:] == (9, 11)


class TestDecoder:
    def test_zero_input_zero_density(self):
        dec = Decoder(6)
        out = dec(torch.zeros(6, 12, 14))
        assert torch.equal(out, torch.zeros(12, 14))

    def test_scene_grid_shape_preserved(self):
        dec = Decoder(96, width=0.25)
        assert dec(torch.randn(96, 152, 177)).shape == (152, 177)

    def test_channel_mismatch(self):
        with pytest.raises(ValueError, match="channels"):
            Decoder(6)(torch.randn(5, 8, 8))


class TestFlowUpsampling:
    def test_constant_flow_doubles(self):
        flow = torch.zeros(2, 4, 4)
        flow[0] = 1.0
        up = upsample_flow(flow, 2)
        assert up.shape == (2, 8, 8)
        assert torch.allclose(up[0], torch.full((8, 8), 2.0))
        assert torch.equal(up[1], torch.zeros(8, 8))

    def test_zero_flow(self):
        up = upsample_flow(torch.zeros(2, 3, 5), 2)
        assert torch.equal(up, torch.zeros(2, 6, 10))

    def test_matches_interpolation_oracle(self):
        torch.manual_seed(0)
        flow = torch.randn(2, 4, 4, dtype=torch.float64)
        up = upsample_flow(flow, 2)
        oracle = torch.nn.functional.interpolate(
            flow.unsqueeze(0), scale_factor=2, mode="bilinear",
            align_corners=False).squeeze(0) * 2.0
        assert torch.allclose(up, oracle, atol=1e-6)

    def test_rejects_bad_factor(self):
        with pytest.raises(ValueError):
            upsample_flow(torch.zeros(2, 4, 4), 1)
        with pytest.raises(ValueError):
            upsample_flow(torch.zeros(2, 4, 4), 2.5)

    def test_resize_flow_rescales_each_axis(self):
        flow = torch.ones(2, 4, 8)
        out = resize_flow(flow, (8, 8))
        assert torch.allclose(out[0], torch.ones(8, 8))      # width unchanged
        assert torch.allclose(out[1], torch.full((8, 8), 2.0))  # height doubled


class TestGradients:
    def test_motion_net_gradient_check(self):
        from viewsync.checks import gradient_check
        torch.manual_seed(1)
        net = MotionEstimator(2, width=0.1).double()
        x = torch.randn(2, 8, 8, dtype=torch.float64)
        rel = gradient_check(lambda t: net(t).mean(), x)
        assert rel < 1e-4

    def test_decoder_gradient_check(self):
        from viewsync.checks import gradient_check
        torch.manual_seed(2)
        dec = Decoder(2, width=0.1).double()
        x = torch.randn(2, 8, 8, dtype=torch.float64)
        rel = gradient_check(lambda t: dec(t).mean(), x)
        assert rel < 1e-4
