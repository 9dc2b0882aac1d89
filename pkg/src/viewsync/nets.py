"""Learnable sub-networks: feature extractor, motion estimator, density decoder.

Layer chains follow the counting-model and motion-net layouts the toolkit is
built around, at a configurable width multiplier so desk-scale experiments stay
cheap.  All convs use same-size padding and ReLU activations everywhere except
each network's final layer; the motion net's final layer is zero-initialized so
training starts from an identity warp.
"""

from dataclasses import dataclass, field

import torch
import torch.nn as nn
import torch.nn.functional as F


@dataclass(frozen=True)
class ConvLayerSpec:
    out_channels: int
    in_channels: int
    kernel: tuple = (5, 5)
    relu: bool = True
    pool_after: bool = False


@dataclass(frozen=True)
class ConvBlockSpec:
    """Ordered conv layers with same-size padding and optional 2x2 pools."""

    layers: tuple

    def __post_init__(self):
        prev_out = None
        for layer in self.layers:
            if layer.kernel[0] % 2 == 0 or layer.kernel[1] % 2 == 0:
                raise ValueError("kernel sizes must be odd for same-size padding")
            if prev_out is not None and layer.in_channels != prev_out:
                raise ValueError("consecutive layers' channel counts must chain")
            prev_out = layer.out_channels

    def param_count(self) -> int:
        """Closed-form parameter count: filter volumes plus biases."""
        return sum(l.out_channels * (l.in_channels * l.kernel[0] * l.kernel[1] + 1)
                   for l in self.layers)

    def to_dict(self):
        return [
            {"out": l.out_channels, "in": l.in_channels, "kernel": list(l.kernel),
             "relu": l.relu, "pool_after": l.pool_after}
            for l in self.layers
        ]

    @staticmethod
    def from_dict(data) -> "ConvBlockSpec":
        return ConvBlockSpec(tuple(
            ConvLayerSpec(d["out"], d["in"], tuple(d["kernel"]), d["relu"], d["pool_after"])
            for d in data))


def _scaled(channels: int, width: float) -> int:
    return max(1, int(round(channels * width)))


def feature_extractor_spec(in_channels: int = 1, width: float = 1.0) -> ConvBlockSpec:
    """conv1-conv7 chain of the counting feature extractor (two 2x2 pools)."""
    c16, c32, c64 = _scaled(16, width), _scaled(32, width), _scaled(64, width)
    return ConvBlockSpec((
        ConvLayerSpec(c16, in_channels),
        ConvLayerSpec(c16, c16, pool_after=True),
        ConvLayerSpec(c32, c16),
        ConvLayerSpec(c32, c32, pool_after=True),
        ConvLayerSpec(c64, c32),
        ConvLayerSpec(c32, c64),
    ))


def aux_head_spec(width: float = 1.0) -> ConvBlockSpec:
    """Optional conv7 single-view density head (disabled by default)."""
    return ConvBlockSpec((ConvLayerSpec(1, _scaled(32, width), relu=False),))


def motion_net_spec(in_channels: int, width: float = 1.0) -> ConvBlockSpec:
    """Six 5x5 convs (128, 128, 64, 64, 32 -> 2), final layer linear."""
    c128, c64, c32 = _scaled(128, width), _scaled(64, width), _scaled(32, width)
    return ConvBlockSpec((
        ConvLayerSpec(c128, in_channels),
        ConvLayerSpec(c128, c128),
        ConvLayerSpec(c64, c128),
        ConvLayerSpec(c64, c64),
        ConvLayerSpec(c32, c64),
        ConvLayerSpec(2, c32, relu=False),
    ))


def decoder_spec(in_channels: int, width: float = 1.0) -> ConvBlockSpec:
    """Fused-feature prediction head: 64 -> 32 -> 1, final layer linear."""
    c64, c32 = _scaled(64, width), _scaled(32, width)
    return ConvBlockSpec((
        ConvLayerSpec(c64, in_channels),
        ConvLayerSpec(c32, c64),
        ConvLayerSpec(1, c32, relu=False),
    ))


class ConvStack(nn.Module):
    """Sequential conv stack built from a ConvBlockSpec."""

    def __init__(self, spec: ConvBlockSpec):
        super().__init__()
        self.spec = spec
        self.convs = nn.ModuleList()
        for layer in spec.layers:
            pad = (layer.kernel[0] // 2, layer.kernel[1] // 2)
            self.convs.append(nn.Conv2d(layer.in_channels, layer.out_channels,
                                        layer.kernel, padding=pad))
        self.reset_parameters()

    def reset_parameters(self):
        for conv in self.convs:
            nn.init.kaiming_normal_(conv.weight, mode="fan_in", nonlinearity="relu")
            nn.init.zeros_(conv.bias)

    def num_pools(self) -> int:
        return sum(1 for l in self.spec.layers if l.pool_after)

    def forward(self, x, return_taps=False):
        taps = []
        for conv, layer in zip(self.convs, self.spec.layers):
            x = conv(x)
            if layer.relu:
                x = F.relu(x)
            if layer.pool_after:
                taps.append(x)
                x = F.max_pool2d(x, 2)
        taps.append(x)
        return (x, taps) if return_taps else x


class FeatureExtractor(nn.Module):
    """Multi-scale camera-view feature extractor.

    Returns one feature map per scale, finest first: the taps before each 2x2
    pool plus the final map (spatial sizes input/1, input/2, input/4).
    """

    def __init__(self, in_channels: int = 1, width: float = 1.0):
        super().__init__()
        self.stack = ConvStack(feature_extractor_spec(in_channels, width))
        self.num_scales = self.stack.num_pools() + 1

    @property
    def out_channels(self):
        """Channels of each returned scale, finest first."""
        chans = []
        for layer in self.stack.spec.layers:
            if layer.pool_after:
                chans.append(layer.out_channels)
        chans.append(self.stack.spec.layers[-1].out_channels)
        return chans

    def forward(self, image: torch.Tensor):
        if image.dim() != 3:
            raise ValueError("image must be (C, H, W)")
        div = 2 ** self.stack.num_pools()
        _, H, W = image.shape
        if H % div or W % div:
            pad_h = (div - H % div) % div
            pad_w = (div - W % div) % div
            raise ValueError(
                f"input size {H}x{W} not divisible by {div}; pad to "
                f"{H + pad_h}x{W + pad_w}")
        _, taps = self.stack(image.unsqueeze(0), return_taps=True)
        return [t.squeeze(0) for t in taps]


class MotionEstimator(nn.Module):
    """Predicts a 2-channel motion flow (feature-grid pixels) from match features."""

    def __init__(self, in_channels: int, width: float = 1.0):
        super().__init__()
        self.in_channels = in_channels
        self.stack = ConvStack(motion_net_spec(in_channels, width))
        # identity warp at init
        nn.init.zeros_(self.stack.convs[-1].weight)
        nn.init.zeros_(self.stack.convs[-1].bias)

    def forward(self, match_features: torch.Tensor) -> torch.Tensor:
        if match_features.dim() != 3:
            raise ValueError("match features must be (C, H, W)")
        if match_features.shape[0] != self.in_channels:
            raise ValueError(
                f"expected {self.in_channels} input channels, got {match_features.shape[0]}")
        return self.stack(match_features.unsqueeze(0)).squeeze(0)


class Decoder(nn.Module):
    """Decodes fused scene-plane features into a single-channel density map."""

    def __init__(self, in_channels: int, width: float = 1.0):
        super().__init__()
        self.in_channels = in_channels
        self.stack = ConvStack(decoder_spec(in_channels, width))

    def forward(self, fused: torch.Tensor) -> torch.Tensor:
        if fused.dim() != 3:
            raise ValueError("fused features must be (C, H, W)")
        if fused.shape[0] != self.in_channels:
            raise ValueError(
                f"expected {self.in_channels} fused channels, got {fused.shape[0]}")
        return self.stack(fused.unsqueeze(0)).squeeze(0).squeeze(0)


def resize_flow(flow: torch.Tensor, size) -> torch.Tensor:
    """Bilinearly resize a (2, H, W) flow and rescale displacements to the new grid."""
    if flow.dim() != 3 or flow.shape[0] != 2:
        raise ValueError("flow must be (2, H, W)")
    H, W = flow.shape[1:]
    h2, w2 = int(size[0]), int(size[1])
    out = F.interpolate(flow.unsqueeze(0), size=(h2, w2), mode="bilinear",
                        align_corners=False).squeeze(0)
    scale = out.new_tensor([w2 / W, h2 / H]).view(2, 1, 1)
    return out * scale


def upsample_flow(flow: torch.Tensor, factor: int = 2) -> torch.Tensor:
    """Upsample a flow by an integer factor; displacement values scale with it."""
    if int(factor) != factor or factor < 2:
        raise ValueError("factor must be an integer >= 2")
    return resize_flow(flow, (flow.shape[1] * int(factor), flow.shape[2] * int(factor)))
