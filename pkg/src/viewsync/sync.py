"""Synchronization operators: flow-guided warping, feature matchers, and
scene-level / camera-level synchronization with multi-scale flow fusion.
"""

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

from .geometry import EpipolarMask, bilinear_sample
from .nets import MotionEstimator, resize_flow, upsample_flow


class SyncError(ValueError):
    """Mismatched shapes or inconsistent synchronization inputs."""


def warp(features: torch.Tensor, flow: torch.Tensor) -> torch.Tensor:
    """Backward-warp (C, H, W) features by a (2, H, W) flow.

    output(x, y) = bilinear sample of input at (x + dx(x, y), y + dy(x, y)),
    zero outside the border.  Pure spatial resampling: values are only moved,
    never transformed.  Differentiable in both features and flow.
    """
    if features.dim() != 3 or flow.dim() != 3 or flow.shape[0] != 2:
        raise SyncError("expected (C, H, W) features and (2, H, W) flow")
    if features.shape[1:] != flow.shape[1:]:
        raise SyncError(
            f"feature size {tuple(features.shape[1:])} does not match "
            f"flow size {tuple(flow.shape[1:])}")
    H, W = features.shape[1:]
    ys, xs = torch.meshgrid(
        torch.arange(H, dtype=features.dtype, device=features.device),
        torch.arange(W, dtype=features.dtype, device=features.device),
        indexing="ij")
    return bilinear_sample(features, xs + flow[0], ys + flow[1])


def match_concat(ref_feat: torch.Tensor, other_feat: torch.Tensor) -> torch.Tensor:
    """Channel-wise concatenation, reference first."""
    if ref_feat.shape[1:] != other_feat.shape[1:]:
        raise SyncError("spatial sizes must match for concatenation")
    return torch.cat([ref_feat, other_feat], dim=0)


@dataclass
class CorrelationVolume:
    """All-pairs channel dot products between two feature maps.

    ``scores`` is (H*W, H'*W'); entry ((x, y), (x', y')) is the dot product of
    ref(x, y) and other(x', y'), divided by the channel count if normalized.
    """

    scores: torch.Tensor
    src_size: tuple
    dst_size: tuple
    normalized: bool = True

    def as_motion_input(self) -> torch.Tensor:
        """Reshape to an (H'*W')-channel map over the source grid (H, W)."""
        H, W = self.src_size
        return self.scores.T.reshape(-1, H, W)


def match_correlation(ref_feat: torch.Tensor, other_feat: torch.Tensor,
                      normalized: bool = True) -> CorrelationVolume:
    """Dense correlation between every source and destination location."""
    if ref_feat.shape[0] != other_feat.shape[0]:
        raise SyncError("channel counts must match for correlation")
    C, H, W = ref_feat.shape
    H2, W2 = other_feat.shape[1:]
    scores = ref_feat.reshape(C, H * W).T @ other_feat.reshape(C, H2 * W2)
    if normalized:
        scores = scores / C
    return CorrelationVolume(scores, (H, W), (H2, W2), normalized)


def apply_epipolar_weights(volume: CorrelationVolume, mask: EpipolarMask) -> CorrelationVolume:
    """Elementwise product of correlation scores with epipolar weights."""
    weights = torch.as_tensor(mask.weights, dtype=volume.scores.dtype,
                              device=volume.scores.device)
    if weights.shape != volume.scores.shape:
        raise SyncError(
            f"mask shape {tuple(weights.shape)} does not match "
            f"correlation shape {tuple(volume.scores.shape)}")
    return CorrelationVolume(volume.scores * weights, volume.src_size,
                             volume.dst_size, volume.normalized)


def sls_sync(ref_proj: torch.Tensor, other_proj: torch.Tensor,
             motion_net: MotionEstimator):
    """Scene-level synchronization of one non-reference view.

    The projected reference and other-view features are concatenated
    (reference first; this order is part of the checkpoint contract), fed to
    the motion net, and the other view is backward-warped by the result.

    Returns (warped_proj, flow).
    """
    if ref_proj.shape != other_proj.shape:
        raise SyncError("projected features must share the scene grid")
    flow = motion_net(match_concat(ref_proj, other_proj))
    return warp(other_proj, flow), flow


def _resize_features(feat: torch.Tensor, size) -> torch.Tensor:
    if feat.shape[1:] == tuple(size):
        return feat
    return F.interpolate(feat.unsqueeze(0), size=tuple(size), mode="bilinear",
                         align_corners=False).squeeze(0)


def cls_sync(ref_feat: torch.Tensor, other_feat: torch.Tensor, matcher: str,
             motion_net: MotionEstimator, mask: EpipolarMask = None,
             work_size=None):
    """Camera-level synchronization of one non-reference view.

    matcher: 'cat' (channel concatenation), 'cor' (correlation volume), or
    'epi' (correlation masked by epipolar weights; requires ``mask``).
    For 'cor'/'epi' the features may first be downsampled to ``work_size``
    (H, W); the estimated flow is upsampled back to the feature resolution.

    Returns (warped_feat, flow).
    """
    if matcher not in ("cat", "cor", "epi"):
        raise SyncError(f"unknown matcher {matcher!r}")
    if matcher == "epi" and mask is None:
        raise SyncError("matcher 'epi' requires an epipolar mask")
    if matcher == "cat":
        flow = motion_net(match_concat(ref_feat, other_feat))
    else:
        ref_w = _resize_features(ref_feat, work_size) if work_size else ref_feat
        other_w = _resize_features(other_feat, work_size) if work_size else other_feat
        volume = match_correlation(ref_w, other_w)
        if matcher == "epi":
            volume = apply_epipolar_weights(volume, mask)
        flow = motion_net(volume.as_motion_input())
        if flow.shape[1:] != ref_feat.shape[1:]:
            flow = resize_flow(flow, ref_feat.shape[1:])
    return warp(other_feat, flow), flow


def multiscale_flow(inputs, motion_nets):
    """Coarse-to-fine flow fusion over m scales (coarsest first).

    inputs[0] is the match result at the coarsest scale; inputs[j] for j > 0
    are the residual match inputs at progressively finer scales (each a factor
    2 larger).  Each scale's motion net predicts either the base flow (j = 0)
    or a residual that is added to the upsampled previous-scale flow.

    Returns the list of refined flows per scale.
    """
    if len(inputs) < 1:
        raise SyncError("at least one scale is required")
    if len(inputs) != len(motion_nets):
        raise SyncError("one motion net per scale is required")
    flows = []
    for j, (inp, net) in enumerate(zip(inputs, motion_nets)):
        w = net(inp)
        if j > 0:
            up = upsample_flow(flows[-1], 2)
            if up.shape != w.shape:
                raise SyncError(
                    f"scale {j} size {tuple(w.shape[1:])} does not chain from "
                    f"previous scale {tuple(flows[-1].shape[1:])}")
            w = up + w
        flows.append(w)
    return flows


def residual_correlation_inputs(ref_feats, other_feats, masks=None, normalized=True):
    """Build multi-scale correlation inputs (coarsest first) for flow fusion.

    The destination features of every scale are resampled to the coarsest
    scale's grid so correlation channel counts match across scales; for finer
    scales the upsampled previous correlation map is subtracted, so each
    motion net sees the inter-scale difference.
    """
    if len(ref_feats) != len(other_feats):
        raise SyncError("need matching per-scale feature lists")
    dst_size = other_feats[0].shape[1:]
    maps = []
    for j, (ref, other) in enumerate(zip(ref_feats, other_feats)):
        volume = match_correlation(ref, _resize_features(other, dst_size), normalized)
        if masks is not None and masks[j] is not None:
            volume = apply_epipolar_weights(volume, masks[j])
        maps.append(volume.as_motion_input())
    inputs = [maps[0]]
    for j in range(1, len(maps)):
        up = F.interpolate(maps[j - 1].unsqueeze(0), size=maps[j].shape[1:],
                           mode="bilinear", align_corners=False).squeeze(0)
        inputs.append(maps[j] - up)
    return inputs


def flow_to_rgb(flow: torch.Tensor) -> np.ndarray:
    """Visualize a flow field: hue = direction, saturation/value = magnitude."""
    fl = flow.detach().cpu().numpy()
    mag = np.sqrt(fl[0] ** 2 + fl[1] ** 2)
    ang = np.arctan2(fl[1], fl[0])
    hue = (ang + np.pi) / (2 * np.pi)
    val = mag / max(mag.max(), 1e-9)
    i = np.floor(hue * 6).astype(int) % 6
    f = hue * 6 - np.floor(hue * 6)
    p, q, t = np.zeros_like(val), val * (1 - f), val * f
    rgb = np.zeros(fl.shape[1:] + (3,))
    lut = [(val, t, p), (q, val, p), (p, val, t), (p, q, val), (t, p, val), (val, p, q)]
    for k, (r, g, b) in enumerate(lut):
        m = i == k
        rgb[m, 0], rgb[m, 1], rgb[m, 2] = r[m], g[m], b[m]
    return (rgb * 255).astype(np.uint8)
