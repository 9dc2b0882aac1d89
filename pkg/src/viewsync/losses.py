"""Task, warping, and similarity losses plus their gamma-weighted combination."""

from dataclasses import dataclass

import torch


class LossError(ValueError):
    """Loss called outside its training scenario or with bad inputs."""


SCENARIOS = ("sync_plus_unsync", "unsync_only", "task_only")


@dataclass(frozen=True)
class LossConfig:
    """Which auxiliary loss is active and how strongly it is weighted.

    sync_plus_unsync uses the feature warping loss (needs synced frame pairs);
    unsync_only uses the projected-feature similarity loss; task_only uses the
    density loss alone.
    """

    gamma: float = 1.0
    scenario: str = "sync_plus_unsync"

    def __post_init__(self):
        if self.gamma < 0:
            raise LossError("gamma must be non-negative")
        if self.scenario not in SCENARIOS:
            raise LossError(f"unknown scenario {self.scenario!r}")


def task_loss(pred: torch.Tensor, gt: torch.Tensor) -> torch.Tensor:
    """Mean squared error between predicted and ground-truth density maps."""
    if pred.shape != gt.shape:
        raise LossError(f"shape mismatch {tuple(pred.shape)} vs {tuple(gt.shape)}")
    return ((pred - gt) ** 2).mean()


def warping_loss(synced_feat: torch.Tensor, warped_feat: torch.Tensor,
                 config: LossConfig = None, normalize: bool = False) -> torch.Tensor:
    """MSE between true synchronized features and warped unsynchronized features.

    Only meaningful when synced frame pairs exist, i.e. scenario sync_plus_unsync.

    With ``normalize`` the MSE is divided by the synced features' mean power,
    making the term invariant to the features' overall scale.  Since target and
    warped features come from the same extractor, the plain MSE can otherwise
    be minimized by shrinking all features toward zero instead of aligning them.
    """
    if config is not None and config.scenario == "unsync_only":
        raise LossError("warping loss requires synced pairs; not available in unsync_only")
    if synced_feat.shape != warped_feat.shape:
        raise LossError("feature shapes must match")
    loss = ((synced_feat - warped_feat) ** 2).mean()
    if normalize:
        loss = loss / ((synced_feat ** 2).mean() + 1e-12)
    return loss


def similarity_loss(ref_proj: torch.Tensor, warped_proj: torch.Tensor,
                    eps: float = 1e-8, empty: str = "raise") -> torch.Tensor:
    """Mean over valid spatial locations of 1 - cosine similarity along channels.

    Locations where either channel vector has norm below ``eps`` (e.g. masked
    scene cells) are excluded from the mean.  ``empty`` picks the behavior
    when no location is valid: "raise", or "zero" to return a zero term (so a
    training step whose warp left the grid entirely degrades instead of dying).
    """
    if ref_proj.shape != warped_proj.shape:
        raise LossError("feature shapes must match")
    na = ref_proj.norm(dim=0)
    nb = warped_proj.norm(dim=0)
    valid = (na >= eps) & (nb >= eps)
    if not valid.any():
        if empty == "zero":
            return (warped_proj * 0.0).sum()
        raise LossError("no valid spatial locations for similarity loss")
    cos = (ref_proj * warped_proj).sum(dim=0) / (na * nb).clamp_min(eps ** 2)
    return ((1.0 - cos) * valid).sum() / valid.sum()


def total_loss(parts: dict, config: LossConfig) -> torch.Tensor:
    """Combine the task loss with the scenario's auxiliary terms.

    parts: {'task': scalar, 'warping': [scalars], 'similarity': [scalars]};
    auxiliary lists hold one term per non-reference view (and per scale for
    camera-level warping).
    """
    if "task" not in parts:
        raise LossError("task loss term is required")
    total = parts["task"]
    if config.scenario == "sync_plus_unsync":
        terms = parts.get("warping")
        if not terms:
            raise LossError("scenario sync_plus_unsync requires warping terms")
        total = total + config.gamma * sum(terms)
    elif config.scenario == "unsync_only":
        terms = parts.get("similarity")
        if not terms:
            raise LossError("scenario unsync_only requires similarity terms")
        total = total + config.gamma * sum(terms)
    return total
