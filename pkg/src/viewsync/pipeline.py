"""Model assembly, training scenarios, and MAE/NAE evaluation.

Variants:
    base     projection + fusion + decoder, no synchronization
    sls      scene-level sync (motion flow between projected features)
    cls_cat  camera-level sync, concatenation matcher
    cls_cor  camera-level sync, correlation matcher
    cls_epi  camera-level sync, epipolar-weighted correlation matcher
"""

import warnings
from dataclasses import dataclass, field, asdict

import numpy as np
import torch
import torch.nn as nn

from .geometry import (CameraModel, ScenePlaneGrid, build_epipolar_mask,
                       build_projection_grid, fundamental_from_cameras,
                       project_features)
from .losses import LossConfig, similarity_loss, task_loss, total_loss, warping_loss
from .nets import Decoder, FeatureExtractor, MotionEstimator, resize_flow
from .simulate import Dataset
from .sync import (cls_sync, match_concat, multiscale_flow,
                   residual_correlation_inputs, sls_sync, warp)

VARIANTS = ("base", "sls", "cls_cat", "cls_cor", "cls_epi")


class PipelineError(ValueError):
    """Invalid model configuration or dataset mismatch."""


class TrainingDiverged(RuntimeError):
    """Non-finite loss encountered during training."""


@dataclass
class ModelConfig:
    variant: str = "cls_cor"
    n_views: int = 3
    reference_view: int = 0
    scales: int = 1                 # multi-scale flow levels (camera-level only)
    sigma: float = 5.0              # epipolar mask std, feature-grid pixels
    width: float = 0.5              # channel width multiplier vs. the full nets
    input_gain: float = 20.0        # input frames are scaled by this constant
    loss: LossConfig = field(default_factory=LossConfig)
    seed: int = 0

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise PipelineError(f"unknown variant {self.variant!r}")
        if not 0 <= self.reference_view < self.n_views:
            raise PipelineError("reference view does not exist")
        if self.scales < 1:
            raise PipelineError("scales must be >= 1")
        if self.variant == "sls" and self.scales != 1:
            raise PipelineError("scene-level sync operates at its native single scale")


class SyncCountingModel(nn.Module):
    """End-to-end multi-view counting model with optional view synchronization.

    forward() consumes one unsynchronized frame per view (reference view's
    frame defines the prediction time).  Synchronized counterpart frames are
    consumed only when explicitly passed for training losses; the prediction
    path never reads them.
    """

    def __init__(self, config: ModelConfig, cameras, scene: ScenePlaneGrid):
        super().__init__()
        if config.variant == "cls_epi" and not cameras:
            raise PipelineError("variant cls_epi requires camera calibration")
        if len(cameras) != config.n_views:
            raise PipelineError(
                f"config expects {config.n_views} views, got {len(cameras)} cameras")
        self.config = config
        self.cameras = list(cameras)
        self.scene = scene

        torch.manual_seed(config.seed)
        self.extractor = FeatureExtractor(in_channels=1, width=config.width)
        if config.scales > self.extractor.num_scales:
            raise PipelineError(
                f"scales={config.scales} exceeds extractor scales "
                f"{self.extractor.num_scales}")

        # channels per extractor scale, coarsest first
        chans = list(reversed(self.extractor.out_channels))
        self.tap_channels = chans[:max(config.scales, 1)]
        self.proj_channels = chans[0]      # the coarsest tap feeds projection
        num_pools = self.extractor.num_scales - 1
        self.proj_scale = 1.0 / (2 ** num_pools)
        self.grids = [build_projection_grid(c, scene, self.proj_scale)
                      for c in self.cameras]
        self.decoder = Decoder(config.n_views * self.proj_channels, config.width)

        self.others = [i for i in range(config.n_views) if i != config.reference_view]
        w, h = self.cameras[0].image_size
        div = 2 ** num_pools
        self.work_size = (h // div, w // div)   # correlation destination grid

        variant = config.variant
        if variant == "sls":
            self.motion_nets = nn.ModuleList(
                [MotionEstimator(2 * self.proj_channels, config.width)])
        elif variant == "cls_cat":
            self.motion_nets = nn.ModuleList(
                [MotionEstimator(2 * c, config.width) for c in self.tap_channels])
        elif variant in ("cls_cor", "cls_epi"):
            corr_channels = self.work_size[0] * self.work_size[1]
            self.motion_nets = nn.ModuleList(
                [MotionEstimator(corr_channels, config.width)
                 for _ in self.tap_channels])
        else:
            self.motion_nets = nn.ModuleList()

        self.masks = None
        if variant == "cls_epi":
            self.masks = {}
            ref_cam = self.cameras[config.reference_view]
            for i in self.others:
                F = fundamental_from_cameras(ref_cam, self.cameras[i])
                per_scale = []
                for j in range(len(self.tap_channels)):
                    fs = self.proj_scale * (2 ** j)
                    src = (int(h * fs), int(w * fs))
                    per_scale.append(build_epipolar_mask(
                        F, src, self.work_size, config.sigma, fs,
                        dst_scale=self.proj_scale))
                self.masks[i] = per_scale

    # -- internals ---------------------------------------------------------

    def _as_tensor(self, frame):
        t = frame if torch.is_tensor(frame) else torch.as_tensor(np.asarray(frame))
        t = t.float()
        if t.dim() == 2:
            t = t.unsqueeze(0)
        return t * self.config.input_gain

    def _taps(self, frame):
        """Camera-view feature maps of one frame, coarsest first."""
        feats = self.extractor(self._as_tensor(frame))
        return list(reversed(feats))[:len(self.tap_channels)]

    def _sync_one_view(self, ref_taps, other_taps, view):
        """Camera-level sync of one view; returns (warped taps, flows per scale)."""
        matcher = {"cls_cat": "cat", "cls_cor": "cor", "cls_epi": "epi"}[self.config.variant]
        masks = self.masks[view] if self.masks is not None else None
        if len(self.tap_channels) == 1:
            warped, flow = cls_sync(ref_taps[0], other_taps[0], matcher,
                                    self.motion_nets[0],
                                    mask=masks[0] if masks else None)
            return [warped], [flow]
        if matcher == "cat":
            inputs = [match_concat(r, o) for r, o in zip(ref_taps, other_taps)]
        else:
            inputs = residual_correlation_inputs(ref_taps, other_taps, masks)
        flows = multiscale_flow(inputs, self.motion_nets)
        warped = [warp(o, fl) for o, fl in zip(other_taps, flows)]
        return warped, flows

    # -- forward -----------------------------------------------------------

    def forward(self, frames, sync_frames=None, need_similarity=False):
        """One multi-view tuple -> density prediction and per-view flows.

        frames: one (H, W) or (1, H, W) array/tensor per view.  sync_frames,
        when given, are the synchronized counterparts used only to compute
        feature warping targets (training scenario with synced pairs).
        """
        cfg = self.config
        if len(frames) != cfg.n_views:
            raise PipelineError(f"expected {cfg.n_views} views, got {len(frames)}")
        taps = [self._taps(f) for f in frames]

        flows = {}
        warping_terms = []
        similarity_terms = []
        proj = {}

        if cfg.variant in ("cls_cat", "cls_cor", "cls_epi"):
            warped_taps = {}
            for i in self.others:
                warped_taps[i], view_flows = self._sync_one_view(
                    taps[cfg.reference_view], taps[i], i)
                flows[i] = view_flows[-1]
                if sync_frames is not None:
                    # supervise the flows only: features detached on both
                    # sides, otherwise the extractor zeroes this term by
                    # becoming desync-invariant before the flows can learn
                    with torch.no_grad():
                        sync_taps = self._taps(sync_frames[i])
                    warping_terms.extend(
                        warping_loss(s, warp(o.detach(), fl), cfg.loss,
                                     normalize=True)
                        for s, o, fl in zip(sync_taps, taps[i], view_flows))
            # projection consumes the coarsest tap, warped by the finest flow
            sim_proj = {}
            for i in range(cfg.n_views):
                if i == cfg.reference_view:
                    feat = taps[i][0]
                elif len(self.tap_channels) == 1:
                    feat = warped_taps[i][0]
                else:
                    fine_flow = resize_flow(flows[i], taps[i][0].shape[1:])
                    feat = warp(taps[i][0], fine_flow)
                proj[i] = project_features(feat, self.grids[i])
                if need_similarity and i != cfg.reference_view:
                    fine = flows[i] if len(self.tap_channels) == 1 else fine_flow
                    sim_proj[i] = project_features(
                        warp(taps[i][0].detach(), fine), self.grids[i])
        else:
            for i in range(cfg.n_views):
                proj[i] = project_features(taps[i][0], self.grids[i])
            if cfg.variant == "sls":
                sim_proj = {}
                ref_proj = proj[cfg.reference_view]
                for i in self.others:
                    warped, flow = sls_sync(ref_proj, proj[i], self.motion_nets[0])
                    flows[i] = flow
                    if sync_frames is not None:
                        # flow-only supervision; see the camera-level branch
                        with torch.no_grad():
                            sync_proj = project_features(
                                self._taps(sync_frames[i])[0], self.grids[i])
                        warping_terms.append(
                            warping_loss(sync_proj, warp(proj[i].detach(), flow),
                                         cfg.loss, normalize=True))
                    if need_similarity:
                        sim_proj[i] = warp(proj[i].detach(), flow)
                    proj[i] = warped

        if need_similarity and cfg.variant != "base":
            # like the warping terms, this trains the flows, not the features
            ref_proj = proj[cfg.reference_view].detach()
            similarity_terms = [similarity_loss(ref_proj, sim_proj[i], empty="zero")
                                for i in self.others]

        order = [cfg.reference_view] + self.others
        fused = torch.cat([proj[i] for i in order], dim=0)
        density = self.decoder(fused)
        return {"density": density, "flows": flows,
                "warping_terms": warping_terms,
                "similarity_terms": similarity_terms}


def assemble_model(config: ModelConfig, cameras, scene: ScenePlaneGrid) -> SyncCountingModel:
    return SyncCountingModel(config, cameras, scene)


def model_manifest(model: SyncCountingModel) -> dict:
    """JSON-serializable description sufficient to rebuild the model."""
    cfg = model.config
    doc = asdict(cfg)
    doc["loss"] = {"gamma": cfg.loss.gamma, "scenario": cfg.loss.scenario}
    cameras = [{"view_id": c.view_id, "intrinsics": c.intrinsics.tolist(),
                "rotation": c.rotation.tolist(), "translation": c.translation.tolist(),
                "image_width": c.image_size[0], "image_height": c.image_size[1]}
               for c in model.cameras]
    scene = {"origin": list(model.scene.origin), "cell_size": model.scene.cell_size,
             "rows": model.scene.grid_size[0], "cols": model.scene.grid_size[1],
             "height": model.scene.height}
    specs = {"extractor": model.extractor.stack.spec.to_dict(),
             "decoder": model.decoder.stack.spec.to_dict(),
             "motion_nets": [n.stack.spec.to_dict() for n in model.motion_nets]}
    return {"config": doc, "cameras": cameras, "scene": scene, "specs": specs,
            "seed": cfg.seed}


def model_from_manifest(manifest: dict) -> SyncCountingModel:
    doc = dict(manifest["config"])
    doc["loss"] = LossConfig(**doc["loss"])
    config = ModelConfig(**doc)
    cameras = [CameraModel(np.array(v["intrinsics"]), np.array(v["rotation"]),
                           np.array(v["translation"]),
                           (v["image_width"], v["image_height"]), v["view_id"])
               for v in manifest["cameras"]]
    s = manifest["scene"]
    scene = ScenePlaneGrid(tuple(s["origin"]), s["cell_size"],
                           (s["rows"], s["cols"]), s["height"])
    return SyncCountingModel(config, cameras, scene)


@dataclass
class TrainConfig:
    lr: float = 1e-3
    epochs: int = 10
    fine_tune_lr_scale: float = 0.1    # BaseSU fine-tuning learning-rate factor
    log_every: int = 0                 # 0: log once per epoch
    clip_norm: float = 1.0             # global gradient-norm clip; 0 disables


def _check_dataset(model: SyncCountingModel, dataset: Dataset):
    if dataset.n_views != model.config.n_views:
        raise PipelineError(
            f"dataset has {dataset.n_views} views, model expects "
            f"{model.config.n_views}")


def train(model: SyncCountingModel, dataset: Dataset, train_config: TrainConfig = None,
          log=None, lr=None):
    """Minimize the scenario's total loss over the dataset's frame tuples.

    One multi-view tuple per step, Adam optimizer, deterministic given the
    model seed.  Returns the per-step loss history (list of dicts); raises
    TrainingDiverged on a non-finite loss.
    """
    _check_dataset(model, dataset)
    tc = train_config or TrainConfig()
    cfg = model.config
    scenario = cfg.loss.scenario
    if scenario == "sync_plus_unsync" and dataset.sync_frames is None:
        raise PipelineError("scenario sync_plus_unsync needs synchronized pairs "
                            "in the dataset")
    optimizer = torch.optim.Adam(model.parameters(), lr=lr or tc.lr)
    rng = np.random.default_rng(cfg.seed)
    history = []
    step = 0
    model.train()
    for epoch in range(tc.epochs):
        for k in rng.permutation(dataset.n_frames):
            frames = [dataset.frames[i, k] for i in range(dataset.n_views)]
            sync = None
            if scenario == "sync_plus_unsync":
                sync = [dataset.sync_frames[i, k] for i in range(dataset.n_views)]
            out = model(frames, sync_frames=sync,
                        need_similarity=(scenario == "unsync_only"))
            gt = torch.as_tensor(dataset.gt[k])
            parts = {"task": task_loss(out["density"], gt),
                     "warping": out["warping_terms"],
                     "similarity": out["similarity_terms"]}
            loss = total_loss(parts, cfg.loss)
            if sync is not None:
                # the synchronized pairs are labeled data too: supervising the
                # count on them keeps synchronized inputs a fixed point
                loss = loss + task_loss(model(sync)["density"], gt)
            if not torch.isfinite(loss):
                raise TrainingDiverged(
                    f"non-finite loss at step {step} (epoch {epoch}, frame {k}): "
                    f"task={float(parts['task'].detach())}")
            optimizer.zero_grad()
            loss.backward()
            if tc.clip_norm:
                torch.nn.utils.clip_grad_norm_(model.parameters(), tc.clip_norm)
            optimizer.step()
            record = {
                "step": step, "epoch": epoch,
                "task": float(parts["task"].detach()),
                "warping": [float(t.detach()) for t in parts["warping"]],
                "similarity": [float(t.detach()) for t in parts["similarity"]],
                "total": float(loss.detach()),
            }
            history.append(record)
            if log and (tc.log_every and step % tc.log_every == 0
                        or not tc.log_every and k == dataset.n_frames - 1):
                log(record)
            step += 1
    model.eval()
    return history


def train_basesu(model: SyncCountingModel, sync_dataset: Dataset,
                 unsync_dataset: Dataset, train_config: TrainConfig = None, log=None):
    """BaseSU: train on synchronized data, fine-tune on unsynchronized data
    at a reduced learning rate."""
    tc = train_config or TrainConfig()
    hist = train(model, sync_dataset, tc, log=log)
    hist += train(model, unsync_dataset, tc, log=log, lr=tc.lr * tc.fine_tune_lr_scale)
    return hist


def predict(model: SyncCountingModel, frames):
    """Single forward pass on an unsynchronized frame tuple (no synced inputs)."""
    model.eval()
    with torch.no_grad():
        out = model(frames)
    return out["density"].numpy(), {i: f.numpy() for i, f in out["flows"].items()}


def count_metrics(pred_counts, gt_counts) -> dict:
    """MAE / NAE of predicted vs. ground-truth counts.

    Frames with zero ground-truth count are excluded from NAE with a warning.
    """
    pred_counts = np.asarray(pred_counts, dtype=np.float64)
    gt_counts = np.asarray(gt_counts, dtype=np.float64)
    abs_err = np.abs(pred_counts - gt_counts)
    mae = float(abs_err.mean())
    nonzero = gt_counts != 0
    if not nonzero.all():
        warnings.warn(f"{int((~nonzero).sum())} frames with zero ground-truth "
                      "count excluded from NAE")
    nae = float((abs_err[nonzero] / gt_counts[nonzero]).mean()) if nonzero.any() \
        else float("nan")
    return {"MAE": mae, "NAE": nae, "pred_counts": pred_counts.tolist(),
            "gt_counts": gt_counts.tolist()}


def evaluate(model: SyncCountingModel, dataset: Dataset) -> dict:
    """MAE / NAE of predicted counts (density-map sums) over the dataset."""
    _check_dataset(model, dataset)
    pred_counts = []
    for k in range(dataset.n_frames):
        density, _ = predict(model, [dataset.frames[i, k]
                                     for i in range(dataset.n_views)])
        pred_counts.append(float(density.sum()))
    return count_metrics(pred_counts, dataset.counts)


class CrowdCounter:
    """Estimator-style front end: configure, fit on a dataset, predict densities.

    Follows the fit/predict/get_params convention so experiments compose with
    generic hyperparameter tooling; X is a multi-view Dataset rather than a
    flat feature matrix.
    """

    def __init__(self, variant="cls_cor", n_views=3, reference_view=0, scales=1,
                 sigma=5.0, width=0.5, input_gain=20.0, gamma=None,
                 scenario="unsync_only", lr=1e-3, epochs=10, seed=0):
        self.variant = variant
        self.n_views = n_views
        self.reference_view = reference_view
        self.scales = scales
        self.sigma = sigma
        self.width = width
        self.input_gain = input_gain
        self.gamma = gamma
        self.scenario = scenario
        self.lr = lr
        self.epochs = epochs
        self.seed = seed
        self.model_ = None
        self.history_ = None

    _params = ("variant", "n_views", "reference_view", "scales", "sigma", "width",
               "input_gain", "gamma", "scenario", "lr", "epochs", "seed")

    def get_params(self, deep=True):
        return {name: getattr(self, name) for name in self._params}

    def set_params(self, **params):
        for name, value in params.items():
            if name not in self._params:
                raise PipelineError(f"unknown parameter {name!r}")
            setattr(self, name, value)
        return self

    def _loss_config(self):
        gamma = self.gamma
        if gamma is None:
            # defaults per training scenario: 1 for warping, 1000 for similarity
            gamma = {"sync_plus_unsync": 1.0, "unsync_only": 1000.0,
                     "task_only": 0.0}[self.scenario]
        return LossConfig(gamma=gamma, scenario=self.scenario)

    def build(self, cameras, scene) -> SyncCountingModel:
        config = ModelConfig(variant=self.variant, n_views=self.n_views,
                             reference_view=self.reference_view, scales=self.scales,
                             sigma=self.sigma, width=self.width,
                             input_gain=self.input_gain, loss=self._loss_config(),
                             seed=self.seed)
        self.model_ = assemble_model(config, cameras, scene)
        return self.model_

    def fit(self, dataset: Dataset, log=None):
        if self.model_ is None:
            self.build(dataset.cameras, dataset.scene)
        tc = TrainConfig(lr=self.lr, epochs=self.epochs)
        self.history_ = train(self.model_, dataset, tc, log=log)
        return self

    def predict(self, frames):
        if self.model_ is None:
            raise PipelineError("fit or build must be called before predict")
        density, _ = predict(self.model_, frames)
        return density

    def score(self, dataset: Dataset) -> dict:
        if self.model_ is None:
            raise PipelineError("fit or build must be called before score")
        return evaluate(self.model_, dataset)
