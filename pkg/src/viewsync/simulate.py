"""Synthetic multi-view crowd scenes: agent simulation, Gaussian-splat rendering,
desynchronization schedules, and dataset export/ingest.

A dataset directory holds:
    manifest.json               views, frame counts, timing, seeds
    cameras.json                per-view calibration + scene grid
    schedule.json               per-view per-frame offsets (seconds)
    view_<i>/frame_<k>.f32      unsynchronized frame (little-endian float32)
    view_<i>/sync_<k>.f32       synchronized counterpart (only if exported)
    gt/density_<k>.f32          scene-level density at reference times
    gt/counts.json              per-frame ground-truth counts
"""

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .geometry import CameraModel, ScenePlaneGrid, look_at_camera


class DatasetError(ValueError):
    """Corrupt, inconsistent, or incomplete dataset."""


@dataclass
class AgentTrack:
    """One simulated pedestrian: per-tick world positions at head height."""

    positions: np.ndarray   # (ticks, 2) meters
    height: float
    agent_id: int


def simulate_agents(n_agents: int, speed_range, bounds, ticks: int, tick_dt: float,
                    seed: int = 0, height: float = 1.75, turn_sigma: float = 0.15):
    """Constant-speed random walks with heading noise, reflecting at the bounds.

    bounds: (x0, y0, x1, y1) world rectangle.  Deterministic per seed.
    """
    if n_agents < 1:
        raise DatasetError("at least one agent is required")
    if ticks < 1:
        raise DatasetError("ticks must be >= 1")
    x0, y0, x1, y1 = (float(v) for v in bounds)
    rng = np.random.default_rng(seed)
    tracks = []
    for aid in range(n_agents):
        speed = rng.uniform(*speed_range)
        heading = rng.uniform(0, 2 * np.pi)
        pos = np.array([rng.uniform(x0, x1), rng.uniform(y0, y1)])
        positions = np.empty((ticks, 2))
        positions[0] = pos
        for k in range(1, ticks):
            heading += rng.normal(0.0, turn_sigma)
            step = speed * tick_dt * np.array([np.cos(heading), np.sin(heading)])
            pos = pos + step
            # reflect at the scene rectangle
            if pos[0] < x0 or pos[0] > x1:
                pos[0] = np.clip(2 * np.clip(pos[0], x0, x1) - pos[0], x0, x1)
                heading = np.pi - heading
            if pos[1] < y0 or pos[1] > y1:
                pos[1] = np.clip(2 * np.clip(pos[1], y0, y1) - pos[1], y0, y1)
                heading = -heading
            positions[k] = pos
        tracks.append(AgentTrack(positions, height, aid))
    return tracks


def _splat(canvas: np.ndarray, cx: float, cy: float, sigma: float):
    """Add one unit-mass truncated Gaussian centered at (cx, cy) [x, y] pixels.

    The kernel is normalized over its full truncation window before clipping,
    so interior splats integrate to exactly 1 and border splats lose mass.
    """
    H, W = canvas.shape
    R = int(np.ceil(4 * sigma))
    ix, iy = int(round(cx)), int(round(cy))
    xs = np.arange(ix - R, ix + R + 1)
    ys = np.arange(iy - R, iy + R + 1)
    kern = np.exp(-0.5 * (((xs[None, :] - cx) ** 2 + (ys[:, None] - cy) ** 2) / sigma ** 2))
    kern /= kern.sum()
    x_lo, x_hi = max(0, ix - R), min(W, ix + R + 1)
    y_lo, y_hi = max(0, iy - R), min(H, iy + R + 1)
    if x_lo >= x_hi or y_lo >= y_hi:
        return
    canvas[y_lo:y_hi, x_lo:x_hi] += kern[y_lo - (iy - R):y_hi - (iy - R),
                                         x_lo - (ix - R):x_hi - (ix - R)]


def render_camera_view(positions: np.ndarray, heights, camera: CameraModel,
                       splat_sigma: float = 1.5) -> np.ndarray:
    """Render agents as Gaussian head splats in a 1-channel camera image (H, W)."""
    W, H = camera.image_size
    canvas = np.zeros((H, W))
    positions = np.atleast_2d(positions)
    heights = np.broadcast_to(np.asarray(heights, dtype=np.float64), (len(positions),))
    pts = np.column_stack([positions, heights])
    uv, depth = camera.project(pts)
    for (u, v), d in zip(uv, depth):
        if d <= 0 or not (0 <= u <= W - 1 and 0 <= v <= H - 1):
            continue
        _splat(canvas, u, v, splat_sigma)
    return canvas.astype(np.float32)


@dataclass
class DensityMap:
    """Scene-level density whose integral is the crowd count."""

    values: np.ndarray
    grid: ScenePlaneGrid
    count: float

    def __post_init__(self):
        if np.any(self.values < 0):
            raise DatasetError("density values must be non-negative")


def render_scene_density(positions: np.ndarray, grid: ScenePlaneGrid,
                         sigma_cells: float = 1.5) -> DensityMap:
    """Gaussian splat per agent on the scene grid; count = number of agents."""
    rows, cols = grid.grid_size
    canvas = np.zeros((rows, cols))
    positions = np.atleast_2d(positions) if len(positions) else np.zeros((0, 2))
    for rc in grid.world_to_grid(positions) if len(positions) else []:
        _splat(canvas, rc[1], rc[0], sigma_cells)
    return DensityMap(canvas.astype(np.float32), grid, float(len(positions)))


@dataclass
class DesyncSchedule:
    """Per-view per-frame capture-time offsets relative to the reference view."""

    frame_interval: float             # seconds between reference frames
    offsets: np.ndarray               # (n_views, n_frames) seconds
    mode: str                         # 'constant' or 'random'
    reference_view: int = 0

    def __post_init__(self):
        if self.mode not in ("constant", "random"):
            raise DatasetError(f"unknown desync mode {self.mode!r}")
        self.offsets = np.asarray(self.offsets, dtype=np.float64)
        if np.any(self.offsets[self.reference_view] != 0):
            raise DatasetError("reference view offsets must all be zero")
        if self.mode == "constant":
            if np.any(self.offsets != self.offsets[:, :1]):
                raise DatasetError("constant mode requires per-view constant offsets")

    @property
    def n_views(self):
        return self.offsets.shape[0]

    @property
    def n_frames(self):
        return self.offsets.shape[1]


def make_desync_schedule(mode: str, params, n_views: int, n_frames: int,
                         frame_interval: float, seed: int = 0,
                         reference_view: int = 0) -> DesyncSchedule:
    """Build a schedule: constant per-view latency tau_i, or offsets drawn
    uniformly from [-kappa_i, kappa_i] independently per frame and view.

    params: per non-reference-view tau (constant) or kappa (random) values in
    seconds; a scalar is broadcast to all non-reference views.
    """
    params = np.broadcast_to(np.asarray(params, dtype=np.float64), (n_views - 1,))
    offsets = np.zeros((n_views, n_frames))
    others = [i for i in range(n_views) if i != reference_view]
    if mode == "constant":
        for p, i in zip(params, others):
            offsets[i, :] = p
    elif mode == "random":
        if np.any(params < 0):
            raise DatasetError("kappa must be non-negative")
        rng = np.random.default_rng(seed)
        for p, i in zip(params, others):
            offsets[i, :] = rng.uniform(-p, p, size=n_frames)
    else:
        raise DatasetError(f"unknown desync mode {mode!r}")
    return DesyncSchedule(frame_interval, offsets, mode, reference_view)


@dataclass
class SimConfig:
    """Desk-scale scene defaults: 3 views, 64x48 images, 48x56 scene grid."""

    n_views: int = 3
    n_frames: int = 40
    frame_interval: float = 1.0
    image_size: tuple = (64, 48)          # (width, height)
    grid_size: tuple = (48, 56)           # (rows, cols)
    cell_size: float = 0.25
    person_height: float = 1.75
    n_agents: int = 30
    speed_range: tuple = (0.5, 1.5)       # m/s
    ticks_per_frame: int = 8
    splat_sigma: float = 1.5              # image pixels
    gt_sigma_cells: float = 1.5
    mode: str = "random"                  # desync mode
    desync_params: tuple = (3.0, 3.0)     # tau_i (constant) or kappa_i (random)
    roam_margin: float = 0.0              # meters agents may wander past the grid
    camera_height: float = 6.0
    camera_distance: float = 9.0
    focal: float = 70.0
    include_sync: bool = True
    gt_mode: str = "reference"            # or 'unsync_average'
    seed: int = 0

    def scene_grid(self) -> ScenePlaneGrid:
        return ScenePlaneGrid((0.0, 0.0), self.cell_size, self.grid_size,
                              self.person_height)


def default_cameras(config: SimConfig):
    """Cameras on a ring around the scene center, looking slightly past it."""
    scene = config.scene_grid()
    rows, cols = scene.grid_size
    cx = scene.origin[0] + cols * scene.cell_size / 2
    cy = scene.origin[1] + rows * scene.cell_size / 2
    w, h = config.image_size
    K = np.array([[config.focal, 0.0, (w - 1) / 2],
                  [0.0, config.focal, (h - 1) / 2],
                  [0.0, 0.0, 1.0]])
    cameras = []
    for i in range(config.n_views):
        angle = 2 * np.pi * i / config.n_views + np.pi / 7
        pos = (cx + config.camera_distance * np.cos(angle),
               cy + config.camera_distance * np.sin(angle),
               config.camera_height)
        cameras.append(look_at_camera(pos, (cx, cy, 1.0), K, config.image_size, view_id=i))
    return cameras


@dataclass
class Dataset:
    """In-memory multi-view dataset keyed to reference-view times."""

    cameras: list
    scene: ScenePlaneGrid
    schedule: DesyncSchedule
    frames: np.ndarray                 # (n_views, n_frames, H, W) float32
    gt: np.ndarray                     # (n_frames, rows, cols) float32
    counts: np.ndarray                 # (n_frames,)
    sync_frames: np.ndarray = None     # optional synchronized counterparts
    meta: dict = field(default_factory=dict)

    @property
    def n_views(self):
        return self.frames.shape[0]

    @property
    def n_frames(self):
        return self.frames.shape[1]

    def split(self, n_train: int):
        """Split frames into (train, test) datasets along the frame axis."""
        def take(sl):
            return Dataset(
                self.cameras, self.scene,
                DesyncSchedule(self.schedule.frame_interval,
                               self.schedule.offsets[:, sl], self.schedule.mode,
                               self.schedule.reference_view),
                self.frames[:, sl], self.gt[sl], self.counts[sl],
                None if self.sync_frames is None else self.sync_frames[:, sl],
                dict(self.meta))
        return take(slice(0, n_train)), take(slice(n_train, self.n_frames))

    def synchronized(self) -> "Dataset":
        """The dataset with every view replaced by its synchronized frame."""
        if self.sync_frames is None:
            raise DatasetError("dataset was exported without synchronized pairs")
        sched = DesyncSchedule(self.schedule.frame_interval,
                               np.zeros_like(self.schedule.offsets), "constant",
                               self.schedule.reference_view)
        return Dataset(self.cameras, self.scene, sched, self.sync_frames.copy(),
                       self.gt, self.counts, self.sync_frames.copy(), dict(self.meta))


def generate_dataset(config: SimConfig, cameras=None) -> Dataset:
    """Simulate agents, desynchronize capture times, and render all frames.

    Offsets are snapped to the simulation tick grid (quantization error at
    most half a tick); ground truth corresponds to reference-view times.
    """
    scene = config.scene_grid()
    cameras = cameras if cameras is not None else default_cameras(config)
    if len(cameras) != config.n_views:
        raise DatasetError("camera count does not match n_views")
    schedule = make_desync_schedule(config.mode, config.desync_params,
                                    config.n_views, config.n_frames,
                                    config.frame_interval, seed=config.seed + 1)
    tick_dt = config.frame_interval / config.ticks_per_frame
    t_min = min(0.0, schedule.offsets.min())
    t_max = (config.n_frames - 1) * config.frame_interval + max(0.0, schedule.offsets.max())
    tick0 = int(np.floor(t_min / tick_dt))
    ticks = int(np.ceil(t_max / tick_dt)) - tick0 + 1

    rows, cols = scene.grid_size
    scene_rect = (scene.origin[0], scene.origin[1],
                  scene.origin[0] + cols * scene.cell_size,
                  scene.origin[1] + rows * scene.cell_size)
    m = config.roam_margin
    bounds = (scene_rect[0] - m, scene_rect[1] - m,
              scene_rect[2] + m, scene_rect[3] + m)
    tracks = simulate_agents(config.n_agents, config.speed_range, bounds, ticks,
                             tick_dt, seed=config.seed, height=config.person_height)
    all_pos = np.stack([t.positions for t in tracks], axis=1)   # (ticks, agents, 2)
    heights = np.array([t.height for t in tracks])

    def tick_of(time_s):
        return int(round(time_s / tick_dt)) - tick0

    def in_scene(pos):
        """Only agents inside the counted scene rectangle enter the ground truth."""
        keep = ((pos[:, 0] >= scene_rect[0]) & (pos[:, 0] <= scene_rect[2])
                & (pos[:, 1] >= scene_rect[1]) & (pos[:, 1] <= scene_rect[3]))
        return pos[keep]

    w, h = config.image_size
    frames = np.zeros((config.n_views, config.n_frames, h, w), dtype=np.float32)
    sync_frames = np.zeros_like(frames) if config.include_sync else None
    gt = np.zeros((config.n_frames, rows, cols), dtype=np.float32)
    counts = np.zeros(config.n_frames)
    for k in range(config.n_frames):
        t_ref = k * config.frame_interval
        ref_pos = all_pos[tick_of(t_ref)]
        for i, cam in enumerate(cameras):
            pos_i = all_pos[tick_of(t_ref + schedule.offsets[i, k])]
            frames[i, k] = render_camera_view(pos_i, heights, cam, config.splat_sigma)
            if sync_frames is not None:
                sync_frames[i, k] = render_camera_view(ref_pos, heights, cam,
                                                       config.splat_sigma)
        if config.gt_mode == "unsync_average":
            gt_pos = np.mean([all_pos[tick_of(t_ref + schedule.offsets[i, k])]
                              for i in range(config.n_views)], axis=0)
        else:
            gt_pos = ref_pos
        dmap = render_scene_density(in_scene(gt_pos), scene, config.gt_sigma_cells)
        gt[k] = dmap.values
        counts[k] = dmap.count

    meta = {"seed": config.seed, "ticks_per_frame": config.ticks_per_frame,
            "gt_mode": config.gt_mode, "n_agents": config.n_agents,
            "image_size": list(config.image_size)}
    return Dataset(cameras, scene, schedule, frames, gt, counts, sync_frames, meta)


# ---------------------------------------------------------------------------
# on-disk format

def write_cameras_file(path, cameras, scene: ScenePlaneGrid):
    doc = {
        "views": [
            {"view_id": c.view_id,
             "intrinsics": c.intrinsics.tolist(),
             "rotation": c.rotation.tolist(),
             "translation": c.translation.tolist(),
             "image_width": c.image_size[0],
             "image_height": c.image_size[1]}
            for c in cameras
        ],
        "scene": {"origin": list(scene.origin), "cell_size": scene.cell_size,
                  "rows": scene.grid_size[0], "cols": scene.grid_size[1],
                  "height": scene.height},
    }
    Path(path).write_text(json.dumps(doc, indent=1))


def read_cameras_file(path):
    try:
        doc = json.loads(Path(path).read_text())
        cameras = [
            CameraModel(np.array(v["intrinsics"]), np.array(v["rotation"]),
                        np.array(v["translation"]),
                        (v["image_width"], v["image_height"]), v["view_id"])
            for v in doc["views"]
        ]
        s = doc["scene"]
        scene = ScenePlaneGrid(tuple(s["origin"]), s["cell_size"],
                               (s["rows"], s["cols"]), s["height"])
    except (json.JSONDecodeError, KeyError, TypeError) as exc:
        raise DatasetError(f"bad cameras file {path}: {exc}") from exc
    return cameras, scene


def _write_f32(path, array):
    np.asarray(array, dtype="<f4").tofile(path)


def _read_f32(path, shape):
    data = np.fromfile(path, dtype="<f4")
    if data.size != int(np.prod(shape)):
        raise DatasetError(f"{path}: expected {np.prod(shape)} values, got {data.size}")
    return data.reshape(shape)


def export_dataset(dataset: Dataset, out_dir):
    """Write the dataset directory layout; returns the path."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    h, w = dataset.frames.shape[2:]
    manifest = {
        "n_views": dataset.n_views,
        "n_frames": dataset.n_frames,
        "image_height": h,
        "image_width": w,
        "frame_interval": dataset.schedule.frame_interval,
        "mode": dataset.schedule.mode,
        "reference_view": dataset.schedule.reference_view,
        "has_sync": dataset.sync_frames is not None,
        "meta": dataset.meta,
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=1))
    write_cameras_file(out / "cameras.json", dataset.cameras, dataset.scene)
    (out / "schedule.json").write_text(json.dumps({
        "mode": dataset.schedule.mode,
        "frame_interval": dataset.schedule.frame_interval,
        "reference_view": dataset.schedule.reference_view,
        "offsets": dataset.schedule.offsets.tolist(),
    }, indent=1))
    for i in range(dataset.n_views):
        vdir = out / f"view_{i}"
        vdir.mkdir(exist_ok=True)
        for k in range(dataset.n_frames):
            _write_f32(vdir / f"frame_{k}.f32", dataset.frames[i, k])
            if dataset.sync_frames is not None:
                _write_f32(vdir / f"sync_{k}.f32", dataset.sync_frames[i, k])
    gdir = out / "gt"
    gdir.mkdir(exist_ok=True)
    for k in range(dataset.n_frames):
        _write_f32(gdir / f"density_{k}.f32", dataset.gt[k])
    (gdir / "counts.json").write_text(json.dumps(dataset.counts.tolist()))
    return out


def ingest_dataset(path) -> Dataset:
    """Read and validate a dataset directory."""
    root = Path(path)
    try:
        manifest = json.loads((root / "manifest.json").read_text())
    except FileNotFoundError as exc:
        raise DatasetError(f"missing manifest in {root}") from exc
    except json.JSONDecodeError as exc:
        raise DatasetError(f"corrupt manifest in {root}: {exc}") from exc
    if not (root / "cameras.json").exists():
        raise DatasetError(f"missing calibration file in {root}")
    cameras, scene = read_cameras_file(root / "cameras.json")
    sched_doc = json.loads((root / "schedule.json").read_text())
    schedule = DesyncSchedule(sched_doc["frame_interval"],
                              np.array(sched_doc["offsets"]), sched_doc["mode"],
                              sched_doc["reference_view"])
    n_views, n_frames = manifest["n_views"], manifest["n_frames"]
    if len(cameras) != n_views:
        raise DatasetError("camera count does not match manifest view count")
    if schedule.offsets.shape != (n_views, n_frames):
        raise DatasetError("schedule shape does not match manifest")
    h, w = manifest["image_height"], manifest["image_width"]
    rows, cols = scene.grid_size

    frames = np.zeros((n_views, n_frames, h, w), dtype=np.float32)
    sync_frames = np.zeros_like(frames) if manifest["has_sync"] else None
    for i in range(n_views):
        for k in range(n_frames):
            frames[i, k] = _read_f32(root / f"view_{i}" / f"frame_{k}.f32", (h, w))
            if sync_frames is not None:
                sync_frames[i, k] = _read_f32(root / f"view_{i}" / f"sync_{k}.f32", (h, w))
    gt_files = sorted((root / "gt").glob("density_*.f32"))
    if len(gt_files) != n_frames:
        raise DatasetError(
            f"ground-truth frame count {len(gt_files)} does not match "
            f"reference frame count {n_frames}")
    gt = np.zeros((n_frames, rows, cols), dtype=np.float32)
    for k in range(n_frames):
        gt[k] = _read_f32(root / "gt" / f"density_{k}.f32", (rows, cols))
    counts = np.array(json.loads((root / "gt" / "counts.json").read_text()))
    if counts.shape != (n_frames,):
        raise DatasetError("counts length does not match frame count")
    return Dataset(cameras, scene, schedule, frames, gt, counts, sync_frames,
                   manifest.get("meta", {}))
