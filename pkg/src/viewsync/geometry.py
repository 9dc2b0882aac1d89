"""Calibrated cameras, ground-plane projection grids, and epipolar weight masks.

Conventions:
  - World frame: right-handed, z up, ground plane at z = 0, units in meters.
  - Camera frame: standard computer vision (x right, y down, z forward).
    A world point X maps to the camera as  x_cam = R @ X + t,  pixel = K @ x_cam / depth.
  - Feature-grid coordinates are image pixel coordinates multiplied by
    ``feature_scale`` (the ratio of feature-map resolution to image resolution).
"""

from dataclasses import dataclass, field

import numpy as np
import torch


class GeometryError(ValueError):
    """Invalid camera configuration or degenerate geometry."""


@dataclass(frozen=True)
class CameraModel:
    """A calibrated pinhole camera (no distortion)."""

    intrinsics: np.ndarray    # 3x3, pixels
    rotation: np.ndarray      # 3x3 world-to-camera
    translation: np.ndarray   # 3-vector, meters
    image_size: tuple         # (width, height) in pixels
    view_id: int = 0

    def __post_init__(self):
        K = np.asarray(self.intrinsics, dtype=np.float64)
        R = np.asarray(self.rotation, dtype=np.float64)
        t = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if K.shape != (3, 3) or R.shape != (3, 3):
            raise GeometryError("intrinsics and rotation must be 3x3")
        if not np.allclose(R.T @ R, np.eye(3), atol=1e-8):
            raise GeometryError("rotation is not orthonormal")
        if K[0, 0] <= 0 or K[1, 1] <= 0:
            raise GeometryError("intrinsics must have positive focal entries")
        if not np.allclose(K[2], [0.0, 0.0, 1.0], atol=1e-12):
            raise GeometryError("intrinsics bottom row must be [0, 0, 1]")
        if not np.all(np.isfinite(-R.T @ t)):
            raise GeometryError("camera center is not finite")
        object.__setattr__(self, "intrinsics", K)
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)
        object.__setattr__(self, "image_size", (int(self.image_size[0]), int(self.image_size[1])))

    @property
    def center(self) -> np.ndarray:
        """Camera center in world coordinates."""
        return -self.rotation.T @ self.translation

    def project(self, points: np.ndarray) -> tuple:
        """Project world points (N, 3) to pixel coordinates.

        Returns (uv, depth): uv is (N, 2); depth is the camera-frame z of each
        point (non-positive depth means behind the camera).
        """
        pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
        cam = pts @ self.rotation.T + self.translation
        depth = cam[:, 2]
        with np.errstate(divide="ignore", invalid="ignore"):
            proj = cam @ self.intrinsics.T
            uv = proj[:, :2] / depth[:, None]
        return uv, depth


def look_at_camera(position, target, intrinsics, image_size, view_id=0, up=(0.0, 0.0, 1.0)) -> CameraModel:
    """Build a CameraModel whose optical axis points from ``position`` to ``target``."""
    position = np.asarray(position, dtype=np.float64)
    forward = np.asarray(target, dtype=np.float64) - position
    norm = np.linalg.norm(forward)
    if norm < 1e-12:
        raise GeometryError("camera position coincides with target")
    forward = forward / norm
    right = np.cross(forward, np.asarray(up, dtype=np.float64))
    if np.linalg.norm(right) < 1e-9:
        right = np.cross(forward, [0.0, 1.0, 0.0])
    right = right / np.linalg.norm(right)
    down = np.cross(forward, right)
    R = np.stack([right, down, forward])   # rows: camera x, y, z in world coords
    t = -R @ position
    return CameraModel(np.asarray(intrinsics, dtype=np.float64), R, t, tuple(image_size), view_id)


@dataclass(frozen=True)
class ScenePlaneGrid:
    """The ground-plane grid at the assumed average person height."""

    origin: tuple            # (x, y) world meters of the grid corner
    cell_size: float         # meters per cell
    grid_size: tuple         # (rows, cols)
    height: float            # meters, the plane all features are assumed to lie on

    def __post_init__(self):
        if self.cell_size <= 0:
            raise GeometryError("cell_size must be positive")
        rows, cols = self.grid_size
        if rows < 1 or cols < 1:
            raise GeometryError("grid_size entries must be >= 1")
        object.__setattr__(self, "origin", (float(self.origin[0]), float(self.origin[1])))
        object.__setattr__(self, "grid_size", (int(rows), int(cols)))

    def cell_centers(self) -> np.ndarray:
        """World coordinates (rows, cols, 3) of every cell center on the plane."""
        rows, cols = self.grid_size
        xs = self.origin[0] + (np.arange(cols) + 0.5) * self.cell_size
        ys = self.origin[1] + (np.arange(rows) + 0.5) * self.cell_size
        gx, gy = np.meshgrid(xs, ys)
        return np.stack([gx, gy, np.full_like(gx, self.height)], axis=-1)

    def world_to_grid(self, xy: np.ndarray) -> np.ndarray:
        """Continuous (row, col) grid coordinates of world (x, y) points."""
        xy = np.atleast_2d(np.asarray(xy, dtype=np.float64))
        col = (xy[:, 0] - self.origin[0]) / self.cell_size - 0.5
        row = (xy[:, 1] - self.origin[1]) / self.cell_size - 0.5
        return np.stack([row, col], axis=-1)


@dataclass
class ProjectionGrid:
    """Precomputed camera-to-scene sampling map for one camera and feature scale."""

    sample_coords: np.ndarray   # (rows, cols, 2) feature-map (x, y) per scene cell
    validity_mask: np.ndarray   # (rows, cols) bool
    src_size: tuple             # (height, width) of the source feature map
    feature_scale: float = 1.0
    view_id: int = 0


def build_projection_grid(camera: CameraModel, scene: ScenePlaneGrid, feature_scale: float = 1.0) -> ProjectionGrid:
    """Project every scene cell through the camera into feature-map coordinates.

    Cells behind the camera or falling outside the feature map are invalid and
    will sample to zero rather than clamp to the image border.
    """
    if not 0.0 < feature_scale <= 1.0:
        raise GeometryError("feature_scale must be in (0, 1]")
    width, height = camera.image_size
    fw = int(round(width * feature_scale))
    fh = int(round(height * feature_scale))

    rows, cols = scene.grid_size
    centers = scene.cell_centers().reshape(-1, 3)
    uv, depth = camera.project(centers)
    coords = uv * feature_scale
    valid = (depth > 1e-9) \
        & (coords[:, 0] >= 0) & (coords[:, 0] <= fw - 1) \
        & (coords[:, 1] >= 0) & (coords[:, 1] <= fh - 1)
    if not valid.any():
        raise GeometryError("camera does not observe scene plane")
    coords = np.where(valid[:, None], coords, 0.0)
    return ProjectionGrid(
        sample_coords=coords.reshape(rows, cols, 2),
        validity_mask=valid.reshape(rows, cols),
        src_size=(fh, fw),
        feature_scale=feature_scale,
        view_id=camera.view_id,
    )


def bilinear_sample(image: torch.Tensor, x: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
    """Sample a (C, H, W) tensor at fractional pixel coordinates with zero padding.

    Differentiable in both the image values and the sample coordinates.
    Samples beyond the border interpolate against implicit zeros.
    """
    C, H, W = image.shape
    x0 = torch.floor(x)
    y0 = torch.floor(y)
    fx = x - x0
    fy = y - y0
    out = image.new_zeros((C,) + x.shape)
    for dy in (0, 1):
        for dx in (0, 1):
            xi = x0 + dx
            yi = y0 + dy
            inside = (xi >= 0) & (xi <= W - 1) & (yi >= 0) & (yi <= H - 1)
            xc = xi.clamp(0, W - 1).long().reshape(-1)
            yc = yi.clamp(0, H - 1).long().reshape(-1)
            corner = image[:, yc, xc].reshape((C,) + x.shape)
            wx = fx if dx else 1.0 - fx
            wy = fy if dy else 1.0 - fy
            out = out + corner * (wx * wy * inside)
    return out


def project_features(features: torch.Tensor, grid: ProjectionGrid) -> torch.Tensor:
    """Sample camera-plane features (C, H, W) onto the scene grid (C, rows, cols).

    Invalid cells are zero.  Linear (hence differentiable) in the feature values.
    """
    if features.dim() != 3:
        raise GeometryError("features must be (C, H, W)")
    if tuple(features.shape[1:]) != tuple(grid.src_size):
        raise GeometryError(
            f"feature map size {tuple(features.shape[1:])} does not match "
            f"projection grid source size {tuple(grid.src_size)}")
    coords = torch.as_tensor(grid.sample_coords, dtype=features.dtype, device=features.device)
    mask = torch.as_tensor(grid.validity_mask, dtype=features.dtype, device=features.device)
    sampled = bilinear_sample(features, coords[..., 0], coords[..., 1])
    return sampled * mask


@dataclass(frozen=True)
class FundamentalMatrix:
    """Rank-2 fundamental matrix mapping reference-view points to epipolar lines."""

    matrix: np.ndarray
    view_pair: tuple = (0, 1)

    def __post_init__(self):
        F = np.asarray(self.matrix, dtype=np.float64)
        if F.shape != (3, 3):
            raise GeometryError("fundamental matrix must be 3x3")
        s = np.linalg.svd(F, compute_uv=False)
        if s[2] / s[0] >= 1e-6:
            raise GeometryError("fundamental matrix is not rank 2")
        object.__setattr__(self, "matrix", F)

    def epipolar_line(self, xy) -> np.ndarray:
        """Line coefficients (a, b, c) in the other view for reference pixel(s) (x, y)."""
        pts = np.atleast_2d(np.asarray(xy, dtype=np.float64))
        hom = np.hstack([pts, np.ones((len(pts), 1))])
        lines = hom @ self.matrix.T
        return lines[0] if np.asarray(xy).ndim == 1 else lines


def fundamental_from_cameras(ref: CameraModel, other: CameraModel) -> FundamentalMatrix:
    """F such that x_other^T F x_ref = 0, normalized to unit Frobenius norm."""
    if np.linalg.norm(ref.center - other.center) < 1e-9:
        raise GeometryError("degenerate epipolar geometry: coincident camera centers")
    R_rel = other.rotation @ ref.rotation.T
    t_rel = other.translation - R_rel @ ref.translation
    tx = np.array([
        [0.0, -t_rel[2], t_rel[1]],
        [t_rel[2], 0.0, -t_rel[0]],
        [-t_rel[1], t_rel[0], 0.0],
    ])
    F = np.linalg.inv(other.intrinsics).T @ tx @ R_rel @ np.linalg.inv(ref.intrinsics)
    F = F / np.linalg.norm(F)
    return FundamentalMatrix(F, (ref.view_id, other.view_id))


@dataclass
class EpipolarMask:
    """Dense (H*W, H'*W') weights, peaked on each source pixel's epipolar line.

    Weight falls off as a Gaussian of the perpendicular distance to the line
    (in destination feature pixels) with standard deviation ``sigma``; each
    source row is normalized so its peak equals 1.
    """

    weights: np.ndarray
    sigma: float
    src_size: tuple = (0, 0)    # (H, W)
    dst_size: tuple = (0, 0)    # (H', W')


def build_epipolar_mask(F: FundamentalMatrix, src_size, dst_size, sigma: float,
                        feature_scale: float = 1.0, dst_scale: float = None) -> EpipolarMask:
    """Epipolar-guided weight mask between two feature grids.

    ``src_size`` / ``dst_size`` are (H, W) in feature-grid pixels; coordinates
    are rescaled to image pixels by 1/feature_scale before applying F, and the
    point-to-line distance is converted back to feature pixels.  ``dst_scale``
    lets the destination grid use a different feature scale (e.g. correlation
    computed at a coarser working resolution).
    """
    if sigma <= 0:
        raise GeometryError("sigma must be positive")
    dst_scale = feature_scale if dst_scale is None else dst_scale
    H, W = int(src_size[0]), int(src_size[1])
    H2, W2 = int(dst_size[0]), int(dst_size[1])
    if min(H, W, H2, W2) < 1:
        raise GeometryError("feature grid sizes must be >= 1")

    sy, sx = np.meshgrid(np.arange(H), np.arange(W), indexing="ij")
    src = np.stack([sx.ravel() / feature_scale, sy.ravel() / feature_scale,
                    np.ones(H * W)], axis=-1)                       # (HW, 3) image px
    dy, dx = np.meshgrid(np.arange(H2), np.arange(W2), indexing="ij")
    dst = np.stack([dx.ravel() / dst_scale, dy.ravel() / dst_scale,
                    np.ones(H2 * W2)], axis=-1)                     # (H'W', 3) image px

    lines = src @ F.matrix.T                                        # (HW, 3)
    norm = np.linalg.norm(lines[:, :2], axis=1, keepdims=True)
    norm = np.maximum(norm, 1e-15)
    dist_img = np.abs(lines @ dst.T) / norm                         # (HW, H'W') image px
    dist = dist_img * dst_scale                                     # dst feature px
    weights = np.exp(-0.5 * (dist / sigma) ** 2)
    weights = weights / np.maximum(weights.max(axis=1, keepdims=True), 1e-300)
    return EpipolarMask(weights, float(sigma), (H, W), (H2, W2))
