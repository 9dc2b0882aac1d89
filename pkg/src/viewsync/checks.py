"""Independent numeric oracles: finite-difference gradient checks and the
self-test suite exercised by the CLI.
"""

import numpy as np
import torch

from . import geometry, losses, nets, simulate, sync


def finite_difference_grad(fn, x: torch.Tensor, h: float = 1e-5) -> torch.Tensor:
    """Central-difference gradient of a scalar function at x (element by element)."""
    x = x.detach().clone()
    grad = torch.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    with torch.no_grad():
        for idx in range(flat.numel()):
            orig = flat[idx].item()
            flat[idx] = orig + h
            hi = float(fn(x))
            flat[idx] = orig - h
            lo = float(fn(x))
            flat[idx] = orig
            gflat[idx] = (hi - lo) / (2 * h)
    return grad


def gradient_check(fn, x: torch.Tensor, h: float = 1e-5) -> float:
    """Relative error between autograd and central differences for scalar fn(x)."""
    xg = x.detach().double().requires_grad_(True)
    fn(xg).backward()
    analytic = xg.grad.detach()
    numeric = finite_difference_grad(fn, x.detach().double(), h)
    denom = max(analytic.norm().item(), numeric.norm().item(), 1e-12)
    return (analytic - numeric).norm().item() / denom


def _two_cameras():
    K = np.array([[60.0, 0.0, 31.5], [0.0, 60.0, 23.5], [0.0, 0.0, 1.0]])
    cam0 = geometry.look_at_camera((0.0, -8.0, 5.0), (5.0, 5.0, 1.0), K, (64, 48), 0)
    cam1 = geometry.look_at_camera((10.0, -7.0, 6.0), (5.0, 5.0, 1.0), K, (64, 48), 1)
    return cam0, cam1


def check_projection_grid(n_cells: int = 20, seed: int = 0):
    """Projection grid vs. an explicit per-cell K[R|t] projection oracle."""
    cam0, _ = _two_cameras()
    scene = geometry.ScenePlaneGrid((0.0, 0.0), 0.25, (48, 56), 1.75)
    grid = geometry.build_projection_grid(cam0, scene, feature_scale=0.25)
    centers = scene.cell_centers()
    rng = np.random.default_rng(seed)
    rows, cols = scene.grid_size
    worst = 0.0
    for _ in range(n_cells):
        r, c = rng.integers(rows), rng.integers(cols)
        if not grid.validity_mask[r, c]:
            continue
        X = centers[r, c]
        cam_pt = cam0.rotation @ X + cam0.translation
        uv = (cam0.intrinsics @ cam_pt)[:2] / cam_pt[2]
        worst = max(worst, float(np.abs(uv * 0.25 - grid.sample_coords[r, c]).max()))
    return worst < 1e-6, f"max deviation {worst:.2e} px"


def check_fundamental(n_points: int = 1000, seed: int = 0):
    """|x'^T F x| residual over random 3D points seen by both cameras."""
    cam0, cam1 = _two_cameras()
    F = geometry.fundamental_from_cameras(cam0, cam1)
    rng = np.random.default_rng(seed)
    pts = rng.uniform([0, 0, 0], [14, 12, 2], size=(n_points, 3))
    uv0, _ = cam0.project(pts)
    uv1, _ = cam1.project(pts)
    hom0 = np.hstack([uv0, np.ones((n_points, 1))])
    hom1 = np.hstack([uv1, np.ones((n_points, 1))])
    residuals = np.abs(np.sum(hom1 * (hom0 @ F.matrix.T), axis=1))
    worst = float(residuals.max())
    return worst < 1e-6, f"max residual {worst:.2e}"


def check_correlation(seed: int = 0):
    """Correlation volume vs. a brute-force double loop on small maps."""
    g = torch.Generator().manual_seed(seed)
    a = torch.randn(4, 6, 8, generator=g)
    b = torch.randn(4, 5, 7, generator=g)
    vol = sync.match_correlation(a, b, normalized=False)
    worst = 0.0
    for y in range(6):
        for x in range(8):
            for y2 in range(5):
                for x2 in range(7):
                    expect = float(a[:, y, x] @ b[:, y2, x2])
                    got = float(vol.scores[y * 8 + x, y2 * 7 + x2])
                    worst = max(worst, abs(expect - got))
    return worst < 1e-6, f"max deviation {worst:.2e}"


def check_warp():
    """Identity, integer-shift, and half-pixel warp cases, exact."""
    row = torch.tensor([[[1.0, 2.0, 3.0]]])
    zero = sync.warp(row, torch.zeros(2, 1, 3))
    shift = sync.warp(row, torch.tensor([1.0, 0.0]).view(2, 1, 1).expand(2, 1, 3).clone())
    half = sync.warp(torch.tensor([[[0.0, 1.0, 0.0]]]),
                     torch.tensor([0.5, 0.0]).view(2, 1, 1).expand(2, 1, 3).clone())
    ok = (torch.equal(zero, row)
          and torch.allclose(shift, torch.tensor([[[2.0, 3.0, 0.0]]]))
          and torch.allclose(half, torch.tensor([[[0.5, 0.5, 0.0]]])))
    return ok, "identity / integer shift / half pixel"


def check_epipolar_mask():
    """4-sigma suppression and unit peak per source location."""
    cam0, cam1 = _two_cameras()
    F = geometry.fundamental_from_cameras(cam0, cam1)
    mask = geometry.build_epipolar_mask(F, (12, 16), (12, 16), sigma=1.0,
                                        feature_scale=0.25)
    peaks_ok = np.allclose(mask.weights.max(axis=1), 1.0)
    in_range = mask.weights.min() >= 0 and mask.weights.max() <= 1.0
    return peaks_ok and in_range, f"peak range [{mask.weights.max(axis=1).min():.3f}, 1]"


def check_gradients(seed: int = 0):
    """Finite-difference gradient checks for nets, warp, and losses."""
    torch.manual_seed(seed)
    results = {}

    net = nets.MotionEstimator(2, width=0.1).double()
    with torch.no_grad():
        net.stack.convs[-1].weight.normal_(0, 0.1)
    x = torch.randn(2, 6, 6, dtype=torch.float64)
    results["motion_net"] = gradient_check(lambda v: net(v).mean(), x)

    feats = torch.randn(2, 6, 6, dtype=torch.float64)
    target = torch.randn(2, 6, 6, dtype=torch.float64)
    flow0 = torch.rand(2, 6, 6, dtype=torch.float64) * 0.6 + 0.2   # off-integer
    results["warp_wrt_features"] = gradient_check(
        lambda v: ((sync.warp(v, flow0) - target) ** 2).mean(), feats)
    results["warp_wrt_flow"] = gradient_check(
        lambda v: ((sync.warp(feats, v) - target) ** 2).mean(), flow0)

    dec = nets.Decoder(2, width=0.1).double()
    results["decoder"] = gradient_check(lambda v: dec(v).mean(), x)

    gt = torch.rand(6, 6, dtype=torch.float64)
    pred = torch.rand(6, 6, dtype=torch.float64)
    results["task_loss"] = gradient_check(lambda v: losses.task_loss(v, gt), pred)
    results["warping_loss"] = gradient_check(
        lambda v: losses.warping_loss(target, v), feats)
    results["similarity_loss"] = gradient_check(
        lambda v: losses.similarity_loss(target, v), feats + 3.0)

    worst = max(results.values())
    ok = worst < 1e-4
    detail = ", ".join(f"{k}={v:.1e}" for k, v in results.items())
    return ok, detail


def check_multiscale_telescoping():
    """With zero residuals the finest flow equals the upsample chain of w(1)."""
    torch.manual_seed(0)

    class Fixed(torch.nn.Module):
        def __init__(self, out):
            super().__init__()
            self.out = out

        def forward(self, x):
            return self.out

    base = torch.randn(2, 4, 4)
    nets_ = [Fixed(base), Fixed(torch.zeros(2, 8, 8)), Fixed(torch.zeros(2, 16, 16))]
    flows = sync.multiscale_flow([None, None, None], nets_)
    expect = nets.upsample_flow(nets.upsample_flow(base, 2), 2)
    ok = torch.allclose(flows[-1], expect, atol=0, rtol=0)
    return ok, "m=3 telescoping identity"


def check_desync_schedule():
    """Constant tau = 5 s at 7 fps equals a 35-frame offset."""
    sched = simulate.make_desync_schedule("constant", [5.0, -5.0], 3, 10, 1 / 7)
    frames_off = sched.offsets[1, 0] / sched.frame_interval
    ok = abs(frames_off - 35.0) < 1e-9 and np.all(sched.offsets[0] == 0)
    return ok, f"offset = {frames_off:.1f} frames"


SELFTEST_CHECKS = [
    ("projection-grid oracle", check_projection_grid),
    ("fundamental-matrix residual", check_fundamental),
    ("correlation brute force", check_correlation),
    ("warp trivial cases", check_warp),
    ("epipolar mask peaks/range", check_epipolar_mask),
    ("gradient checks", check_gradients),
    ("multiscale telescoping", check_multiscale_telescoping),
    ("desync schedule arithmetic", check_desync_schedule),
]


def run_selftest(report=print):
    """Run every oracle check; returns True iff all pass."""
    all_ok = True
    for name, fn in SELFTEST_CHECKS:
        try:
            ok, detail = fn()
        except Exception as exc:   # a crashed check is a failed check
            ok, detail = False, f"raised {type(exc).__name__}: {exc}"
        all_ok &= ok
        report(f"{'PASS' if ok else 'FAIL'}  {name:32s} {detail}")
    return all_ok
