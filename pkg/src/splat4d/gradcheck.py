"""Finite-difference verification of every hand-written gradient.

The render suite builds a small scene with the neural decay policy active,
takes a fixed random weighting of the output image as a scalar loss, and
compares render_backward against central differences for every parameter
class: positions, temporal centers, both quaternions, log scales, opacity
logits, SH coefficients, and the full decay-network parameter vector.

Thresholds below zero are what make the renderer piecewise smooth here: the
checking config turns off the alpha skip and the transmittance termination so
no parameter sits on a decision boundary.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .camera import Camera, fov_to_focal, look_at
from .core4d import FIELD_ORDER, GaussianCloud, _logit
from .decaynet import DecayNet, build_decay_inputs
from .appearance import ShConfig
from .metrics import dssim_with_grad
from .raster import RasterConfig, render_backward, render_forward
from .trainer import photometric_loss

CHECK_AABB = np.array([[-1.5, -1.5, -1.5], [1.5, 1.5, 1.5]])


@dataclass
class GradCheckResult:
    name: str
    n_params: int
    max_abs_err: float
    max_rel_err: float
    ok: bool

    def line(self) -> str:
        status = "ok" if self.ok else "FAIL"
        return (f"{self.name:<18} {self.n_params:>6} params  "
                f"max_rel={self.max_rel_err:.3e}  max_abs={self.max_abs_err:.3e}  "
                f"[{status}]")


def _compare(analytic: np.ndarray, fd: np.ndarray, tol: float, floor: float):
    analytic = np.asarray(analytic, dtype=np.float64).ravel()
    fd = np.asarray(fd, dtype=np.float64).ravel()
    diff = np.abs(analytic - fd)
    mag = np.maximum(np.abs(analytic), np.abs(fd))
    ok = bool(np.all(diff <= np.maximum(floor, tol * mag)))
    rel = diff / np.maximum(mag, floor)
    return float(diff.max(initial=0.0)), float(rel.max(initial=0.0)), ok


def _clear_relu_margin(net: DecayNet, x: np.ndarray, margin: float = 1e-3):
    """Shift hidden biases until no ReLU pre-activation sits within ``margin``
    of its kink for these exact inputs. Central differences are only valid
    away from the kink, so the check point must keep clear of it."""
    for zname, bname in (("z1", "b1"), ("z2", "b2")):
        _, cache = net.forward(x)
        z = cache[zname]
        bias = getattr(net, bname)
        for j in np.nonzero(np.any(np.abs(z) < margin, axis=0))[0]:
            col = z[:, j]
            for k in (1, 2, 4, 8):
                for delta in (2.0 * k * margin, -2.0 * k * margin):
                    if np.all(np.abs(col + delta) >= margin):
                        bias[j] += delta
                        break
                else:
                    continue
                break
            else:
                raise AssertionError("could not move a pre-activation off its kink")


def check_scene(seed: int = 0, n_gaussians: int = 3, size: int = 16):
    """Deterministic scene with every gradient path live: off-center time,
    space-time coupling, non-unit raw quaternions, view-dependent color."""
    rng = np.random.default_rng(seed)
    sh = ShConfig(max_degree=1, n_fourier=1, period=1.0)
    positions = rng.uniform(-0.4, 0.4, size=(n_gaussians, 3))
    # Spread depths along the viewing axis so the sort order has slack.
    positions[:, 1] = np.linspace(-0.3, 0.3, n_gaussians)
    quats = rng.normal(size=(n_gaussians, 2, 4))
    quats *= 1.0 + rng.uniform(-0.05, 0.05, size=(n_gaussians, 2, 1))
    log_scales = np.concatenate(
        [
            np.log(rng.uniform(0.15, 0.3, size=(n_gaussians, 3))),
            np.log(rng.uniform(0.3, 0.6, size=(n_gaussians, 1))),
        ],
        axis=1,
    )
    coeffs = np.zeros((n_gaussians,) + sh.coeff_shape())
    coeffs[:, :, 0, 0] = rng.uniform(-0.35, 0.35, size=(n_gaussians, 3))
    coeffs[:, :, 0, 1:4] = rng.uniform(-0.1, 0.1, size=(n_gaussians, 3, 3))
    coeffs[:, :, 1, :] = rng.uniform(-0.1, 0.1, size=(n_gaussians, 3, sh.n_sh))
    cloud = GaussianCloud(
        positions=positions,
        temporal_centers=rng.uniform(0.15, 0.5, size=n_gaussians),
        rot_left=quats[:, 0],
        rot_right=quats[:, 1],
        log_scales=log_scales,
        opacity_logits=np.full(n_gaussians, float(_logit(0.55)))
        + rng.uniform(-0.3, 0.3, size=n_gaussians),
        sh_coeffs=coeffs,
        sh_config=sh,
    )
    f = fov_to_focal(70.0, size)
    camera = look_at(
        position=(0.1, -2.4, 0.5), target=(0.0, 0.0, 0.0), up=(0.0, 0.0, 1.0),
        fx=f, fy=f, cx=size / 2.0, cy=size / 2.0, width=size, height=size,
        near=0.05, far=50.0,
    )
    t = 0.3
    background = rng.uniform(0.2, 0.8, size=3)
    weights = rng.uniform(-1.0, 1.0, size=(size, size, 3))
    net = DecayNet(rng)
    _clear_relu_margin(
        net,
        build_decay_inputs(cloud.positions, cloud.opacities, cloud.rot_left,
                           cloud.rot_right, CHECK_AABB),
    )
    config = RasterConfig(skip_threshold=0.0, term_threshold=0.0,
                          eps_t=0.0, view_margin=100.0, tile_size=8)
    return cloud, camera, t, background, weights, net, config


def render_suite(seed: int = 0, step: float = 1e-5, tol: float = 1e-3,
                 floor: float = 1e-8, n_gaussians: int = 3, size: int = 16):
    """FD-vs-analytic over every renderer parameter class. Returns a list of
    GradCheckResult, one per class."""
    cloud, camera, t, background, weights, net, config = check_scene(
        seed, n_gaussians, size
    )

    def loss() -> float:
        out, _ = render_forward(cloud, camera, t, background, config=config,
                                policy="neural", net=net, aabb=CHECK_AABB)
        return float(np.sum(weights * out.image))

    out, cache = render_forward(cloud, camera, t, background, config=config,
                                policy="neural", net=net, aabb=CHECK_AABB)
    if out.visible.size != len(cloud):
        raise AssertionError("check scene must keep every Gaussian visible")
    grads = render_backward(cache, weights)

    results = []
    for name in FIELD_ORDER:
        arr = getattr(cloud, name)
        fd = np.zeros_like(arr)
        flat = arr.reshape(-1)
        fd_flat = fd.reshape(-1)
        for k in range(flat.size):
            keep = flat[k]
            flat[k] = keep + step
            up = loss()
            flat[k] = keep - step
            down = loss()
            flat[k] = keep
            fd_flat[k] = (up - down) / (2.0 * step)
        abs_err, rel_err, ok = _compare(getattr(grads, name), fd, tol, floor)
        results.append(GradCheckResult(name, flat.size, abs_err, rel_err, ok))

    vec = net.to_vector()
    analytic_net = net.grads_to_vector(grads.net)
    fd_net = np.zeros_like(vec)
    for k in range(vec.size):
        keep = vec[k]
        vec[k] = keep + step
        net.from_vector(vec)
        up = loss()
        vec[k] = keep - step
        net.from_vector(vec)
        down = loss()
        vec[k] = keep
        fd_net[k] = (up - down) / (2.0 * step)
    net.from_vector(vec)
    abs_err, rel_err, ok = _compare(analytic_net, fd_net, tol, floor)
    results.append(GradCheckResult("decay_net", vec.size, abs_err, rel_err, ok))
    return results


def loss_suite(seed: int = 0, step: float = 1e-5, tol: float = 1e-3,
               floor: float = 1e-8, size: int = 32, n_probe: int = 200):
    """FD check of the photometric loss image gradient (L1 + DSSIM blend) on
    a random probe subset of pixels."""
    rng = np.random.default_rng(seed)
    render = rng.uniform(0.05, 0.95, size=(size, size, 3))
    # Keep |render - gt| well above the FD step so the L1 kink at zero is
    # never straddled.
    noise = rng.normal(scale=0.1, size=render.shape)
    gt = np.clip(render + np.sign(noise) * (0.02 + np.abs(noise)), 0.0, 1.0)
    lam = 0.2
    _, _, _, d_render = photometric_loss(render, gt, lam)
    flat = render.reshape(-1)
    probes = rng.choice(flat.size, size=min(n_probe, flat.size), replace=False)
    fd = np.zeros(len(probes))
    for j, k in enumerate(probes):
        keep = flat[k]
        flat[k] = keep + step
        up, _, _, _ = photometric_loss(render, gt, lam)
        flat[k] = keep - step
        down, _, _, _ = photometric_loss(render, gt, lam)
        flat[k] = keep
        fd[j] = (up - down) / (2.0 * step)
    abs_err, rel_err, ok = _compare(d_render.reshape(-1)[probes], fd, tol, floor)
    return [GradCheckResult("loss_image", len(probes), abs_err, rel_err, ok)]


def ssim_suite(seed: int = 0, step: float = 1e-5, tol: float = 1e-3,
               floor: float = 1e-8, size: int = 24, n_probe: int = 120):
    """FD check of the standalone DSSIM gradient at data range 1."""
    rng = np.random.default_rng(seed + 17)
    a = rng.uniform(0.1, 0.9, size=(size, size, 3))
    b = np.clip(a + rng.normal(scale=0.08, size=a.shape), 0.0, 1.0)
    _, grad = dssim_with_grad(a, b, data_range=1.0)
    flat = a.reshape(-1)
    probes = rng.choice(flat.size, size=min(n_probe, flat.size), replace=False)
    fd = np.zeros(len(probes))
    for j, k in enumerate(probes):
        keep = flat[k]
        flat[k] = keep + step
        up, _ = dssim_with_grad(a, b, data_range=1.0)
        flat[k] = keep - step
        down, _ = dssim_with_grad(a, b, data_range=1.0)
        flat[k] = keep
        fd[j] = (up - down) / (2.0 * step)
    abs_err, rel_err, ok = _compare(grad.reshape(-1)[probes], fd, tol, floor)
    return [GradCheckResult("dssim_image", len(probes), abs_err, rel_err, ok)]


def run_all(seed: int = 0, step: float = 1e-5, tol: float = 1e-3,
            floor: float = 1e-8):
    results = render_suite(seed=seed, step=step, tol=tol, floor=floor)
    results += loss_suite(seed=seed, step=step, tol=tol, floor=floor)
    results += ssim_suite(seed=seed, step=step, tol=tol, floor=floor)
    ok = all(r.ok for r in results)
    return results, ok
