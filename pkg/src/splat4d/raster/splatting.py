"""Differentiable tile-based splatting of time-sliced 4D Gaussians.

render_forward runs the full pipeline: visibility, temporal slicing, color
evaluation, decay selection, perspective projection with a first-order
Jacobian, a global depth sort, and tile-binned front-to-back compositing.
render_backward consumes the forward cache and propagates image gradients to
every Gaussian attribute and, for the neural policy, the decay network.

oracle_render is the brute-force cross-check: per pixel, every visible splat
is composited with the same alpha semantics but without tiles, extent
rectangles, or the compiled kernels, accumulating color at extended precision.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..appearance import eval_color_batch, eval_color_batch_backward
from ..camera import Camera
from ..core4d import (
    GaussianCloud,
    left_isoclinic,
    normalize_quaternion,
    right_isoclinic,
    slice_cov,
    slice_mean,
    temporal_weight,
)
from ..decaynet import (
    DecayNet,
    select_tau,
    split_decay_input_grads,
    variant_tau_grad,
)
from ..errors import InvalidParameterError
from ..visibility import visible_set
from . import kernels


@dataclass(frozen=True)
class RasterConfig:
    tile_size: int = 16
    extent_sigma: float = 3.0
    alpha_clamp: float = 0.99
    skip_threshold: float = 1.0 / 255.0
    term_threshold: float = 1e-4
    lowpass: float = 0.3
    eps_t: float = 0.05
    view_margin: float = 16.0

    def __post_init__(self):
        if self.tile_size <= 0:
            raise InvalidParameterError("tile_size must be positive")
        if not 0.0 < self.alpha_clamp <= 1.0:
            raise InvalidParameterError("alpha_clamp must be in (0, 1]")
        if self.lowpass < 0.0:
            raise InvalidParameterError("lowpass must be non-negative")


@dataclass
class RenderOutput:
    image: np.ndarray  # (H, W, 3)
    alpha: np.ndarray  # (H, W)
    depth: np.ndarray  # (H, W), alpha-weighted expected depth, 0 where empty
    contrib_counts: np.ndarray  # (N,) pixels composited per Gaussian
    visible: np.ndarray  # sorted visible indices


@dataclass
class GradientBundle:
    """Gradients per Gaussian attribute, full-cloud shapes, plus network
    parameter gradients when the neural policy ran."""

    positions: np.ndarray
    temporal_centers: np.ndarray
    rot_left: np.ndarray
    rot_right: np.ndarray
    log_scales: np.ndarray
    opacity_logits: np.ndarray
    sh_coeffs: np.ndarray
    net: dict | None = None

    @classmethod
    def zeros(cls, cloud: GaussianCloud) -> "GradientBundle":
        return cls(
            positions=np.zeros_like(cloud.positions),
            temporal_centers=np.zeros_like(cloud.temporal_centers),
            rot_left=np.zeros_like(cloud.rot_left),
            rot_right=np.zeros_like(cloud.rot_right),
            log_scales=np.zeros_like(cloud.log_scales),
            opacity_logits=np.zeros_like(cloud.opacity_logits),
            sh_coeffs=np.zeros_like(cloud.sh_coeffs),
        )


def position_hash(positions: np.ndarray) -> np.ndarray:
    """FNV-1a over the raw position bytes; used to break depth ties in a
    storage-order-independent way."""
    positions = np.ascontiguousarray(positions, dtype=np.float64)
    raw = positions.view(np.uint8).reshape(len(positions), 24)
    with np.errstate(over="ignore"):
        h = np.full(len(positions), 0xCBF29CE484222325, dtype=np.uint64)
        prime = np.uint64(0x100000001B3)
        for k in range(24):
            h = (h ^ raw[:, k].astype(np.uint64)) * prime
    return h


def depth_order(depths: np.ndarray, positions: np.ndarray) -> np.ndarray:
    """Front-to-back ordering: by depth, ties broken by position hash."""
    return np.lexsort((position_hash(positions), depths))


def project(camera: Camera, means3: np.ndarray, cov3: np.ndarray, lowpass: float):
    """Perspective projection of 3D Gaussians.

    Returns (means2, cov2, depths, cache). cov2 includes the low-pass term
    `lowpass * I` that keeps splats at least a fraction of a pixel wide.
    """
    rot = camera.rotation
    t_cam = means3 @ rot.T + camera.translation
    x, y, z = t_cam[:, 0], t_cam[:, 1], t_cam[:, 2]
    if np.any(z <= 0.0):
        raise InvalidParameterError("projection requires positive depth")
    inv_z = 1.0 / z
    means2 = np.stack([camera.fx * x * inv_z + camera.cx,
                       camera.fy * y * inv_z + camera.cy], axis=1)
    jac = np.zeros((len(means3), 2, 3))
    jac[:, 0, 0] = camera.fx * inv_z
    jac[:, 0, 2] = -camera.fx * x * inv_z * inv_z
    jac[:, 1, 1] = camera.fy * inv_z
    jac[:, 1, 2] = -camera.fy * y * inv_z * inv_z
    jw = jac @ rot
    cov2 = np.einsum("nab,nbc,ndc->nad", jw, cov3, jw)
    cov2[:, 0, 0] += lowpass
    cov2[:, 1, 1] += lowpass
    cache = {"t_cam": t_cam, "jac": jac, "jw": jw, "cov3": cov3, "camera": camera}
    return means2, cov2, z.copy(), cache


def project_backward(cache: dict, d_means2: np.ndarray, d_cov2: np.ndarray):
    """Gradients of project with respect to means3 and cov3.

    d_cov2 is the full (N, 2, 2) gradient; the Jacobian's dependence on the
    camera-space mean is included.
    """
    camera: Camera = cache["camera"]
    t_cam, jac, jw, cov3 = cache["t_cam"], cache["jac"], cache["jw"], cache["cov3"]
    x, y, z = t_cam[:, 0], t_cam[:, 1], t_cam[:, 2]
    inv_z = 1.0 / z
    d_cov3 = np.einsum("nab,nac,nbd->ncd", d_cov2, jw, jw)
    sym = d_cov2 + np.swapaxes(d_cov2, 1, 2)
    d_jw = np.einsum("nab,nbc,ncd->nad", sym, jw, cov3)
    d_jac = np.einsum("nad,cd->nac", d_jw, camera.rotation)
    # mean2 = pinhole(t_cam); its Jacobian is jac itself.
    d_t_cam = np.einsum("nab,na->nb", jac, d_means2)
    # Dependence of jac on t_cam.
    inv_z2 = inv_z * inv_z
    d_t_cam[:, 0] += d_jac[:, 0, 2] * (-camera.fx * inv_z2)
    d_t_cam[:, 1] += d_jac[:, 1, 2] * (-camera.fy * inv_z2)
    d_t_cam[:, 2] += (
        d_jac[:, 0, 0] * (-camera.fx * inv_z2)
        + d_jac[:, 1, 1] * (-camera.fy * inv_z2)
        + d_jac[:, 0, 2] * (2.0 * camera.fx * x * inv_z2 * inv_z)
        + d_jac[:, 1, 2] * (2.0 * camera.fy * y * inv_z2 * inv_z)
    )
    d_means3 = d_t_cam @ camera.rotation
    return d_means3, d_cov3


def _invert_cov2(cov2: np.ndarray):
    """Packed inverse (a, b, c) of symmetric 2x2 matrices [[a, b], [b, c]]."""
    a = cov2[:, 0, 0]
    b = cov2[:, 0, 1]
    c = cov2[:, 1, 1]
    det = a * c - b * b
    if np.any(det <= 0.0):
        raise InvalidParameterError("projected covariance is not positive definite")
    inv_det = 1.0 / det
    conic = np.stack([c * inv_det, -b * inv_det, a * inv_det], axis=1)
    lam_max = 0.5 * (a + c) + np.sqrt(np.maximum(0.25 * (a - c) ** 2 + b * b, 0.0))
    return conic, lam_max


def _extent_rects(means2, lam_max, alpha_base, config: RasterConfig, width, height):
    """Integer pixel rectangles guaranteed to contain every pixel whose alpha
    can reach the skip threshold. Rows with nothing to draw come back empty
    (x0 > x1)."""
    m = len(means2)
    rects = np.zeros((m, 4), dtype=np.int32)
    sigma = np.sqrt(lam_max)
    if config.skip_threshold <= 0.0:
        rects[:, 0] = 0
        rects[:, 1] = 0
        rects[:, 2] = width - 1
        rects[:, 3] = height - 1
        return rects
    drawable = alpha_base >= config.skip_threshold
    with np.errstate(divide="ignore", invalid="ignore"):
        support = np.sqrt(2.0 * np.log(alpha_base / config.skip_threshold))
    support = np.where(drawable, support, 0.0)
    radius = sigma * np.maximum(config.extent_sigma, support)
    x0 = np.floor(means2[:, 0] - radius - 0.5)
    x1 = np.ceil(means2[:, 0] + radius - 0.5)
    y0 = np.floor(means2[:, 1] - radius - 0.5)
    y1 = np.ceil(means2[:, 1] + radius - 0.5)
    rects[:, 0] = np.clip(x0, 0, width - 1)
    rects[:, 1] = np.clip(y0, 0, height - 1)
    rects[:, 2] = np.clip(x1, 0, width - 1)
    rects[:, 3] = np.clip(y1, 0, height - 1)
    offscreen = (x1 < 0) | (x0 > width - 1) | (y1 < 0) | (y0 > height - 1)
    dead = offscreen | ~drawable
    rects[dead, 0] = 1
    rects[dead, 2] = 0
    return rects


def _empty_output(cloud, camera, background):
    h, w = camera.height, camera.width
    image = np.tile(np.asarray(background, dtype=np.float64), (h, w, 1))
    return RenderOutput(
        image=image,
        alpha=np.zeros((h, w)),
        depth=np.zeros((h, w)),
        contrib_counts=np.zeros(len(cloud), dtype=np.int64),
        visible=np.zeros(0, dtype=np.int64),
    )


def _prepare_splats(cloud: GaussianCloud, camera: Camera, t: float,
                    background, config: RasterConfig, policy: str,
                    net: DecayNet | None, aabb):
    """Shared front half of both renderers: everything up to per-splat
    quantities in depth-sorted order."""
    background = np.ascontiguousarray(background, dtype=np.float64)
    if background.shape != (3,):
        raise InvalidParameterError("background must be a 3-vector")
    cov4 = cloud.cov4()
    vis = visible_set(cloud, camera, t, eps_t=config.eps_t,
                      margin=config.view_margin, cov4=cov4)
    if vis.size == 0:
        return None
    cov4_v = cov4[vis]
    means3 = slice_mean(cov4_v, cloud.positions[vis], cloud.temporal_centers[vis], t)
    cov3 = slice_cov(cov4_v)
    omega = temporal_weight(cov4_v, cloud.temporal_centers[vis], t)
    mask = np.zeros(len(cloud), dtype=bool)
    mask[vis] = True
    tau_all, tau_cache = select_tau(cloud, mask, policy, net, aabb, beta=1.0)
    tau = tau_all[vis]
    view = means3 - camera.center
    view_norm = np.linalg.norm(view, axis=1)
    units = view / view_norm[:, None]
    colors, color_cache = eval_color_batch(cloud.sh_coeffs[vis], t, units,
                                           cloud.sh_config)
    opac = cloud.opacities[vis]
    alpha_base = tau * omega * opac
    means2, cov2, depths, proj_cache = project(camera, means3, cov3, config.lowpass)
    conic, lam_max = _invert_cov2(cov2)
    order = depth_order(depths, cloud.positions[vis])
    return {
        "background": background,
        "vis": vis,
        "cov4_v": cov4_v,
        "means3": means3,
        "cov3": cov3,
        "omega": omega,
        "tau": tau,
        "tau_cache": tau_cache,
        "view": view,
        "view_norm": view_norm,
        "units": units,
        "colors": colors,
        "color_cache": color_cache,
        "opac": opac,
        "alpha_base": alpha_base,
        "means2": means2,
        "cov2": cov2,
        "depths": depths,
        "proj_cache": proj_cache,
        "conic": conic,
        "lam_max": lam_max,
        "order": order,
        "policy": policy,
        "net": net,
        "aabb": aabb,
        "t": t,
        "camera": camera,
        "config": config,
    }


def render_forward(cloud: GaussianCloud, camera: Camera, t: float, background,
                   config: RasterConfig | None = None, policy: str = "none",
                   net: DecayNet | None = None, aabb=None):
    """Render the cloud at time t. Returns (RenderOutput, cache).

    The cache feeds render_backward; passing it anywhere else is unsupported.
    """
    if config is None:
        config = RasterConfig()
    prep = _prepare_splats(cloud, camera, t, background, config, policy, net, aabb)
    if prep is None:
        return _empty_output(cloud, camera, np.asarray(background, np.float64)), None
    order = prep["order"]
    means2_s = np.ascontiguousarray(prep["means2"][order])
    conic_s = np.ascontiguousarray(prep["conic"][order])
    ab_s = np.ascontiguousarray(prep["alpha_base"][order])
    colors_s = np.ascontiguousarray(prep["colors"][order])
    depths_s = np.ascontiguousarray(prep["depths"][order])
    rects = _extent_rects(means2_s, prep["lam_max"][order], ab_s, config,
                          camera.width, camera.height)
    img, final_t, depth_acc, last_pos, counts_s = kernels.composite_forward(
        means2_s, conic_s, ab_s, colors_s, depths_s, rects,
        camera.width, camera.height, config.alpha_clamp,
        config.skip_threshold, config.term_threshold, config.tile_size,
    )
    background = prep["background"]
    image = img + final_t[:, :, None] * background[None, None, :]
    acc = 1.0 - final_t
    depth = np.where(acc > 0.0, depth_acc / np.maximum(acc, 1e-300), 0.0)
    contrib = np.zeros(len(cloud), dtype=np.int64)
    contrib[prep["vis"][order]] = counts_s
    out = RenderOutput(image=image, alpha=acc, depth=depth,
                       contrib_counts=contrib, visible=prep["vis"])
    cache = {
        "prep": prep,
        "rects": rects,
        "final_t": final_t,
        "last_pos": last_pos,
        "means2_s": means2_s,
        "conic_s": conic_s,
        "ab_s": ab_s,
        "colors_s": colors_s,
        "cloud": cloud,
    }
    return out, cache


def _isoclinic_bases():
    eye = np.eye(4)
    lb = np.stack([left_isoclinic(eye[i]) for i in range(4)])
    rb = np.stack([right_isoclinic(eye[i]) for i in range(4)])
    return lb, rb


_LBASIS, _RBASIS = _isoclinic_bases()


def render_backward(cache: dict, d_image: np.ndarray) -> GradientBundle:
    """Propagate a color-image gradient back to all Gaussian attributes.

    Only the color output participates; the alpha and depth outputs are
    diagnostics and carry no gradient.
    """
    if cache is None:
        raise InvalidParameterError("render produced no visible splats; no backward")
    prep = cache["prep"]
    cloud: GaussianCloud = cache["cloud"]
    config: RasterConfig = prep["config"]
    camera: Camera = prep["camera"]
    grads = GradientBundle.zeros(cloud)
    d_image = np.ascontiguousarray(d_image, dtype=np.float64)

    d_means2_s, d_conic_s, d_ab_s, d_colors_s = kernels.composite_backward(
        cache["means2_s"], cache["conic_s"], cache["ab_s"], cache["colors_s"],
        cache["rects"], cache["final_t"], cache["last_pos"], d_image,
        prep["background"], camera.width, camera.height, config.alpha_clamp,
        config.skip_threshold, config.term_threshold, config.tile_size,
    )
    order = prep["order"]
    inv = np.empty_like(order)
    inv[order] = np.arange(len(order))
    d_means2 = d_means2_s[inv]
    d_conic = d_conic_s[inv]
    d_alpha_base = d_ab_s[inv]
    d_colors = d_colors_s[inv]

    # Conic -> full cov2 gradient through the 2x2 inverse.
    conic = prep["conic"]
    lam = np.zeros((len(conic), 2, 2))
    lam[:, 0, 0] = conic[:, 0]
    lam[:, 0, 1] = conic[:, 1]
    lam[:, 1, 0] = conic[:, 1]
    lam[:, 1, 1] = conic[:, 2]
    d_lam = np.zeros_like(lam)
    d_lam[:, 0, 0] = d_conic[:, 0]
    d_lam[:, 0, 1] = 0.5 * d_conic[:, 1]
    d_lam[:, 1, 0] = 0.5 * d_conic[:, 1]
    d_lam[:, 1, 1] = d_conic[:, 2]
    d_cov2 = -np.einsum("nab,nbc,ncd->nad", lam, d_lam, lam)

    d_means3, d_cov3 = project_backward(prep["proj_cache"], d_means2, d_cov2)

    # Color -> coefficients and view direction.
    d_coeffs, d_units = eval_color_batch_backward(d_colors, prep["color_cache"],
                                                  cloud.sh_config)
    units, vnorm = prep["units"], prep["view_norm"]
    d_view = (d_units - units * np.sum(d_units * units, axis=1, keepdims=True))
    d_view /= vnorm[:, None]
    d_means3 = d_means3 + d_view

    # alpha_base = tau * omega * opacity.
    tau, omega, opac = prep["tau"], prep["omega"], prep["opac"]
    d_tau = d_alpha_base * omega * opac
    d_omega = d_alpha_base * tau * opac
    d_opac = d_alpha_base * tau * omega

    # Temporal weight: omega = exp(-dt^2 / (2 c44)).
    cov4_v = prep["cov4_v"]
    c44 = cov4_v[:, 3, 3]
    dt = prep["t"] - cloud.temporal_centers[prep["vis"]]
    d_mu_t = d_omega * omega * dt / c44
    d_c44 = d_omega * omega * dt * dt / (2.0 * c44 * c44)

    # Slice: mean3 = pos + b * dt / c44, cov3 = A - b b^T / c44.
    b = cov4_v[:, :3, 3]
    d_pos = d_means3.copy()
    d_b = d_means3 * (dt / c44)[:, None]
    dot_mb = np.sum(d_means3 * b, axis=1)
    d_c44 = d_c44 - dot_mb * dt / (c44 * c44)
    d_mu_t = d_mu_t - dot_mb / c44
    d_a_block = d_cov3
    d_b = d_b - 2.0 * np.einsum("nij,nj->ni", d_cov3, b) / c44[:, None]
    d_c44 = d_c44 + np.einsum("ni,nij,nj->n", b, d_cov3, b) / (c44 * c44)

    d_sigma = np.zeros((len(b), 4, 4))
    d_sigma[:, :3, :3] = d_a_block
    d_sigma[:, :3, 3] = d_b
    d_sigma[:, 3, 3] = d_c44

    # Sigma = R diag(exp(2 ls)) R^T.
    vis = prep["vis"]
    q_l = normalize_quaternion(cloud.rot_left[vis])
    q_r = normalize_quaternion(cloud.rot_right[vis])
    lmat = left_isoclinic(q_l)
    rmat = right_isoclinic(q_r)
    rot = lmat @ rmat
    dvec = np.exp(2.0 * cloud.log_scales[vis])
    sym_g = d_sigma + np.swapaxes(d_sigma, 1, 2)
    d_rot = np.einsum("nab,nbk,nk->nak", sym_g, rot, dvec)
    d_d = np.einsum("nik,nij,njk->nk", rot, d_sigma, rot)
    d_log_scales = d_d * 2.0 * dvec

    d_lmat = np.einsum("nak,nbk->nab", d_rot, rmat)
    d_rmat = np.einsum("nba,nbk->nak", lmat, d_rot)
    d_qhat_l = np.einsum("nab,iab->ni", d_lmat, _LBASIS)
    d_qhat_r = np.einsum("nab,iab->ni", d_rmat, _RBASIS)

    def _norm_backward(q_raw, q_hat, d_hat):
        n = np.linalg.norm(q_raw, axis=1, keepdims=True)
        return (d_hat - q_hat * np.sum(d_hat * q_hat, axis=1, keepdims=True)) / n

    d_ql = _norm_backward(cloud.rot_left[vis], q_l, d_qhat_l)
    d_qr = _norm_backward(cloud.rot_right[vis], q_r, d_qhat_r)

    # Decay factor.
    policy = prep["policy"]
    if policy == "neural":
        tau_cache = prep["tau_cache"]
        net: DecayNet = prep["net"]
        net_grads, d_x = net.backward(d_tau, tau_cache["net"])
        dp, do_decay, dql_decay, dqr_decay = split_decay_input_grads(
            d_x, prep["aabb"]
        )
        d_pos = d_pos + dp
        d_opac = d_opac + do_decay
        d_ql = d_ql + dql_decay
        d_qr = d_qr + dqr_decay
        grads.net = net_grads
    elif policy in ("pow", "exp"):
        d_opac = d_opac + d_tau * variant_tau_grad(policy, opac)

    d_logit = d_opac * opac * (1.0 - opac)

    grads.positions[vis] = d_pos
    grads.temporal_centers[vis] = d_mu_t
    grads.rot_left[vis] = d_ql
    grads.rot_right[vis] = d_qr
    grads.log_scales[vis] = d_log_scales
    grads.opacity_logits[vis] = d_logit
    grads.sh_coeffs[vis] = d_coeffs
    return grads


def oracle_render(cloud: GaussianCloud, camera: Camera, t: float, background,
                  config: RasterConfig | None = None, policy: str = "none",
                  net: DecayNet | None = None, aabb=None) -> RenderOutput:
    """Reference renderer: per pixel, composite every visible splat in depth
    order with the same alpha clamp, skip, and termination rules, but no
    tiling and no extent rectangles. Color accumulates at extended precision;
    transmittance stays in working precision so the termination decisions are
    the ones under test."""
    if config is None:
        config = RasterConfig()
    prep = _prepare_splats(cloud, camera, t, background, config, policy, net, aabb)
    background = np.asarray(background, dtype=np.float64)
    if prep is None:
        return _empty_output(cloud, camera, background)
    order = prep["order"]
    means2 = prep["means2"][order]
    conic = prep["conic"][order]
    alpha_base = prep["alpha_base"][order]
    colors = prep["colors"][order]
    depths = prep["depths"][order]
    h, w = camera.height, camera.width
    xs = np.arange(w) + 0.5
    ys = np.arange(h) + 0.5
    img = np.zeros((h, w, 3), dtype=np.longdouble)
    depth_acc = np.zeros((h, w), dtype=np.longdouble)
    trans = np.ones((h, w))
    counts = np.zeros(len(order), dtype=np.int64)
    for i in range(len(order)):
        dx = xs[None, :] - means2[i, 0]
        dy = ys[:, None] - means2[i, 1]
        a, b, c = conic[i]
        q = a * dx * dx + 2.0 * b * dx * dy + c * dy * dy
        alpha = alpha_base[i] * np.exp(-0.5 * q)
        np.minimum(alpha, config.alpha_clamp, out=alpha)
        m = (trans >= config.term_threshold) & (alpha >= config.skip_threshold)
        if not m.any():
            continue
        wgt = alpha[m] * trans[m]
        img[m] += wgt[:, None].astype(np.longdouble) * colors[i]
        depth_acc[m] += wgt.astype(np.longdouble) * depths[i]
        trans[m] = trans[m] * (1.0 - alpha[m])
        counts[i] = int(m.sum())
    image = np.asarray(img, dtype=np.float64) + trans[:, :, None] * background
    acc = 1.0 - trans
    depth = np.where(
        acc > 0.0, np.asarray(depth_acc, dtype=np.float64) / np.maximum(acc, 1e-300), 0.0
    )
    contrib = np.zeros(len(cloud), dtype=np.int64)
    contrib[prep["vis"][order]] = counts
    return RenderOutput(image=image, alpha=acc, depth=depth,
                        contrib_counts=contrib, visible=prep["vis"])
