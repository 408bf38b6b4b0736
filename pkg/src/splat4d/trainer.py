"""Joint optimization of a Gaussian cloud and its opacity-decay network.

One training iteration samples a (camera, time, frame) triple, splits the
cloud into visible and invisible sets, applies the persistent constant decay
to invisible opacities, renders the visible set with the configured decay
policy, and backpropagates a photometric loss (L1 blended with DSSIM) through
the renderer into every Gaussian attribute and, once warm-up has passed, the
decay network. Adam with per-group learning rates performs the updates; low
opacity Gaussians are pruned on a fixed cadence.

Everything is deterministic given the seed: same config, same dataset, same
platform gives bit-identical checkpoints.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field

import numpy as np

from .core4d import FIELD_ORDER, GaussianCloud, _logit, _sigmoid
from .decaynet import DECAY_POLICIES, DecayNet, build_decay_inputs, variant_tau
from .errors import DataError, DegenerateCovarianceError, InvalidParameterError
from .io import Checkpoint, quantize_unit, save_checkpoint
from .metrics import dssim, dssim_with_grad, psnr
from .raster import RasterConfig, render_backward, render_forward
from .visibility import visible_mask

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-15


@dataclass(frozen=True)
class TrainConfig:
    iterations: int = 5000
    warmup_iters: int = 500
    lr_position: float = 1.6e-4
    lr_rotation: float = 1e-3
    lr_log_scales: float = 5e-3
    lr_opacity_logit: float = 5e-2
    lr_sh: float = 2.5e-3
    lr_decay_net: float = 1e-3
    loss_lambda: float = 0.2
    eps_t: float = 0.05
    beta_invisible: float = 0.999
    prune_opacity: float = 0.005
    prune_every: int = 500
    decay_variant: str = "none"
    rng_seed: int = 0
    # Initialization knobs (used by init_from_dataset).
    init_position_noise: float = 0.05
    init_opacity: float = 0.1
    init_distractor_frac: float = 0.25
    init_distractor_opacity: float = 0.5
    # Behavior switches. commit_visible_decay folds the rendered decay factor
    # back into stored opacity; beta_after_warmup delays the invisible decay
    # until warm-up has passed; no_visibility disables the visible/invisible
    # split so the active decay policy is applied to every Gaussian.
    commit_visible_decay: bool = False
    beta_after_warmup: bool = False
    no_visibility: bool = False
    eval_every: int = 500

    def __post_init__(self):
        if self.iterations < 0 or self.warmup_iters < 0:
            raise InvalidParameterError("iteration counts must be non-negative")
        for name in ("lr_position", "lr_rotation", "lr_log_scales",
                     "lr_opacity_logit", "lr_sh", "lr_decay_net"):
            if getattr(self, name) <= 0.0:
                raise InvalidParameterError(f"{name} must be positive")
        if not 0.0 <= self.loss_lambda <= 1.0:
            raise InvalidParameterError("loss_lambda must lie in [0, 1]")
        if not 0.0 < self.beta_invisible <= 1.0:
            raise InvalidParameterError("beta_invisible must lie in (0, 1]")
        if not 0.0 <= self.prune_opacity < 1.0:
            raise InvalidParameterError("prune_opacity must lie in [0, 1)")
        if self.prune_every <= 0 or self.eval_every <= 0:
            raise InvalidParameterError("cadence settings must be positive")
        if self.decay_variant not in DECAY_POLICIES:
            raise InvalidParameterError(
                f"decay_variant must be one of {DECAY_POLICIES}"
            )
        if self.eps_t < 0.0:
            raise InvalidParameterError("eps_t must be non-negative")
        if not 0.0 <= self.init_distractor_frac:
            raise InvalidParameterError("init_distractor_frac must be >= 0")

    def to_json(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_json(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        extra = set(d) - known
        if extra:
            raise InvalidParameterError(
                f"unknown train config keys: {sorted(extra)}"
            )
        return cls(**d)


@dataclass
class LossReport:
    iteration: int
    total: float
    l1: float
    dssim: float
    train_psnr: float
    n_visible: int
    n_gaussians: int

    def to_json(self) -> dict:
        return {
            "type": "iter",
            "iteration": self.iteration,
            "total": self.total,
            "l1": self.l1,
            "dssim": self.dssim,
            "psnr": self.train_psnr,
            "n_visible": self.n_visible,
            "n_gaussians": self.n_gaussians,
        }


def photometric_loss(render: np.ndarray, gt: np.ndarray, lam: float):
    """Blended L1 / DSSIM loss.

    Returns (total, l1_term, dssim_term, d_render). The DSSIM term uses data
    range 1.0 and is skipped entirely when lam == 0 so small images stay
    usable in that mode.
    """
    render = np.asarray(render, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if render.shape != gt.shape:
        raise InvalidParameterError(
            f"image shapes differ: {render.shape} vs {gt.shape}"
        )
    diff = render - gt
    l1 = float(np.mean(np.abs(diff)))
    d_l1 = np.sign(diff) / diff.size
    if lam == 0.0:
        return l1, l1, 0.0, d_l1
    ds, d_ds = dssim_with_grad(render, gt, data_range=1.0)
    total = (1.0 - lam) * l1 + lam * ds
    d_render = (1.0 - lam) * d_l1 + lam * d_ds
    return total, l1, ds, d_render


@dataclass
class AdamState:
    """First/second moment buffers plus the shared step counter."""

    m: dict
    v: dict
    step: int = 0

    @classmethod
    def for_params(cls, params: dict) -> "AdamState":
        return cls(
            m={k: np.zeros_like(p) for k, p in params.items()},
            v={k: np.zeros_like(p) for k, p in params.items()},
        )

    def select_rows(self, keep: np.ndarray):
        """Drop per-Gaussian state rows (used by pruning)."""
        self.m = {k: a[keep] for k, a in self.m.items()}
        self.v = {k: a[keep] for k, a in self.v.items()}


def adam_step(params: dict, grads: dict, state: AdamState, lrs: dict) -> dict:
    """One bias-corrected Adam update over a dict of parameter arrays."""
    state.step += 1
    t = state.step
    bc1 = 1.0 - ADAM_BETA1 ** t
    bc2 = 1.0 - ADAM_BETA2 ** t
    out = {}
    for name, p in params.items():
        g = np.asarray(grads[name], dtype=np.float64)
        if g.shape != p.shape:
            raise InvalidParameterError(
                f"gradient for {name} has shape {g.shape}, parameter {p.shape}"
            )
        m = state.m[name] = ADAM_BETA1 * state.m[name] + (1.0 - ADAM_BETA1) * g
        v = state.v[name] = ADAM_BETA2 * state.v[name] + (1.0 - ADAM_BETA2) * (g * g)
        m_hat = m / bc1
        v_hat = v / bc2
        out[name] = p - lrs[name] * m_hat / (np.sqrt(v_hat) + ADAM_EPS)
    return out


def _cloud_lrs(cfg: TrainConfig) -> dict:
    return {
        "positions": cfg.lr_position,
        "temporal_centers": cfg.lr_position,
        "rot_left": cfg.lr_rotation,
        "rot_right": cfg.lr_rotation,
        "log_scales": cfg.lr_log_scales,
        "opacity_logits": cfg.lr_opacity_logit,
        "sh_coeffs": cfg.lr_sh,
    }


def effective_policy(cfg: TrainConfig, iteration: int) -> str:
    """Decay policy in force at a given iteration (warm-up renders plain)."""
    if iteration < cfg.warmup_iters:
        return "none"
    return cfg.decay_variant


def init_from_dataset(dataset, cfg: TrainConfig, rng: np.random.Generator):
    """Noisy initialization from the dataset's ground-truth scene.

    Positions get bounded uniform noise scaled by the box extent, opacities
    reset to a constant, and a fraction of extra distractor Gaussians with
    random placement is appended. Returns (cloud, is_distractor mask).
    """
    if dataset.gt_scene is None:
        raise DataError("dataset carries no ground-truth scene to initialize from")
    cloud = dataset.gt_scene.to_cloud()
    aabb = dataset.aabb
    extent = aabb[1] - aabb[0]
    n = len(cloud)
    if cfg.init_position_noise > 0.0:
        noise = rng.uniform(-1.0, 1.0, size=(n, 3)) * cfg.init_position_noise * extent
        cloud.positions = np.clip(cloud.positions + noise, aabb[0], aabb[1])
    cloud.opacity_logits = np.full(n, float(_logit(cfg.init_opacity)))
    n_extra = int(round(cfg.init_distractor_frac * n))
    is_distractor = np.zeros(n + n_extra, dtype=bool)
    if n_extra:
        is_distractor[n:] = True
        positions = rng.uniform(aabb[0], aabb[1], size=(n_extra, 3))
        t_lo, t_hi = dataset.time_range
        centers = rng.uniform(t_lo, t_hi, size=n_extra)
        quats = rng.normal(size=(n_extra, 2, 4))
        quats /= np.linalg.norm(quats, axis=2, keepdims=True)
        diag = float(np.linalg.norm(extent))
        ls_spatial = rng.uniform(np.log(0.01 * diag), np.log(0.05 * diag),
                                 size=(n_extra, 3))
        ls_time = rng.uniform(np.log(0.05), np.log(0.3), size=(n_extra, 1))
        sh = np.zeros((n_extra,) + cloud.sh_config.coeff_shape())
        sh[:, :, 0, 0] = rng.uniform(-0.5, 0.5, size=(n_extra, 3))
        extra = GaussianCloud(
            positions=positions,
            temporal_centers=centers,
            rot_left=quats[:, 0],
            rot_right=quats[:, 1],
            log_scales=np.concatenate([ls_spatial, ls_time], axis=1),
            opacity_logits=np.full(n_extra, float(_logit(cfg.init_distractor_opacity))),
            sh_coeffs=sh,
            sh_config=cloud.sh_config,
        )
        cloud = GaussianCloud(
            positions=np.concatenate([cloud.positions, extra.positions]),
            temporal_centers=np.concatenate(
                [cloud.temporal_centers, extra.temporal_centers]
            ),
            rot_left=np.concatenate([cloud.rot_left, extra.rot_left]),
            rot_right=np.concatenate([cloud.rot_right, extra.rot_right]),
            log_scales=np.concatenate([cloud.log_scales, extra.log_scales]),
            opacity_logits=np.concatenate(
                [cloud.opacity_logits, extra.opacity_logits]
            ),
            sh_coeffs=np.concatenate([cloud.sh_coeffs, extra.sh_coeffs]),
            sh_config=cloud.sh_config,
        )
    return cloud, is_distractor


class Trainer:
    """Owns the cloud, the decay network, the optimizer state, and the RNG."""

    def __init__(self, dataset, cfg: TrainConfig,
                 raster: RasterConfig | None = None,
                 cloud: GaussianCloud | None = None,
                 net: DecayNet | None = None,
                 is_distractor: np.ndarray | None = None):
        self.dataset = dataset
        self.cfg = cfg
        self.raster = raster if raster is not None else RasterConfig(eps_t=cfg.eps_t)
        if self.raster.eps_t != cfg.eps_t:
            raise InvalidParameterError(
                "raster eps_t must match the train config so the visible set "
                "used for decay equals the rendered set"
            )
        self.rng = np.random.default_rng(cfg.rng_seed)
        if cloud is None:
            cloud, mask = init_from_dataset(dataset, cfg, self.rng)
            if is_distractor is None:
                is_distractor = mask
        self.cloud = cloud
        if is_distractor is None:
            is_distractor = np.zeros(len(cloud), dtype=bool)
        self.is_distractor = np.asarray(is_distractor, dtype=bool).copy()
        if self.is_distractor.shape != (len(cloud),):
            raise InvalidParameterError("is_distractor must have one entry per Gaussian")
        self.net = net if net is not None else DecayNet(self.rng)
        self.aabb = np.asarray(dataset.aabb, dtype=np.float64)
        self.background = np.asarray(dataset.background, dtype=np.float64)
        self.n_distractors_init = int(self.is_distractor.sum())
        self.adam_cloud = AdamState.for_params(self._cloud_params())
        self.adam_net = AdamState.for_params(self._net_params())
        self.iteration = 0
        self.train_frames = dataset.split_frames("train")
        if not self.train_frames:
            raise DataError("dataset has no training frames")

    def _cloud_params(self) -> dict:
        return {name: getattr(self.cloud, name) for name in FIELD_ORDER}

    def _net_params(self) -> dict:
        return {name: getattr(self.net, name) for name in DecayNet.PARAM_NAMES}

    def _invisible_decay(self, inv_idx: np.ndarray):
        """Persistent opacity decay for Gaussians outside the visible set."""
        cfg = self.cfg
        if inv_idx.size == 0:
            return
        warm = self.iteration < cfg.warmup_iters
        if cfg.no_visibility:
            # The active policy reaches every Gaussian; ones that do not
            # render get it folded into storage (no gradient exists there).
            policy = effective_policy(cfg, self.iteration)
            if policy == "none":
                return
            o = _sigmoid(self.cloud.opacity_logits[inv_idx])
            if policy == "neural":
                x = build_decay_inputs(
                    self.cloud.positions[inv_idx], o,
                    self.cloud.rot_left[inv_idx], self.cloud.rot_right[inv_idx],
                    self.aabb,
                )
                factor, _ = self.net.forward(x)
            else:
                factor = variant_tau(policy, o)
            self.cloud.opacity_logits[inv_idx] = _logit(factor * o)
            return
        if warm and cfg.beta_after_warmup:
            return
        if cfg.beta_invisible == 1.0:
            return
        o = _sigmoid(self.cloud.opacity_logits[inv_idx])
        self.cloud.opacity_logits[inv_idx] = _logit(cfg.beta_invisible * o)

    def _apply_updates(self, grads, update_net: bool):
        params = self._cloud_params()
        grad_map = {name: getattr(grads, name) for name in FIELD_ORDER}
        new = adam_step(params, grad_map, self.adam_cloud, _cloud_lrs(self.cfg))
        # Renormalize only quaternion rows the update actually moved, so
        # untouched Gaussians keep bit-identical attributes.
        moved = np.any(new["rot_left"] != params["rot_left"], axis=1)
        moved |= np.any(new["rot_right"] != params["rot_right"], axis=1)
        if moved.any():
            for key in ("rot_left", "rot_right"):
                q = new[key][moved]
                new[key][moved] = q / np.linalg.norm(q, axis=1, keepdims=True)
        for name in FIELD_ORDER:
            setattr(self.cloud, name, new[name])
        if update_net and grads.net is not None:
            lrs = {name: self.cfg.lr_decay_net for name in DecayNet.PARAM_NAMES}
            new_net = adam_step(self._net_params(), grads.net, self.adam_net, lrs)
            for name, value in new_net.items():
                setattr(self.net, name, value)

    def _prune(self):
        keep = self.cloud.opacities >= self.cfg.prune_opacity
        if keep.all():
            return
        self.cloud = self.cloud.select(keep)
        self.adam_cloud.select_rows(keep)
        self.is_distractor = self.is_distractor[keep]

    def step(self) -> LossReport:
        cfg = self.cfg
        it = self.iteration
        rec = self.train_frames[int(self.rng.integers(len(self.train_frames)))]
        gt = self.dataset.load_frame(rec)
        camera = self.dataset.cameras[rec.camera_id]
        try:
            vis = visible_mask(self.cloud, camera, rec.time, eps_t=cfg.eps_t,
                               margin=self.raster.view_margin)
            self._invisible_decay(np.nonzero(~vis)[0])
            policy = effective_policy(cfg, it)
            out, cache = render_forward(
                self.cloud, camera, rec.time, self.background,
                config=self.raster, policy=policy, net=self.net, aabb=self.aabb,
            )
            total, l1, ds, d_img = photometric_loss(out.image, gt, cfg.loss_lambda)
            if cache is not None:
                grads = render_backward(cache, d_img)
                update_net = policy == "neural" and it >= cfg.warmup_iters
                self._apply_updates(grads, update_net)
                if cfg.commit_visible_decay and policy != "none":
                    tau = cache["prep"]["tau"]
                    idx = cache["prep"]["vis"]
                    o = _sigmoid(self.cloud.opacity_logits[idx])
                    self.cloud.opacity_logits[idx] = _logit(tau * o)
        except (DegenerateCovarianceError, InvalidParameterError) as e:
            raise type(e)(f"iteration {it}: {e}") from e
        n_visible = int(out.visible.size)
        self.iteration += 1
        if (self.iteration % cfg.prune_every == 0
                and self.iteration > cfg.warmup_iters):
            self._prune()
        return LossReport(
            iteration=it,
            total=total,
            l1=l1,
            dssim=ds,
            train_psnr=psnr(out.image, gt),
            n_visible=n_visible,
            n_gaussians=len(self.cloud),
        )

    def render_eval(self, camera, t: float):
        """Render for evaluation with the policy the trained model settled on."""
        policy = effective_policy(self.cfg, self.iteration)
        out, _ = render_forward(self.cloud, camera, t, self.background,
                                config=self.raster, policy=policy,
                                net=self.net, aabb=self.aabb)
        return out

    def eval_split(self, split: str) -> dict:
        policy = effective_policy(self.cfg, self.iteration)
        return eval_frames(self.dataset, split, self.cloud, self.net, policy,
                           self.aabb, self.background, self.raster)

    def summary(self) -> dict:
        opac = self.cloud.opacities
        n_opaque = int(np.count_nonzero(opac[self.is_distractor] > 0.1))
        return {
            "type": "summary",
            "iterations": self.iteration,
            "decay_variant": self.cfg.decay_variant,
            "no_visibility": self.cfg.no_visibility,
            "n_gaussians": len(self.cloud),
            "n_distractors_init": self.n_distractors_init,
            "n_distractors_kept": int(self.is_distractor.sum()),
            "n_distractors_opaque": n_opaque,
        }

    def checkpoint(self) -> Checkpoint:
        echo = self.cfg.to_json()
        echo["iterations_trained"] = self.iteration
        return Checkpoint.from_state(
            self.cloud, self.net, self.aabb, echo,
            rng_state=_jsonable_rng_state(self.rng),
        )


def _jsonable_rng_state(rng: np.random.Generator) -> dict:
    state = rng.bit_generator.state
    return json.loads(json.dumps(state))


def eval_frames(dataset, split: str, cloud: GaussianCloud, net: DecayNet | None,
                policy: str, aabb, background, raster: RasterConfig) -> dict:
    """Metrics over one split. Renders are quantized the same way stored
    frames were, so a model holding the exact scene scores the PSNR cap."""
    frames = dataset.split_frames(split)
    if not frames:
        raise DataError(f"dataset has no {split!r} frames")
    rows = []
    for rec in frames:
        gt = dataset.load_frame(rec)
        out, _ = render_forward(cloud, dataset.cameras[rec.camera_id], rec.time,
                                background, config=raster, policy=policy,
                                net=net, aabb=aabb)
        img = quantize_unit(out.image) / 255.0
        rows.append({
            "path": rec.path,
            "camera_id": rec.camera_id,
            "time": rec.time,
            "psnr": psnr(img, gt),
            "dssim1": dssim(img, gt, data_range=1.0),
            "dssim2": dssim(img, gt, data_range=2.0),
        })
    return {
        "split": split,
        "per_frame": rows,
        "psnr": float(np.mean([r["psnr"] for r in rows])),
        "dssim1": float(np.mean([r["dssim1"] for r in rows])),
        "dssim2": float(np.mean([r["dssim2"] for r in rows])),
    }


def checkpoint_policy(ckpt: Checkpoint) -> str:
    """Decay policy a stored model should render with: its trained variant,
    unless training never left warm-up."""
    echo = ckpt.config_echo
    variant = echo.get("decay_variant", "none")
    trained = int(echo.get("iterations_trained", 0))
    warmup = int(echo.get("warmup_iters", 500))
    if trained < warmup:
        return "none"
    return variant


def evaluate_checkpoint(ckpt: Checkpoint, dataset, split: str = "test",
                        raster: RasterConfig | None = None) -> dict:
    """Evaluate a stored model against a dataset split."""
    if raster is None:
        raster = RasterConfig(eps_t=float(ckpt.config_echo.get("eps_t", 0.05)))
    return eval_frames(dataset, split, ckpt.to_cloud(), ckpt.to_net(),
                       checkpoint_policy(ckpt), ckpt.aabb64(),
                       dataset.background, raster)


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    reports: list = field(default_factory=list)
    evals: list = field(default_factory=list)
    summary: dict = field(default_factory=dict)


def train(dataset, cfg: TrainConfig, ckpt_path=None, log_path=None,
          raster: RasterConfig | None = None, cloud: GaussianCloud | None = None,
          net: DecayNet | None = None, is_distractor: np.ndarray | None = None,
          on_report=None) -> TrainResult:
    """Run the full loop: cfg.iterations steps, held-out evals on a cadence,
    then an optional checkpoint and line-delimited metrics log."""
    trainer = Trainer(dataset, cfg, raster=raster, cloud=cloud, net=net,
                      is_distractor=is_distractor)
    log_file = open(log_path, "w") if log_path is not None else None
    reports, evals = [], []
    has_test = bool(dataset.split_frames("test"))
    try:
        for _ in range(cfg.iterations):
            report = trainer.step()
            reports.append(report)
            if log_file is not None:
                log_file.write(json.dumps(report.to_json()) + "\n")
            if on_report is not None:
                on_report(report)
            if has_test and trainer.iteration % cfg.eval_every == 0:
                ev = trainer.eval_split("test")
                ev_rec = {"type": "eval", "iteration": trainer.iteration, **ev}
                evals.append(ev_rec)
                if log_file is not None:
                    log_file.write(json.dumps(ev_rec) + "\n")
        summary = trainer.summary()
        if log_file is not None:
            log_file.write(json.dumps(summary) + "\n")
    finally:
        if log_file is not None:
            log_file.close()
    ckpt = trainer.checkpoint()
    if ckpt_path is not None:
        save_checkpoint(ckpt, ckpt_path)
    return TrainResult(checkpoint=ckpt, reports=reports, evals=evals,
                       summary=summary)
