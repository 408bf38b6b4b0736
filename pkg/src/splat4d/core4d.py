"""Spatio-temporal Gaussian primitives and covariance slicing.

A primitive lives in 4D (x, y, z, t). Its covariance is factored as
R S S^T R^T where S is diagonal (exponentiated log scales) and R is a 4D
rotation built from a pair of unit quaternions acting by left and right
multiplication. Conditioning the 4D Gaussian on a time value gives a 3D
Gaussian whose center drifts linearly with the space-time coupling, plus a
scalar weight that fades away from the temporal center.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .appearance import ShConfig
from .errors import DegenerateCovarianceError, InvalidParameterError

# Temporal variances at or below this are considered degenerate: conditioning
# would divide by (nearly) zero.
SIGMA_T_MIN = 1e-12


def normalize_quaternion(q: np.ndarray) -> np.ndarray:
    """Unit-normalize quaternions along the last axis."""
    q = np.asarray(q, dtype=np.float64)
    n = np.linalg.norm(q, axis=-1, keepdims=True)
    if np.any(n == 0.0) or not np.all(np.isfinite(n)):
        raise InvalidParameterError("quaternion with zero or non-finite norm")
    return q / n


def left_isoclinic(q: np.ndarray) -> np.ndarray:
    """Matrix of left quaternion multiplication x -> q * x, shape (..., 4, 4)."""
    q = np.asarray(q, dtype=np.float64)
    a, b, c, d = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    rows = [
        np.stack([a, -b, -c, -d], axis=-1),
        np.stack([b, a, -d, c], axis=-1),
        np.stack([c, d, a, -b], axis=-1),
        np.stack([d, -c, b, a], axis=-1),
    ]
    return np.stack(rows, axis=-2)


def right_isoclinic(q: np.ndarray) -> np.ndarray:
    """Matrix of right quaternion multiplication x -> x * q, shape (..., 4, 4)."""
    q = np.asarray(q, dtype=np.float64)
    p, q1, q2, q3 = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    rows = [
        np.stack([p, -q1, -q2, -q3], axis=-1),
        np.stack([q1, p, q3, -q2], axis=-1),
        np.stack([q2, -q3, p, q1], axis=-1),
        np.stack([q3, q2, -q1, p], axis=-1),
    ]
    return np.stack(rows, axis=-2)


def build_rotation4(rot_left: np.ndarray, rot_right: np.ndarray) -> np.ndarray:
    """4D rotation from a quaternion pair: L(l_hat) @ Rm(r_hat).

    Both quaternions are normalized first. Supports batching over leading
    dimensions; returns (..., 4, 4).
    """
    l_hat = normalize_quaternion(rot_left)
    r_hat = normalize_quaternion(rot_right)
    return left_isoclinic(l_hat) @ right_isoclinic(r_hat)


def build_cov4_matrix(
    rot_left: np.ndarray, rot_right: np.ndarray, log_scales: np.ndarray
) -> np.ndarray:
    """Covariance R diag(exp(2*log_scales)) R^T as a (..., 4, 4) array."""
    log_scales = np.asarray(log_scales, dtype=np.float64)
    if log_scales.shape[-1] != 4:
        raise InvalidParameterError("log_scales must have 4 components")
    rot = build_rotation4(rot_left, rot_right)
    d = np.exp(2.0 * log_scales)
    cov = np.einsum("...ik,...k,...jk->...ij", rot, d, rot)
    # Exact symmetry, independent of summation quirks.
    return 0.5 * (cov + np.swapaxes(cov, -1, -2))


@dataclass(frozen=True)
class Covariance4:
    """Symmetric 4x4 covariance stored as its 10 unique entries.

    Packing order is row-major upper triangle:
    (00, 01, 02, 03, 11, 12, 13, 22, 23, 33).
    """

    packed: np.ndarray

    _IDX = ([0, 0, 0, 0, 1, 1, 1, 2, 2, 3], [0, 1, 2, 3, 1, 2, 3, 2, 3, 3])

    def __post_init__(self):
        packed = np.asarray(self.packed, dtype=np.float64)
        if packed.shape != (10,):
            raise InvalidParameterError("Covariance4 needs exactly 10 entries")
        if not np.all(np.isfinite(packed)):
            raise InvalidParameterError("Covariance4 entries must be finite")
        object.__setattr__(self, "packed", packed)

    @classmethod
    def from_matrix(cls, m: np.ndarray, rtol: float = 1e-9) -> "Covariance4":
        m = np.asarray(m, dtype=np.float64)
        if m.shape != (4, 4):
            raise InvalidParameterError("covariance matrix must be 4x4")
        scale = max(float(np.max(np.abs(m))), 1.0)
        if np.max(np.abs(m - m.T)) > rtol * scale:
            raise InvalidParameterError("covariance matrix is not symmetric")
        return cls(packed=m[cls._IDX])

    @property
    def matrix(self) -> np.ndarray:
        m = np.empty((4, 4))
        m[self._IDX] = self.packed
        m[(self._IDX[1], self._IDX[0])] = self.packed
        return m

    @property
    def sigma_tt(self) -> float:
        return float(self.packed[9])


def build_cov4(g: "Gaussian4D") -> Covariance4:
    """Covariance of one primitive."""
    return Covariance4.from_matrix(
        build_cov4_matrix(g.rot_left, g.rot_right, g.log_scales)
    )


def _check_sigma_tt(sigma_tt: np.ndarray):
    if np.any(sigma_tt <= SIGMA_T_MIN):
        bad = float(np.min(sigma_tt))
        raise DegenerateCovarianceError(
            f"temporal variance {bad:g} is at or below the threshold {SIGMA_T_MIN:g}"
        )


def slice_mean(
    cov4: np.ndarray, position: np.ndarray, temporal_center: np.ndarray, t: float
) -> np.ndarray:
    """Conditional spatial mean at time t.

    position + cov[:3, 3] / cov[3, 3] * (t - temporal_center); batched over
    leading dimensions.
    """
    cov4 = np.asarray(cov4, dtype=np.float64)
    sigma_tt = cov4[..., 3, 3]
    _check_sigma_tt(sigma_tt)
    dt = float(t) - np.asarray(temporal_center, dtype=np.float64)
    coupling = cov4[..., :3, 3]
    return np.asarray(position, dtype=np.float64) + coupling * (dt / sigma_tt)[..., None]


def slice_cov(cov4: np.ndarray) -> np.ndarray:
    """Conditional spatial covariance: the Schur complement of the (t, t) entry.

    cov[:3, :3] - outer(cov[:3, 3], cov[3, :3]) / cov[3, 3]; batched.
    """
    cov4 = np.asarray(cov4, dtype=np.float64)
    sigma_tt = cov4[..., 3, 3]
    _check_sigma_tt(sigma_tt)
    b = cov4[..., :3, 3]
    return cov4[..., :3, :3] - b[..., :, None] * b[..., None, :] / sigma_tt[..., None, None]


def temporal_weight(cov4: np.ndarray, temporal_center: np.ndarray, t: float) -> np.ndarray:
    """Marginal temporal density ratio exp(-0.5 * (t - mu_t)^2 / cov[3, 3]).

    Equals 1 at the temporal center and decays with temporal distance.
    """
    cov4 = np.asarray(cov4, dtype=np.float64)
    sigma_tt = cov4[..., 3, 3]
    _check_sigma_tt(sigma_tt)
    dt = float(t) - np.asarray(temporal_center, dtype=np.float64)
    return np.exp(-0.5 * dt * dt / sigma_tt)


@dataclass(frozen=True)
class SlicedGaussian:
    """A 4D primitive conditioned on one time value."""

    mean: np.ndarray  # (3,)
    cov: np.ndarray  # (3, 3)
    weight: float


def slice_gaussian(g: "Gaussian4D", t: float) -> SlicedGaussian:
    cov4 = build_cov4_matrix(g.rot_left, g.rot_right, g.log_scales)
    return SlicedGaussian(
        mean=slice_mean(cov4, g.position, g.temporal_center, t),
        cov=slice_cov(cov4),
        weight=float(temporal_weight(cov4, g.temporal_center, t)),
    )


def _sigmoid(x):
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def _logit(p):
    p = np.asarray(p, dtype=np.float64)
    return np.log(p) - np.log1p(-p)


@dataclass(frozen=True)
class Gaussian4D:
    """One spatio-temporal primitive.

    Opacity is stored as a logit; spatial and temporal scales as natural logs.
    sh_coeffs has shape (3, n_fourier + 1, (max_degree + 1)^2).
    """

    position: np.ndarray
    temporal_center: float
    rot_left: np.ndarray
    rot_right: np.ndarray
    log_scales: np.ndarray
    opacity_logit: float
    sh_coeffs: np.ndarray

    def __post_init__(self):
        position = np.asarray(self.position, dtype=np.float64)
        rot_left = np.asarray(self.rot_left, dtype=np.float64)
        rot_right = np.asarray(self.rot_right, dtype=np.float64)
        log_scales = np.asarray(self.log_scales, dtype=np.float64)
        sh_coeffs = np.asarray(self.sh_coeffs, dtype=np.float64)
        if position.shape != (3,):
            raise InvalidParameterError("position must be a 3-vector")
        if rot_left.shape != (4,) or rot_right.shape != (4,):
            raise InvalidParameterError("rotation quaternions must be 4-vectors")
        if log_scales.shape != (4,):
            raise InvalidParameterError("log_scales must be a 4-vector")
        if sh_coeffs.ndim != 3 or sh_coeffs.shape[0] != 3:
            raise InvalidParameterError(
                "sh_coeffs must have shape (3, n_time, n_harmonics)"
            )
        for arr, name in [
            (position, "position"),
            (rot_left, "rot_left"),
            (rot_right, "rot_right"),
            (log_scales, "log_scales"),
            (sh_coeffs, "sh_coeffs"),
        ]:
            if not np.all(np.isfinite(arr)):
                raise InvalidParameterError(f"{name} must be finite")
        if not np.isfinite(self.temporal_center) or not np.isfinite(self.opacity_logit):
            raise InvalidParameterError("scalar attributes must be finite")
        if np.linalg.norm(rot_left) == 0.0 or np.linalg.norm(rot_right) == 0.0:
            raise InvalidParameterError("rotation quaternions must be nonzero")
        object.__setattr__(self, "position", position)
        object.__setattr__(self, "rot_left", rot_left)
        object.__setattr__(self, "rot_right", rot_right)
        object.__setattr__(self, "log_scales", log_scales)
        object.__setattr__(self, "sh_coeffs", sh_coeffs)

    @property
    def opacity(self) -> float:
        return float(_sigmoid(self.opacity_logit))


# Field order used for serialization and for struct-of-arrays storage.
FIELD_ORDER = (
    "positions",
    "temporal_centers",
    "rot_left",
    "rot_right",
    "log_scales",
    "opacity_logits",
    "sh_coeffs",
)


@dataclass
class GaussianCloud:
    """Struct-of-arrays container for a set of primitives."""

    positions: np.ndarray  # (N, 3)
    temporal_centers: np.ndarray  # (N,)
    rot_left: np.ndarray  # (N, 4)
    rot_right: np.ndarray  # (N, 4)
    log_scales: np.ndarray  # (N, 4)
    opacity_logits: np.ndarray  # (N,)
    sh_coeffs: np.ndarray  # (N, 3, n_time, n_sh)
    sh_config: ShConfig = field(default_factory=ShConfig)

    def __post_init__(self):
        n = len(self.positions)
        self.positions = np.ascontiguousarray(self.positions, dtype=np.float64)
        self.temporal_centers = np.ascontiguousarray(
            self.temporal_centers, dtype=np.float64
        )
        self.rot_left = np.ascontiguousarray(self.rot_left, dtype=np.float64)
        self.rot_right = np.ascontiguousarray(self.rot_right, dtype=np.float64)
        self.log_scales = np.ascontiguousarray(self.log_scales, dtype=np.float64)
        self.opacity_logits = np.ascontiguousarray(
            self.opacity_logits, dtype=np.float64
        )
        self.sh_coeffs = np.ascontiguousarray(self.sh_coeffs, dtype=np.float64)
        shapes = {
            "positions": (n, 3),
            "temporal_centers": (n,),
            "rot_left": (n, 4),
            "rot_right": (n, 4),
            "log_scales": (n, 4),
            "opacity_logits": (n,),
            "sh_coeffs": (n,) + self.sh_config.coeff_shape(),
        }
        for name, want in shapes.items():
            got = getattr(self, name).shape
            if got != want:
                raise InvalidParameterError(f"{name} has shape {got}, expected {want}")

    def __len__(self) -> int:
        return len(self.positions)

    @property
    def opacities(self) -> np.ndarray:
        return _sigmoid(self.opacity_logits)

    def set_opacities(self, values: np.ndarray):
        values = np.asarray(values, dtype=np.float64)
        if np.any(values <= 0.0) or np.any(values >= 1.0):
            raise InvalidParameterError("opacities must lie strictly inside (0, 1)")
        self.opacity_logits = _logit(values)

    def primitive(self, i: int) -> Gaussian4D:
        return Gaussian4D(
            position=self.positions[i].copy(),
            temporal_center=float(self.temporal_centers[i]),
            rot_left=self.rot_left[i].copy(),
            rot_right=self.rot_right[i].copy(),
            log_scales=self.log_scales[i].copy(),
            opacity_logit=float(self.opacity_logits[i]),
            sh_coeffs=self.sh_coeffs[i].copy(),
        )

    @classmethod
    def from_primitives(cls, gaussians, sh_config: ShConfig) -> "GaussianCloud":
        gaussians = list(gaussians)
        return cls(
            positions=np.array([g.position for g in gaussians]).reshape(-1, 3),
            temporal_centers=np.array([g.temporal_center for g in gaussians]),
            rot_left=np.array([g.rot_left for g in gaussians]).reshape(-1, 4),
            rot_right=np.array([g.rot_right for g in gaussians]).reshape(-1, 4),
            log_scales=np.array([g.log_scales for g in gaussians]).reshape(-1, 4),
            opacity_logits=np.array([g.opacity_logit for g in gaussians]),
            sh_coeffs=np.array([g.sh_coeffs for g in gaussians]).reshape(
                (-1,) + sh_config.coeff_shape()
            ),
            sh_config=sh_config,
        )

    def select(self, idx) -> "GaussianCloud":
        return GaussianCloud(
            positions=self.positions[idx],
            temporal_centers=self.temporal_centers[idx],
            rot_left=self.rot_left[idx],
            rot_right=self.rot_right[idx],
            log_scales=self.log_scales[idx],
            opacity_logits=self.opacity_logits[idx],
            sh_coeffs=self.sh_coeffs[idx],
            sh_config=self.sh_config,
        )

    def copy(self) -> "GaussianCloud":
        # Basic slicing would hand back views; checkpointing and the trainer
        # rely on copies owning their storage.
        return GaussianCloud(
            positions=self.positions.copy(),
            temporal_centers=self.temporal_centers.copy(),
            rot_left=self.rot_left.copy(),
            rot_right=self.rot_right.copy(),
            log_scales=self.log_scales.copy(),
            opacity_logits=self.opacity_logits.copy(),
            sh_coeffs=self.sh_coeffs.copy(),
            sh_config=self.sh_config,
        )

    def normalize_rotations(self):
        self.rot_left = normalize_quaternion(self.rot_left)
        self.rot_right = normalize_quaternion(self.rot_right)

    def cov4(self) -> np.ndarray:
        """(N, 4, 4) covariance for every primitive."""
        return build_cov4_matrix(self.rot_left, self.rot_right, self.log_scales)

    def round_to_float32(self):
        """Snap every parameter to its nearest float32 value (in place).

        Checkpoints store 32-bit floats; generators call this so that a
        save/load round trip reproduces the scene bit for bit.
        """
        for name in FIELD_ORDER:
            arr = getattr(self, name)
            setattr(self, name, arr.astype(np.float32).astype(np.float64))


def quaternion_pair_from_rotation4(rot: np.ndarray, atol: float = 1e-8):
    """Factor a 4D rotation matrix into its (left, right) unit quaternion pair.

    Uses the rank-one property of A[i, j] = 0.25 * tr(L(e_i)^T rot Rm(e_j)^T),
    which equals outer(l, r) for rot = L(l) Rm(r). The pair is unique up to a
    joint sign flip. Raises if rot is not a rotation or reconstruction fails.
    """
    rot = np.asarray(rot, dtype=np.float64)
    if rot.shape != (4, 4):
        raise InvalidParameterError("expected a 4x4 matrix")
    if np.max(np.abs(rot @ rot.T - np.eye(4))) > 1e-6 or np.linalg.det(rot) < 0.0:
        raise InvalidParameterError("matrix is not a (proper) 4D rotation")
    eye = np.eye(4)
    lbasis = [left_isoclinic(eye[i]) for i in range(4)]
    rbasis = [right_isoclinic(eye[j]) for j in range(4)]
    a = np.empty((4, 4))
    for i in range(4):
        for j in range(4):
            a[i, j] = 0.25 * np.trace(lbasis[i].T @ rot @ rbasis[j].T)
    i_star, j_star = np.unravel_index(np.argmax(np.abs(a)), a.shape)
    l = a[:, j_star]
    l = l / np.linalg.norm(l)
    r = a[i_star, :] / l[i_star]
    r = r / np.linalg.norm(r)
    rebuilt = left_isoclinic(l) @ right_isoclinic(r)
    if np.max(np.abs(rebuilt - rot)) > max(atol, 1e-8):
        raise InvalidParameterError("quaternion pair factorization failed")
    return l, r


def replace_primitive(g: Gaussian4D, **changes) -> Gaussian4D:
    return replace(g, **changes)
