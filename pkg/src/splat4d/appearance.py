"""View- and time-dependent color.

Color is a tensor product of a cosine series in time and real spherical
harmonics over the viewing direction:

    raw[ch] = sum_n sum_{l,m} k[ch, n, (l,m)] * cos(2*pi*n*t / period) * Y_lm(dir)
    color   = clip(raw + 0.5, 0, 1)

The Y_lm are the orthonormal real spherical harmonics (integral of Y^2 over
the sphere equals one), hardcoded up to degree 3.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import InvalidParameterError

MAX_DEGREE = 3

# Normalization constants for the real orthonormal basis.
_C0 = 0.28209479177387814  # 1 / (2 sqrt(pi))
_C1 = 0.4886025119029199  # sqrt(3 / (4 pi))
_C2 = (
    1.0925484305920792,  # sqrt(15 / (4 pi))
    0.31539156525252005,  # sqrt(5 / (16 pi))
    0.5462742152960396,  # sqrt(15 / (16 pi))
)
_C3 = (
    0.5900435899266435,  # sqrt(35 / (32 pi))
    2.890611442640554,  # sqrt(105 / (4 pi))
    0.4570457994644658,  # sqrt(21 / (32 pi))
    0.3731763325901154,  # sqrt(7 / (16 pi))
    1.445305721320277,  # sqrt(105 / (16 pi))
)


@dataclass(frozen=True)
class ShConfig:
    """Basis sizes for the appearance model.

    max_degree is the highest spherical-harmonic degree, n_fourier the highest
    cosine index (0 keeps only the constant term), period the time length the
    cosine series repeats over.
    """

    max_degree: int = 1
    n_fourier: int = 1
    period: float = 1.0

    def __post_init__(self):
        if not 0 <= self.max_degree <= MAX_DEGREE:
            raise InvalidParameterError(
                f"max_degree must be in [0, {MAX_DEGREE}], got {self.max_degree}"
            )
        if self.n_fourier < 0:
            raise InvalidParameterError(f"n_fourier must be >= 0, got {self.n_fourier}")
        if not (self.period > 0 and math.isfinite(self.period)):
            raise InvalidParameterError(f"period must be positive, got {self.period}")

    @property
    def n_sh(self) -> int:
        return (self.max_degree + 1) ** 2

    @property
    def n_time(self) -> int:
        return self.n_fourier + 1

    def coeff_shape(self) -> tuple:
        """Per-Gaussian coefficient tensor shape: (channel, time, harmonic)."""
        return (3, self.n_time, self.n_sh)


@dataclass(frozen=True)
class ViewDirection:
    """Unit direction in the world frame, stored as polar/azimuth angles.

    theta is the polar angle from +z in [0, pi], phi the azimuth from +x
    in [-pi, pi).
    """

    theta: float
    phi: float

    def __post_init__(self):
        if not (math.isfinite(self.theta) and math.isfinite(self.phi)):
            raise InvalidParameterError("ViewDirection angles must be finite")

    @classmethod
    def from_vector(cls, v) -> "ViewDirection":
        v = np.asarray(v, dtype=np.float64)
        n = float(np.linalg.norm(v))
        if not n > 0:
            raise InvalidParameterError("cannot build a direction from the zero vector")
        x, y, z = (v / n).tolist()
        theta = math.acos(min(1.0, max(-1.0, z)))
        phi = math.atan2(y, x)
        return cls(theta=theta, phi=phi)

    def to_vector(self) -> np.ndarray:
        st = math.sin(self.theta)
        return np.array(
            [st * math.cos(self.phi), st * math.sin(self.phi), math.cos(self.theta)]
        )


def sh_index(l: int, m: int) -> int:
    """Flat index of (l, m) in the degree-major basis ordering."""
    if l < 0 or abs(m) > l:
        raise InvalidParameterError(f"invalid harmonic (l={l}, m={m})")
    return l * l + l + m


def sh_basis_all(units: np.ndarray, max_degree: int) -> np.ndarray:
    """Evaluate every Y_lm with l <= max_degree at unit vectors (..., 3).

    Returns (..., (max_degree+1)^2) ordered by sh_index.
    """
    if not 0 <= max_degree <= MAX_DEGREE:
        raise InvalidParameterError(f"max_degree must be in [0, {MAX_DEGREE}]")
    units = np.asarray(units, dtype=np.float64)
    x, y, z = units[..., 0], units[..., 1], units[..., 2]
    out = np.empty(units.shape[:-1] + ((max_degree + 1) ** 2,))
    out[..., 0] = _C0
    if max_degree >= 1:
        out[..., 1] = _C1 * y
        out[..., 2] = _C1 * z
        out[..., 3] = _C1 * x
    if max_degree >= 2:
        xx, yy, zz = x * x, y * y, z * z
        out[..., 4] = _C2[0] * x * y
        out[..., 5] = _C2[0] * y * z
        out[..., 6] = _C2[1] * (3.0 * zz - 1.0)
        out[..., 7] = _C2[0] * x * z
        out[..., 8] = _C2[2] * (xx - yy)
    if max_degree >= 3:
        out[..., 9] = _C3[0] * y * (3.0 * xx - yy)
        out[..., 10] = _C3[1] * x * y * z
        out[..., 11] = _C3[2] * y * (5.0 * zz - 1.0)
        out[..., 12] = _C3[3] * z * (5.0 * zz - 3.0)
        out[..., 13] = _C3[2] * x * (5.0 * zz - 1.0)
        out[..., 14] = _C3[4] * z * (xx - yy)
        out[..., 15] = _C3[0] * x * (xx - 3.0 * yy)
    return out


def sh_basis_grad(units: np.ndarray, max_degree: int) -> np.ndarray:
    """Partial derivatives of sh_basis_all with respect to the unit-vector
    components. Returns (..., n_sh, 3).

    These are derivatives of the Cartesian polynomials; the caller owns the
    chain rule through vector normalization.
    """
    units = np.asarray(units, dtype=np.float64)
    x, y, z = units[..., 0], units[..., 1], units[..., 2]
    zero = np.zeros_like(x)
    n_sh = (max_degree + 1) ** 2
    g = np.zeros(units.shape[:-1] + (n_sh, 3))
    if max_degree >= 1:
        g[..., 1, 1] = _C1
        g[..., 2, 2] = _C1
        g[..., 3, 0] = _C1
    if max_degree >= 2:
        g[..., 4, 0] = _C2[0] * y
        g[..., 4, 1] = _C2[0] * x
        g[..., 5, 1] = _C2[0] * z
        g[..., 5, 2] = _C2[0] * y
        g[..., 6, 2] = _C2[1] * 6.0 * z
        g[..., 7, 0] = _C2[0] * z
        g[..., 7, 2] = _C2[0] * x
        g[..., 8, 0] = _C2[2] * 2.0 * x
        g[..., 8, 1] = _C2[2] * -2.0 * y
    if max_degree >= 3:
        g[..., 9, 0] = _C3[0] * 6.0 * x * y
        g[..., 9, 1] = _C3[0] * (3.0 * x * x - 3.0 * y * y)
        g[..., 10, 0] = _C3[1] * y * z
        g[..., 10, 1] = _C3[1] * x * z
        g[..., 10, 2] = _C3[1] * x * y
        g[..., 11, 1] = _C3[2] * (5.0 * z * z - 1.0)
        g[..., 11, 2] = _C3[2] * 10.0 * y * z
        g[..., 12, 2] = _C3[3] * (15.0 * z * z - 3.0)
        g[..., 13, 0] = _C3[2] * (5.0 * z * z - 1.0)
        g[..., 13, 2] = _C3[2] * 10.0 * x * z
        g[..., 14, 0] = _C3[4] * 2.0 * x * z
        g[..., 14, 1] = _C3[4] * -2.0 * y * z
        g[..., 14, 2] = _C3[4] * (x * x - y * y)
        g[..., 15, 0] = _C3[0] * (3.0 * x * x - 3.0 * y * y)
        g[..., 15, 1] = _C3[0] * -6.0 * x * y
    del zero
    return g


def sh_basis(l: int, m: int, direction: ViewDirection) -> float:
    """Single real spherical harmonic Y_lm at a direction."""
    u = direction.to_vector()
    return float(sh_basis_all(u, l)[sh_index(l, m)])


def time_basis(t: float, config: ShConfig) -> np.ndarray:
    """Cosine series values cos(2*pi*n*t/period), n = 0..n_fourier."""
    n = np.arange(config.n_time, dtype=np.float64)
    return np.cos(2.0 * np.pi * n * float(t) / config.period)


def eval_color_batch(coeffs: np.ndarray, t: float, units: np.ndarray, config: ShConfig):
    """Colors for a batch of Gaussians at shared time t.

    coeffs has shape (M, 3, n_time, n_sh), units (M, 3) unit view directions.
    Returns (colors, cache) where colors is (M, 3) clipped to [0, 1] and cache
    holds what the backward pass needs.
    """
    coeffs = np.asarray(coeffs, dtype=np.float64)
    if coeffs.shape[1:] != config.coeff_shape():
        raise InvalidParameterError(
            f"coefficient shape {coeffs.shape[1:]} does not match config "
            f"{config.coeff_shape()}"
        )
    ft = time_basis(t, config)
    ylm = sh_basis_all(units, config.max_degree)
    # raw[g, ch] = sum_n sum_j coeffs[g, ch, n, j] * ft[n] * ylm[g, j]
    raw = np.einsum("gcnj,n,gj->gc", coeffs, ft, ylm)
    colors = np.clip(raw + 0.5, 0.0, 1.0)
    cache = {"ft": ft, "ylm": ylm, "raw": raw, "units": units, "coeffs": coeffs}
    return colors, cache


def eval_color_batch_backward(d_colors: np.ndarray, cache: dict, config: ShConfig):
    """Backward of eval_color_batch.

    Returns (d_coeffs, d_units). The clip has zero slope outside (0, 1); at the
    boundary the inside slope is used.
    """
    ft, ylm, raw = cache["ft"], cache["ylm"], cache["raw"]
    coeffs, units = cache["coeffs"], cache["units"]
    shifted = raw + 0.5
    inside = (shifted >= 0.0) & (shifted <= 1.0)
    d_raw = np.where(inside, d_colors, 0.0)
    d_coeffs = np.einsum("gc,n,gj->gcnj", d_raw, ft, ylm)
    d_ylm = np.einsum("gc,n,gcnj->gj", d_raw, ft, coeffs)
    ygrad = sh_basis_grad(units, config.max_degree)
    d_units = np.einsum("gj,gjk->gk", d_ylm, ygrad)
    return d_coeffs, d_units


def eval_color(coeffs: np.ndarray, t: float, direction: ViewDirection, config: ShConfig):
    """Color of a single Gaussian: (3,) in [0, 1]."""
    u = direction.to_vector()[None, :]
    colors, _ = eval_color_batch(np.asarray(coeffs, dtype=np.float64)[None], t, u, config)
    return colors[0]
