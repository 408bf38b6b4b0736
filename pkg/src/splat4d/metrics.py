"""Image quality metrics.

PSNR assumes unit data range and caps at 99 dB (identical images report the
cap). SSIM follows the windowed form with an 11x11 Gaussian window (sigma 1.5),
k1 = 0.01, k2 = 0.03, population (not sample) covariance, and statistics taken
only where the window fits entirely inside the image. DSSIM = (1 - SSIM) / 2.

The SSIM gradient with respect to the first image is available in closed form
for use as a training loss term.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import InvalidParameterError

PSNR_CAP = 99.0
WIN_SIZE = 11
WIN_SIGMA = 1.5
K1 = 0.01
K2 = 0.03


def _window() -> np.ndarray:
    half = (WIN_SIZE - 1) // 2
    x = np.arange(-half, half + 1, dtype=np.float64)
    w = np.exp(-0.5 * (x / WIN_SIGMA) ** 2)
    return w / w.sum()


_W1D = _window()


def _check_pair(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise InvalidParameterError(f"image shapes differ: {a.shape} vs {b.shape}")
    if a.ndim == 2:
        a = a[:, :, None]
        b = b[:, :, None]
    if a.ndim != 3:
        raise InvalidParameterError("images must be (H, W) or (H, W, C)")
    if a.shape[0] < WIN_SIZE or a.shape[1] < WIN_SIZE:
        raise InvalidParameterError(
            f"images must be at least {WIN_SIZE}x{WIN_SIZE} for SSIM"
        )
    return a, b


def psnr(a: np.ndarray, b: np.ndarray) -> float:
    """Peak signal-to-noise ratio for unit-range images, capped at 99 dB."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise InvalidParameterError(f"image shapes differ: {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse <= 0.0:
        return PSNR_CAP
    return min(10.0 * np.log10(1.0 / mse), PSNR_CAP)


def _filter_valid(x: np.ndarray) -> np.ndarray:
    """Separable Gaussian correlation keeping fully-covered positions only."""
    y = sliding_window_view(x, WIN_SIZE, axis=0) @ _W1D
    return sliding_window_view(y, WIN_SIZE, axis=1) @ _W1D


def _spread_full(f: np.ndarray, out_shape) -> np.ndarray:
    """Adjoint of _filter_valid: spread a valid-position field back onto
    pixels (full correlation with the same separable window)."""
    pad = WIN_SIZE - 1
    g = np.pad(f, ((pad, pad), (0, 0)))
    g = sliding_window_view(g, WIN_SIZE, axis=0) @ _W1D
    g = np.pad(g, ((0, 0), (pad, pad)))
    g = sliding_window_view(g, WIN_SIZE, axis=1) @ _W1D
    if g.shape != out_shape:
        raise AssertionError("spread shape mismatch")
    return g


def _ssim_fields(x, y, data_range):
    c1 = (K1 * data_range) ** 2
    c2 = (K2 * data_range) ** 2
    ux = _filter_valid(x)
    uy = _filter_valid(y)
    uxx = _filter_valid(x * x)
    uyy = _filter_valid(y * y)
    uxy = _filter_valid(x * y)
    vx = uxx - ux * ux
    vy = uyy - uy * uy
    vxy = uxy - ux * uy
    a1 = 2.0 * ux * uy + c1
    a2 = 2.0 * vxy + c2
    b1 = ux * ux + uy * uy + c1
    b2 = vx + vy + c2
    s = (a1 * a2) / (b1 * b2)
    return {"ux": ux, "uy": uy, "vx": vx, "vxy": vxy,
            "a1": a1, "a2": a2, "b1": b1, "b2": b2, "s": s}


def ssim(a: np.ndarray, b: np.ndarray, data_range: float = 1.0) -> float:
    a, b = _check_pair(a, b)
    if data_range <= 0.0:
        raise InvalidParameterError("data_range must be positive")
    vals = [
        float(np.mean(_ssim_fields(a[:, :, ch], b[:, :, ch], data_range)["s"]))
        for ch in range(a.shape[2])
    ]
    return float(np.mean(vals))


def dssim(a: np.ndarray, b: np.ndarray, data_range: float = 1.0) -> float:
    """Structural dissimilarity (1 - SSIM) / 2."""
    return (1.0 - ssim(a, b, data_range)) / 2.0


def ssim_with_grad(a: np.ndarray, b: np.ndarray, data_range: float = 1.0):
    """SSIM value and its gradient with respect to `a`.

    Returns (value, grad) with grad shaped like `a` (trailing channel axis
    added for 2D inputs is squeezed away again).
    """
    squeeze = np.asarray(a).ndim == 2
    a, b = _check_pair(a, b)
    if data_range <= 0.0:
        raise InvalidParameterError("data_range must be positive")
    n_ch = a.shape[2]
    n_pos = (a.shape[0] - WIN_SIZE + 1) * (a.shape[1] - WIN_SIZE + 1)
    grad = np.zeros_like(a)
    total = 0.0
    for ch in range(n_ch):
        x = a[:, :, ch]
        y = b[:, :, ch]
        f = _ssim_fields(x, y, data_range)
        total += float(np.mean(f["s"]))
        a1, a2, b1, b2 = f["a1"], f["a2"], f["b1"], f["b2"]
        ux, uy = f["ux"], f["uy"]
        denom = b1 * b2
        d_mu = 2.0 * uy * a2 / denom - 2.0 * ux * a1 * a2 / (b1 * denom)
        d_vx = -a1 * a2 / (denom * b2)
        d_vxy = 2.0 * a1 / denom
        shape = x.shape
        g = (
            _spread_full(d_mu, shape)
            + 2.0 * x * _spread_full(d_vx, shape)
            - 2.0 * _spread_full(d_vx * ux, shape)
            + y * _spread_full(d_vxy, shape)
            - _spread_full(d_vxy * uy, shape)
        )
        grad[:, :, ch] = g / (n_pos * n_ch)
    value = total / n_ch
    if squeeze:
        grad = grad[:, :, 0]
    return value, grad


def dssim_with_grad(a: np.ndarray, b: np.ndarray, data_range: float = 1.0):
    value, grad = ssim_with_grad(a, b, data_range)
    return (1.0 - value) / 2.0, -0.5 * grad
