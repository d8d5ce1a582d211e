"""Structural similarity with an analytic input gradient.

Pinned definition: per-channel SSIM with an 11x11 Gaussian window
(sigma 1.5, normalized), C1 = 0.01^2, C2 = 0.03^2 for unit data range,
windows fully inside the image (no padding), final score the mean over
all valid window positions and channels.

The gradient is derived by treating the three windowed moments
u_x = w*x, u_xx = w*x^2, u_xy = w*(x y) as the independent quantities
and pushing the per-window sensitivities back through the window
correlation (whose adjoint is zero-padded correlation for a symmetric
kernel).
"""

from __future__ import annotations

import numpy as np

from .errors import ContractViolation

WINDOW_SIZE = 11
WINDOW_SIGMA = 1.5
C1 = 0.01 ** 2
C2 = 0.03 ** 2


def gaussian_window(size: int = WINDOW_SIZE, sigma: float = WINDOW_SIGMA
                    ) -> np.ndarray:
    offsets = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    g = np.exp(-0.5 * (offsets / sigma) ** 2)
    return g / g.sum()


def _corr_valid(img: np.ndarray, g: np.ndarray) -> np.ndarray:
    """Separable valid-mode correlation of a 2D array with g x g."""
    k = g.shape[0]
    h, w = img.shape
    rows = np.zeros((h, w - k + 1))
    for i in range(k):
        rows += g[i] * img[:, i:w - k + 1 + i]
    out = np.zeros((h - k + 1, w - k + 1))
    for i in range(k):
        out += g[i] * rows[i:h - k + 1 + i, :]
    return out


def _corr_full(img: np.ndarray, g: np.ndarray) -> np.ndarray:
    k = g.shape[0]
    padded = np.pad(img, k - 1)
    return _corr_valid(padded, g)


def _channel_moments(x: np.ndarray, y: np.ndarray, g: np.ndarray):
    ux = _corr_valid(x, g)
    uy = _corr_valid(y, g)
    uxx = _corr_valid(x * x, g)
    uyy = _corr_valid(y * y, g)
    uxy = _corr_valid(x * y, g)
    return ux, uy, uxx, uyy, uxy


def _ssim_terms(ux, uy, uxx, uyy, uxy):
    a1 = 2.0 * ux * uy + C1
    a2 = 2.0 * (uxy - ux * uy) + C2
    b1 = ux * ux + uy * uy + C1
    b2 = (uxx - ux * ux) + (uyy - uy * uy) + C2
    return a1, a2, b1, b2


def _require_fit(shape) -> None:
    if shape[0] < WINDOW_SIZE or shape[1] < WINDOW_SIZE:
        raise ContractViolation(
            f"image {shape[:2]} smaller than the {WINDOW_SIZE}x{WINDOW_SIZE} "
            f"SSIM window")


def ssim_map(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Per-channel SSIM over valid windows; returns (H-10, W-10, C)."""
    x = np.atleast_3d(np.asarray(x, dtype=np.float64))
    y = np.atleast_3d(np.asarray(y, dtype=np.float64))
    if x.shape != y.shape:
        raise ContractViolation(f"shape mismatch {x.shape} vs {y.shape}")
    _require_fit(x.shape)
    g = gaussian_window()
    maps = []
    for c in range(x.shape[2]):
        a1, a2, b1, b2 = _ssim_terms(*_channel_moments(x[:, :, c], y[:, :, c], g))
        maps.append((a1 * a2) / (b1 * b2))
    return np.stack(maps, axis=2)


def ssim(x: np.ndarray, y: np.ndarray) -> float:
    return float(np.mean(ssim_map(x, y)))


def ssim_and_grad(x: np.ndarray, y: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean SSIM and its gradient with respect to x. y is a constant."""
    x = np.atleast_3d(np.asarray(x, dtype=np.float64))
    y = np.atleast_3d(np.asarray(y, dtype=np.float64))
    if x.shape != y.shape:
        raise ContractViolation(f"shape mismatch {x.shape} vs {y.shape}")
    _require_fit(x.shape)
    g = gaussian_window()
    n_map = (x.shape[0] - WINDOW_SIZE + 1) * (x.shape[1] - WINDOW_SIZE + 1) \
        * x.shape[2]
    total = 0.0
    grad = np.zeros_like(x)
    for c in range(x.shape[2]):
        xc, yc = x[:, :, c], y[:, :, c]
        ux, uy, uxx, uyy, uxy = _channel_moments(xc, yc, g)
        a1, a2, b1, b2 = _ssim_terms(ux, uy, uxx, uyy, uxy)
        denom = b1 * b2
        s = (a1 * a2) / denom
        total += float(s.sum())
        ds_dux = (2.0 * uy * (a2 - a1)) / denom \
            - 2.0 * ux * (a1 * a2) * (b2 - b1) / denom**2
        ds_duxx = -(a1 * a2) / (b1 * b2 * b2)
        ds_duxy = 2.0 * a1 / denom
        grad[:, :, c] = (_corr_full(ds_dux, g)
                         + 2.0 * xc * _corr_full(ds_duxx, g)
                         + yc * _corr_full(ds_duxy, g)) / n_map
    return total / n_map, grad
