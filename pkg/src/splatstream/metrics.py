"""Image quality metrics: PSNR and windowed SSIM, plus the SSIM gradient
needed by the trainer's D-SSIM loss term.

SSIM uses an 11x11 Gaussian window (sigma 1.5), C1=0.01**2, C2=0.03**2,
evaluated on luminance (channel mean) over valid (fully covered) windows.
"""

from __future__ import annotations

import numpy as np
from scipy.signal import convolve2d

from .errors import StructuralError
from .rasterizer import RenderedImage

PSNR_CAP_DB = 100.0
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_C1 = 0.01**2
SSIM_C2 = 0.03**2


def _as_pixels(img):
    if isinstance(img, RenderedImage):
        return img.pixels
    return np.asarray(img, dtype=np.float64)


def _check_pair(a, b):
    a = _as_pixels(a)
    b = _as_pixels(b)
    if a.shape != b.shape:
        raise StructuralError(f"resolution mismatch: {a.shape} vs {b.shape}")
    return a, b


def psnr(a, b) -> float:
    """10*log10(1/MSE) with MAX=1, capped at 100 dB for identical images."""
    a, b = _check_pair(a, b)
    mse = float(np.mean((a - b) ** 2))
    if mse <= 0.0:
        return PSNR_CAP_DB
    return min(PSNR_CAP_DB, 10.0 * np.log10(1.0 / mse))


def _window() -> np.ndarray:
    half = (SSIM_WINDOW - 1) / 2.0
    x = np.arange(SSIM_WINDOW) - half
    g = np.exp(-(x**2) / (2.0 * SSIM_SIGMA**2))
    w = np.outer(g, g)
    return w / w.sum()


_WIN = _window()


def _luminance(px: np.ndarray) -> np.ndarray:
    return px.mean(axis=2) if px.ndim == 3 else px


def _ssim_terms(la, lb):
    w = _WIN
    mu_a = convolve2d(la, w, mode="valid")
    mu_b = convolve2d(lb, w, mode="valid")
    t_a = convolve2d(la * la, w, mode="valid")
    t_b = convolve2d(lb * lb, w, mode="valid")
    t_ab = convolve2d(la * lb, w, mode="valid")
    a1 = 2.0 * mu_a * mu_b + SSIM_C1
    a2 = 2.0 * (t_ab - mu_a * mu_b) + SSIM_C2
    b1 = mu_a * mu_a + mu_b * mu_b + SSIM_C1
    b2 = (t_a - mu_a * mu_a) + (t_b - mu_b * mu_b) + SSIM_C2
    return mu_a, mu_b, t_a, t_b, t_ab, a1, a2, b1, b2


def ssim(a, b) -> float:
    """Mean local SSIM of the luminance channels; 1.0 for identical images."""
    a, b = _check_pair(a, b)
    la, lb = _luminance(a), _luminance(b)
    if min(la.shape) < SSIM_WINDOW:
        raise StructuralError(f"image smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} SSIM window")
    *_, a1, a2, b1, b2 = _ssim_terms(la, lb)
    return float(np.mean(a1 * a2 / (b1 * b2)))


def ssim_grad(a, b) -> np.ndarray:
    """d(mean SSIM)/d(pixels of a); same shape as ``a``.

    Derived from the windowed-moment form: with mu = w*a, t_a = w*a^2,
    t_ab = w*(ab), the adjoint of each valid-mode correlation is a
    full-mode convolution with the (symmetric) window.
    """
    a, b = _check_pair(a, b)
    la, lb = _luminance(a), _luminance(b)
    mu_a, mu_b, _, _, _, a1, a2, b1, b2 = _ssim_terms(la, lb)
    denom = b1 * b2
    s = a1 * a2 / denom
    n_win = s.size

    d_mu_a = (2.0 * mu_b * a2 - 2.0 * mu_b * a1) / denom - s * (2.0 * mu_a / b1 - 2.0 * mu_a / b2)
    d_ta = -s / b2
    d_tab = 2.0 * a1 / denom

    w = _WIN
    g = (
        convolve2d(d_mu_a, w, mode="full")
        + 2.0 * la * convolve2d(d_ta, w, mode="full")
        + lb * convolve2d(d_tab, w, mode="full")
    ) / n_win
    if a.ndim == 3:
        return np.repeat(g[:, :, None], 3, axis=2) / 3.0
    return g


def l1(a, b) -> float:
    a, b = _check_pair(a, b)
    return float(np.mean(np.abs(a - b)))


def l1_grad(a, b) -> np.ndarray:
    a, b = _check_pair(a, b)
    return np.sign(a - b) / a.size
