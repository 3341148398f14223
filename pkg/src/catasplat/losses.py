"""Training loss terms (with gradients) and image quality metrics.

All pixel-summed terms are normalized by the number of pixels (means, not
sums) so the loss weights do not depend on resolution.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03
PSNR_CAP = 99.0


@dataclass(frozen=True)
class LossWeights:
    l1: float = 0.05
    dssim: float = 0.2
    volume: float = 0.01
    mask: float = 0.01
    mask_tv: float = 1e-5

    def __post_init__(self) -> None:
        if min(asdict(self).values()) < 0:
            raise ValueError("loss weights must be non-negative")


@dataclass
class LossReport:
    l1: float
    dssim: float
    volume: float
    mask: float
    mask_tv: float
    total: float

    @classmethod
    def from_terms(cls, terms: dict[str, float], weights: LossWeights) -> "LossReport":
        w = asdict(weights)
        total = sum(w[k] * terms[k] for k in w)
        return cls(total=total, **{k: float(terms[k]) for k in w})

    def as_dict(self) -> dict[str, float]:
        return asdict(self)


def _check_same(a: np.ndarray, b: np.ndarray) -> None:
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")


def l1_loss(pred: np.ndarray, gt: np.ndarray) -> tuple[float, np.ndarray]:
    _check_same(pred, gt)
    diff = pred - gt
    return float(np.mean(np.abs(diff))), np.sign(diff) / diff.size


def _gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2
    g = np.exp(-(x**2) / (2 * sigma**2))
    return g / g.sum()


def _blur(x: np.ndarray, g: np.ndarray) -> np.ndarray:
    """Separable 'valid' correlation over the two spatial axes."""
    k = len(g)
    h, w = x.shape[:2]
    tmp = sum(g[i] * x[i : i + h - k + 1] for i in range(k))
    return sum(g[i] * tmp[:, i : i + w - k + 1] for i in range(k))


def _blur_adjoint(y: np.ndarray, g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    k = len(g)
    h, w = shape[:2]
    tmp = np.zeros((y.shape[0], w) + y.shape[2:])
    for i in range(k):
        tmp[:, i : i + w - k + 1] += g[i] * y
    out = np.zeros(shape)
    for i in range(k):
        out[i : i + h - k + 1] += g[i] * tmp
    return out


def _ssim_parts(x: np.ndarray, y: np.ndarray):
    if x.shape[0] < SSIM_WINDOW or x.shape[1] < SSIM_WINDOW:
        raise ValueError(f"image smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} SSIM window")
    g = _gaussian_window()
    c1 = SSIM_K1**2
    c2 = SSIM_K2**2
    mx, my = _blur(x, g), _blur(y, g)
    sxx = _blur(x * x, g) - mx * mx
    syy = _blur(y * y, g) - my * my
    sxy = _blur(x * y, g) - mx * my
    a1 = 2 * mx * my + c1
    a2 = 2 * sxy + c2
    b1 = mx * mx + my * my + c1
    b2 = sxx + syy + c2
    s = a1 * a2 / (b1 * b2)
    return s, (g, mx, my, a1, a2, b1, b2)


def ssim_map(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Per-window SSIM (valid windows only), shape (H-10, W-10[, C])."""
    _check_same(x, y)
    return _ssim_parts(np.asarray(x, dtype=np.float64), np.asarray(y, dtype=np.float64))[0]


def dssim_loss(pred: np.ndarray, gt: np.ndarray) -> tuple[float, np.ndarray]:
    """``(1 - mean SSIM) / 2`` and its gradient w.r.t. ``pred``."""
    _check_same(pred, gt)
    x = np.asarray(pred, dtype=np.float64)
    y = np.asarray(gt, dtype=np.float64)
    s, (g, mx, my, a1, a2, b1, b2) = _ssim_parts(x, y)
    value = (1.0 - s.mean()) / 2.0
    gs = -0.5 / s.size
    # SSIM as a function of the blurred moments B(x), B(x^2), B(xy)
    d_m1 = 2 * my * (a2 - a1) / (b1 * b2) - 2 * mx * s / b1 + 2 * mx * s / b2
    d_m2 = -s / b2
    d_m12 = 2 * a1 / (b1 * b2)
    grad = (
        _blur_adjoint(gs * d_m1, g, x.shape)
        + 2 * x * _blur_adjoint(gs * d_m2, g, x.shape)
        + y * _blur_adjoint(gs * d_m12, g, x.shape)
    )
    return float(value), grad


def reflection_volume_loss(obar: np.ndarray, mask: np.ndarray) -> tuple[float, np.ndarray]:
    """``mean(|obar - m| * m)``: only pixels inside the projected volume count."""
    m = np.asarray(mask, dtype=np.float64)
    _check_same(obar, m)
    diff = obar - m
    return float(np.mean(np.abs(diff) * m)), np.sign(diff) * m / diff.size


def mask_loss(rho: np.ndarray, mask: np.ndarray) -> tuple[float, np.ndarray]:
    m = np.asarray(mask, dtype=np.float64)
    _check_same(rho, m)
    diff = rho - m
    return float(np.mean(np.abs(diff))), np.sign(diff) / diff.size


def mask_tv_loss(rho: np.ndarray) -> tuple[float, np.ndarray]:
    """Anisotropic TV with forward differences; the difference past the last row/column is zero."""
    rho = np.asarray(rho, dtype=np.float64)
    dx = np.zeros_like(rho)
    dy = np.zeros_like(rho)
    dx[:, :-1] = rho[:, 1:] - rho[:, :-1]
    dy[:-1, :] = rho[1:, :] - rho[:-1, :]
    n = rho.size
    value = (np.abs(dx).sum() + np.abs(dy).sum()) / n
    sx, sy = np.sign(dx), np.sign(dy)
    grad = np.zeros_like(rho)
    grad[:, 1:] += sx[:, :-1]
    grad[:, :-1] -= sx[:, :-1]
    grad[1:, :] += sy[:-1, :]
    grad[:-1, :] -= sy[:-1, :]
    return float(value), grad / n


def _region(mask: np.ndarray | None, shape: tuple[int, int]) -> np.ndarray:
    if mask is None:
        return np.ones(shape, dtype=bool)
    m = np.asarray(mask, dtype=bool)
    if m.shape != shape:
        raise ValueError("region mask has the wrong size")
    if not m.any():
        raise ValueError("empty metric region")
    return m


def psnr(pred: np.ndarray, gt: np.ndarray, region: np.ndarray | None = None) -> float:
    """PSNR (peak 1) over the pixels of ``region``; identical inputs give the 99 dB cap."""
    _check_same(pred, gt)
    m = _region(region, pred.shape[:2])
    mse = float(np.mean((np.asarray(pred, dtype=np.float64) - gt)[m] ** 2))
    if mse <= 10 ** (-PSNR_CAP / 10):
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * np.log10(1.0 / mse))


def ssim(pred: np.ndarray, gt: np.ndarray, region: np.ndarray | None = None) -> float:
    """Mean SSIM over windows whose center pixel lies in ``region``."""
    smap = ssim_map(pred, gt)
    m = _region(region, pred.shape[:2])
    half = SSIM_WINDOW // 2
    centers = m[half : m.shape[0] - half, half : m.shape[1] - half]
    if not centers.any():
        raise ValueError("no SSIM window is centered inside the region")
    return float(smap[centers].mean())


def dssim(pred: np.ndarray, gt: np.ndarray, region: np.ndarray | None = None) -> float:
    return (1.0 - ssim(pred, gt, region)) / 2.0
