"""Image-quality metrics: MSE, PSNR, SSIM and Pearson correlation.

All functions take single-channel images as ``[H, W]`` or ``[1, H, W]``
arrays (or tensors) and return Python floats.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

PSNR_SENTINEL = 99.0


def _image(x, name: str) -> np.ndarray:
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim == 3 and arr.shape[0] == 1:
        arr = arr[0]
    if arr.ndim != 2:
        raise ValueError(f"{name}: expected a single-channel image, got shape {list(arr.shape)}")
    return arr


def _pair(pred, target) -> tuple[np.ndarray, np.ndarray]:
    p, t = _image(pred, "pred"), _image(target, "target")
    if p.shape != t.shape:
        raise ValueError(f"shape mismatch: {list(p.shape)} vs {list(t.shape)}")
    return p, t


def mse(pred, target) -> float:
    p, t = _pair(pred, target)
    d = p - t
    return float(np.mean(d * d))


def psnr(pred, target, max_val: float = 1.0) -> float:
    """Peak signal-to-noise ratio in dB; identical images give the 99 dB sentinel."""
    if max_val <= 0:
        raise ValueError("max_val must be positive")
    err = mse(pred, target)
    if err == 0.0:
        return PSNR_SENTINEL
    return float(10.0 * np.log10(max_val**2 / err))


@dataclass(frozen=True)
class SsimConfig:
    window: int = 11
    sigma: float = 1.5
    k1: float = 0.01
    k2: float = 0.03
    dynamic_range: float = 1.0

    def __post_init__(self):
        if self.window % 2 == 0 or self.window < 1:
            raise ValueError(f"SSIM window must be odd, got {self.window}")

    def weights(self) -> np.ndarray:
        r = np.arange(self.window) - self.window // 2
        w = np.exp(-(r * r) / (2.0 * self.sigma**2))
        return w / w.sum()


def _filter_valid(img: np.ndarray, w: np.ndarray) -> np.ndarray:
    # separable Gaussian, valid region only
    k = w.size
    rows = sliding_window_view(img, k, axis=1) @ w
    return sliding_window_view(rows, k, axis=0) @ w


def ssim(pred, target, cfg: SsimConfig = SsimConfig()) -> float:
    x, y = _pair(pred, target)
    if min(x.shape) < cfg.window:
        raise ValueError(f"image {list(x.shape)} is smaller than the {cfg.window}px SSIM window")
    w = cfg.weights()
    c1 = (cfg.k1 * cfg.dynamic_range) ** 2
    c2 = (cfg.k2 * cfg.dynamic_range) ** 2
    mx = _filter_valid(x, w)
    my = _filter_valid(y, w)
    sxx = _filter_valid(x * x, w) - mx * mx
    syy = _filter_valid(y * y, w) - my * my
    sxy = _filter_valid(x * y, w) - mx * my
    num = (2.0 * (mx * my) + c1) * (2.0 * sxy + c2)
    den = (mx * mx + my * my + c1) * (sxx + syy + c2)
    return float(np.mean(num / den))


def pearson_cc(pred, target) -> float:
    p, t = _pair(pred, target)
    p = p.ravel() - p.mean()
    t = t.ravel() - t.mean()
    sp = np.sqrt(np.dot(p, p))
    st = np.sqrt(np.dot(t, t))
    if sp == 0.0 or st == 0.0:
        raise ValueError("pearson_cc is undefined for a constant image")
    return float(np.clip(np.dot(p, t) / (sp * st), -1.0, 1.0))
