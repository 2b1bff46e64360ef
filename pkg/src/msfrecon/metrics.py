"""Image quality metrics: NRMSE, PSNR and windowed SSIM."""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .geometry import Volume


class MetricError(ValueError):
    pass


def _arrays(est, truth):
    a = est.data if isinstance(est, Volume) else np.asarray(est, dtype=np.float64)
    b = truth.data if isinstance(truth, Volume) else np.asarray(truth, dtype=np.float64)
    if a.shape != b.shape:
        raise MetricError(f"shape mismatch {a.shape} vs {b.shape}")
    return a, b


def nrmse(est, truth, normalize: str = "estimate") -> float:
    """``||est - truth|| / ||est||``; ``normalize="truth"`` divides by ``||truth||`` instead."""
    a, b = _arrays(est, truth)
    if normalize not in ("estimate", "truth"):
        raise ValueError("normalize must be 'estimate' or 'truth'")
    ref = a if normalize == "estimate" else b
    denom = np.linalg.norm(ref)
    if denom == 0.0:
        raise MetricError(f"NRMSE undefined: the {normalize} is all zero")
    return float(np.linalg.norm(a - b) / denom)


def psnr(est, truth) -> float:
    """``20 log10(max(truth) / RMSE)`` in dB; ``inf`` when the inputs are identical."""
    a, b = _arrays(est, truth)
    rmse = np.sqrt(np.mean((a - b) ** 2))
    if rmse == 0.0:
        return float("inf")
    return float(20.0 * np.log10(np.max(b) / rmse))


def _ssim_slice(x, y, window, c1, c2):
    wx = sliding_window_view(x, (window, window))
    wy = sliding_window_view(y, (window, window))
    mx = wx.mean(axis=(-2, -1))
    my = wy.mean(axis=(-2, -1))
    vx = (wx * wx).mean(axis=(-2, -1)) - mx * mx
    vy = (wy * wy).mean(axis=(-2, -1)) - my * my
    cxy = (wx * wy).mean(axis=(-2, -1)) - mx * my
    s = ((2 * mx * my + c1) * (2 * cxy + c2)) / ((mx ** 2 + my ** 2 + c1) * (vx + vy + c2))
    return s.mean()


def ssim(est, truth, window: int = 7, k1: float = 0.01, k2: float = 0.03) -> float:
    """Mean SSIM over all fully contained ``window x window`` windows of every XY slice.

    Window statistics are uniform means with population (1/N) moments.  The
    dynamic range is ``max(truth) - min(truth)`` (1 if the truth is flat).
    """
    a, b = _arrays(est, truth)
    if a.ndim == 2:
        a, b = a[None], b[None]
    if min(a.shape[-2:]) < window:
        raise MetricError(f"window {window} larger than slice {a.shape[-2:]}")
    rng = float(np.ptp(b)) or 1.0
    c1 = (k1 * rng) ** 2
    c2 = (k2 * rng) ** 2
    return float(np.mean([_ssim_slice(a[k], b[k], window, c1, c2) for k in range(a.shape[0])]))
