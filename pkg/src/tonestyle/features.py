"""Global tone statistics in CIELAB, with a differentiable soft-binned variant.

The feature vector is ``[hist_L, hist_a, hist_b, mean_Lab, std_Lab]``: three
normalized marginal histograms followed by channel means and standard
deviations divided by ``STAT_SCALE``.
"""

from __future__ import annotations

from typing import Callable

import numpy as np

from .color import CHANNEL_RANGES, D65_WHITE, SRGB_TO_XYZ, _DELTA, bin_indices, srgb_decode, srgb_to_lab

STAT_SCALE = np.array([50.0, 16.0, 16.0])
_STD_EPS = 1e-12


def feature_dim(bins: int = 16) -> int:
    return 3 * bins + 6


def _pixels(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.shape[-1] != 3 or x.size == 0:
        raise ValueError(f"expected a nonempty RGB image, got shape {x.shape}")
    return x.reshape(-1, 3)


def tone_features(x: np.ndarray, bins: int = 16) -> np.ndarray:
    """Hard-binned tone feature vector of dimension ``3 * bins + 6``."""
    lab = srgb_to_lab(np.clip(_pixels(x), 0.0, 1.0))
    n = lab.shape[0]
    hists = []
    for ch, (lo, hi) in enumerate(CHANNEL_RANGES):
        hists.append(np.bincount(bin_indices(lab[:, ch], lo, hi, bins), minlength=bins) / n)
    mean = lab.mean(axis=0)
    std = np.sqrt(np.mean((lab - mean) ** 2, axis=0))
    return np.concatenate([*hists, mean / STAT_SCALE, std / STAT_SCALE])


def srgb_to_lab_jacobian(rgb: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """CIELAB values and per-pixel Jacobians d(L,a,b)/d(r,g,b).

    Args:
        rgb: (N, 3) array in [0, 1].

    Returns:
        ``(lab (N, 3), J (N, 3, 3))``.
    """
    rgb = np.asarray(rgb, dtype=float)
    dlin = np.where(rgb <= 0.04045, 1.0 / 12.92, (2.4 / 1.055) * ((rgb + 0.055) / 1.055) ** 1.4)
    t = (srgb_decode(rgb) @ SRGB_TO_XYZ.T) / D65_WHITE
    cube = t > _DELTA**3
    f = np.where(cube, np.cbrt(t), t / (3 * _DELTA**2) + 4.0 / 29.0)
    df = np.where(cube, 1.0 / (3.0 * np.cbrt(np.where(cube, t, 1.0)) ** 2), 1.0 / (3 * _DELTA**2))
    lab = np.stack([116.0 * f[:, 1] - 16.0, 500.0 * (f[:, 0] - f[:, 1]), 200.0 * (f[:, 1] - f[:, 2])], axis=1)
    mix = np.array([[0.0, 116.0, 0.0], [500.0, -500.0, 0.0], [0.0, 200.0, -200.0]])
    # J = mix . diag(df / white) . M . diag(dlin)
    inner = (df / D65_WHITE)[:, :, None] * SRGB_TO_XYZ[None, :, :] * dlin[:, None, :]
    return lab, np.einsum("ij,njk->nik", mix, inner)


def _soft_hist(v: np.ndarray, lo: float, hi: float, bins: int, sigma: float):
    centers = lo + (np.arange(bins) + 0.5) * (hi - lo) / bins
    d = v[:, None] - centers[None, :]
    logits = -(d * d) / (2.0 * sigma * sigma)
    logits -= logits.max(axis=1, keepdims=True)
    p = np.exp(logits)
    p /= p.sum(axis=1, keepdims=True)
    return p, -d / (sigma * sigma)


def soft_tone_features(
    x: np.ndarray, bandwidth: float = 0.5, bins: int = 16
) -> tuple[np.ndarray, Callable[[np.ndarray], np.ndarray]]:
    """Differentiable tone features using Gaussian soft binning.

    Each pixel spreads unit mass over the bins with weights proportional to
    ``exp(-(v - center)^2 / (2 sigma^2))`` where ``sigma = bandwidth * bin_width``.
    Standard deviations use ``sqrt(var + 1e-12)``. Pixels are clipped to [0, 1];
    clipped coordinates receive zero gradient.

    Returns:
        ``(features, vjp)`` where ``vjp(g)`` maps a cotangent of the feature
        vector to a gradient with the shape of ``x``.
    """
    if bandwidth <= 0:
        raise ValueError("bandwidth must be positive")
    x = np.asarray(x, dtype=float)
    px = _pixels(x)
    inside = (px >= 0.0) & (px <= 1.0)
    lab, J = srgb_to_lab_jacobian(np.clip(px, 0.0, 1.0))
    n = lab.shape[0]
    parts, cache = [], []
    for ch, (lo, hi) in enumerate(CHANNEL_RANGES):
        p, dlogit = _soft_hist(lab[:, ch], lo, hi, bins, bandwidth * (hi - lo) / bins)
        parts.append(p.mean(axis=0))
        cache.append((p, dlogit))
    mean = lab.mean(axis=0)
    centered = lab - mean
    std = np.sqrt(np.mean(centered**2, axis=0) + _STD_EPS)
    feats = np.concatenate([*parts, mean / STAT_SCALE, std / STAT_SCALE])

    def vjp(g: np.ndarray) -> np.ndarray:
        g = np.asarray(g, dtype=float)
        dlab = np.zeros_like(lab)
        for ch, (p, dlogit) in enumerate(cache):
            gp = p * g[ch * bins : (ch + 1) * bins][None, :]
            dlab[:, ch] = (gp * dlogit).sum(axis=1) - gp.sum(axis=1) * (p * dlogit).sum(axis=1)
        g_mean = g[3 * bins : 3 * bins + 3] / STAT_SCALE
        g_std = g[3 * bins + 3 :] / STAT_SCALE
        dlab += g_mean[None, :] + g_std[None, :] * centered / std[None, :]
        dlab /= n
        drgb = np.einsum("nij,ni->nj", J, dlab) * inside
        return drgb.reshape(x.shape)

    return feats, vjp
