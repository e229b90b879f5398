"""Color-space conversions, LAB histograms and the CIEDE2000 color difference.

All conversions assume sRGB primaries, the sRGB transfer curve and a D65
white point. Array functions accept any leading shape with a trailing axis
of size 3.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

SRGB_TO_XYZ = np.array(
    [
        [0.4124564, 0.3575761, 0.1804375],
        [0.2126729, 0.7151522, 0.0721750],
        [0.0193339, 0.1191920, 0.9503041],
    ]
)
XYZ_TO_SRGB = np.linalg.inv(SRGB_TO_XYZ)
# White is defined as the image of RGB (1, 1, 1) so that white maps to a=b=0 exactly.
D65_WHITE = SRGB_TO_XYZ.sum(axis=1)

_DELTA = 6.0 / 29.0
_DELTA3 = _DELTA**3

L_RANGE = (0.0, 100.0)
AB_RANGE = (-128.0, 128.0)


class ColorDomainError(ValueError):
    """Raised when an input color lies outside the supported domain."""


@dataclass(frozen=True)
class LabColor:
    L: float
    a: float
    b: float

    def as_array(self) -> np.ndarray:
        return np.array([self.L, self.a, self.b], dtype=float)


@dataclass(frozen=True)
class Ciede2000Breakdown:
    """Intermediate terms of one CIEDE2000 evaluation."""

    dLp: float
    dCp: float
    dHp: float
    sL: float
    sC: float
    sH: float
    rT: float
    kL: float = 1.0
    kC: float = 1.0
    kH: float = 1.0


@dataclass(frozen=True)
class ToneHistogram:
    """Marginal normalized L, a, b histograms; ``counts`` has shape (3, bins)."""

    bins_per_channel: int
    counts: np.ndarray

    def flat(self) -> np.ndarray:
        return self.counts.reshape(-1)


# -- transfer curves -------------------------------------------------------


def srgb_decode(v: np.ndarray) -> np.ndarray:
    """Gamma-encoded sRGB to linear light."""
    v = np.asarray(v, dtype=float)
    return np.where(v <= 0.04045, v / 12.92, ((v + 0.055) / 1.055) ** 2.4)


def srgb_encode(v: np.ndarray) -> np.ndarray:
    """Linear light to gamma-encoded sRGB. Negative inputs are treated as 0."""
    v = np.asarray(v, dtype=float)
    safe = np.maximum(v, 0.0)
    return np.where(v <= 0.0031308, 12.92 * v, 1.055 * safe ** (1.0 / 2.4) - 0.055)


def _lab_f(t: np.ndarray) -> np.ndarray:
    return np.where(t > _DELTA3, np.cbrt(t), t / (3 * _DELTA**2) + 4.0 / 29.0)


def _lab_f_inv(u: np.ndarray) -> np.ndarray:
    return np.where(u > _DELTA, u**3, 3 * _DELTA**2 * (u - 4.0 / 29.0))


# -- conversions -----------------------------------------------------------


def srgb_to_lab(rgb: np.ndarray, check: bool = True) -> np.ndarray:
    """Convert sRGB values in [0, 1] to CIELAB.

    Args:
        rgb: array of shape (..., 3).
        check: raise :class:`ColorDomainError` on values outside [0, 1].

    Returns:
        Array of the same shape holding (L*, a*, b*).
    """
    rgb = np.asarray(rgb, dtype=float)
    if rgb.shape[-1] != 3:
        raise ColorDomainError(f"expected trailing axis of size 3, got shape {rgb.shape}")
    if check and rgb.size and (rgb.min() < 0.0 or rgb.max() > 1.0 or not np.all(np.isfinite(rgb))):
        raise ColorDomainError("RGB channels must lie in [0, 1]")
    xyz = srgb_decode(rgb) @ SRGB_TO_XYZ.T
    f = _lab_f(xyz / D65_WHITE)
    L = 116.0 * f[..., 1] - 16.0
    a = 500.0 * (f[..., 0] - f[..., 1])
    b = 200.0 * (f[..., 1] - f[..., 2])
    return np.stack([L, a, b], axis=-1)


def lab_to_srgb(lab: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Convert CIELAB to sRGB, clamping out-of-gamut results.

    Returns:
        ``(rgb, out_of_gamut)`` where ``out_of_gamut`` is a boolean array over
        the leading shape, true wherever clamping changed the color.
    """
    lab = np.asarray(lab, dtype=float)
    fy = (lab[..., 0] + 16.0) / 116.0
    fx = fy + lab[..., 1] / 500.0
    fz = fy - lab[..., 2] / 200.0
    xyz = _lab_f_inv(np.stack([fx, fy, fz], axis=-1)) * D65_WHITE
    lin = xyz @ XYZ_TO_SRGB.T
    tol = 1e-9
    out_of_gamut = np.any((lin < -tol) | (lin > 1.0 + tol), axis=-1)
    rgb = np.clip(srgb_encode(np.clip(lin, 0.0, 1.0)), 0.0, 1.0)
    return rgb, out_of_gamut


def rgb_to_lab(c) -> LabColor:
    """Scalar form of :func:`srgb_to_lab` for one RGB triple."""
    L, a, b = srgb_to_lab(np.asarray(c, dtype=float).reshape(3))
    return LabColor(float(L), float(a), float(b))


def lab_to_rgb(c: LabColor) -> tuple[tuple[float, float, float], bool]:
    """Scalar inverse conversion; returns the RGB triple and the gamut flag."""
    rgb, flag = lab_to_srgb(c.as_array())
    return (float(rgb[0]), float(rgb[1]), float(rgb[2])), bool(flag)


# -- CIEDE2000 -------------------------------------------------------------


def _ciede2000_terms(lab1, lab2, kL=1.0, kC=1.0, kH=1.0):
    L1, a1, b1 = lab1[..., 0], lab1[..., 1], lab1[..., 2]
    L2, a2, b2 = lab2[..., 0], lab2[..., 1], lab2[..., 2]

    c_mean = 0.5 * (np.hypot(a1, b1) + np.hypot(a2, b2))
    c7 = c_mean**7
    g = 0.5 * (1.0 - np.sqrt(c7 / (c7 + 25.0**7)))
    a1p = (1.0 + g) * a1
    a2p = (1.0 + g) * a2
    c1p = np.hypot(a1p, b1)
    c2p = np.hypot(a2p, b2)
    # atan2(0, 0) is 0, which is the convention for achromatic colors.
    h1p = np.degrees(np.arctan2(b1, a1p)) % 360.0
    h2p = np.degrees(np.arctan2(b2, a2p)) % 360.0

    chroma_zero = (c1p * c2p) == 0
    dh = h2p - h1p
    dh = np.where(dh > 180.0, dh - 360.0, dh)
    dh = np.where(dh < -180.0, dh + 360.0, dh)
    dh = np.where(chroma_zero, 0.0, dh)

    dLp = L2 - L1
    dCp = c2p - c1p
    dHp = 2.0 * np.sqrt(c1p * c2p) * np.sin(np.radians(dh) / 2.0)

    Lm = 0.5 * (L1 + L2)
    Cm = 0.5 * (c1p + c2p)
    hsum = h1p + h2p
    hm = np.where(
        np.abs(h1p - h2p) <= 180.0,
        0.5 * hsum,
        np.where(hsum < 360.0, 0.5 * (hsum + 360.0), 0.5 * (hsum - 360.0)),
    )
    hm = np.where(chroma_zero, hsum, hm)

    rad = np.radians
    T = (
        1.0
        - 0.17 * np.cos(rad(hm - 30.0))
        + 0.24 * np.cos(rad(2.0 * hm))
        + 0.32 * np.cos(rad(3.0 * hm + 6.0))
        - 0.20 * np.cos(rad(4.0 * hm - 63.0))
    )
    dtheta = 30.0 * np.exp(-(((hm - 275.0) / 25.0) ** 2))
    Cm7 = Cm**7
    Rc = 2.0 * np.sqrt(Cm7 / (Cm7 + 25.0**7))
    Lm50 = (Lm - 50.0) ** 2
    sL = 1.0 + 0.015 * Lm50 / np.sqrt(20.0 + Lm50)
    sC = 1.0 + 0.045 * Cm
    sH = 1.0 + 0.015 * Cm * T
    rT = -np.sin(rad(2.0 * dtheta)) * Rc

    tl = dLp / (kL * sL)
    tc = dCp / (kC * sC)
    th = dHp / (kH * sH)
    de = np.sqrt(np.maximum(tl * tl + tc * tc + th * th + rT * tc * th, 0.0))
    return de, (dLp, dCp, dHp, sL, sC, sH, rT)


def delta_e2000(lab1: np.ndarray, lab2: np.ndarray, k=(1.0, 1.0, 1.0)) -> np.ndarray:
    """Vectorized CIEDE2000 between two LAB arrays of matching shape (..., 3)."""
    lab1 = np.asarray(lab1, dtype=float)
    lab2 = np.asarray(lab2, dtype=float)
    if lab1.shape != lab2.shape:
        raise ValueError(f"shape mismatch: {lab1.shape} vs {lab2.shape}")
    de, _ = _ciede2000_terms(lab1, lab2, *k)
    return de


def ciede2000(a: LabColor, b: LabColor, k=(1.0, 1.0, 1.0)) -> tuple[float, Ciede2000Breakdown]:
    """CIEDE2000 between two colors, with every intermediate term.

    ``k`` holds the parametric factors (kL, kC, kH); all must be positive.
    """
    kL, kC, kH = (float(v) for v in k)
    if min(kL, kC, kH) <= 0:
        raise ValueError("parametric factors must be positive")
    de, terms = _ciede2000_terms(a.as_array(), b.as_array(), kL, kC, kH)
    terms = [float(t) for t in terms]
    return float(de), Ciede2000Breakdown(*terms, kL=kL, kC=kC, kH=kH)


def mean_delta_e(x: np.ndarray, y: np.ndarray) -> float:
    """Mean per-pixel CIEDE2000 between two RGB images of equal size."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if x.shape != y.shape:
        raise ValueError(f"image dimensions differ: {x.shape} vs {y.shape}")
    return float(np.mean(delta_e2000(srgb_to_lab(x), srgb_to_lab(y))))


# -- histograms ------------------------------------------------------------

CHANNEL_RANGES = (L_RANGE, AB_RANGE, AB_RANGE)


def bin_indices(values: np.ndarray, lo: float, hi: float, bins: int) -> np.ndarray:
    """Half-open bins over [lo, hi]; the last bin is closed, out-of-range values clip."""
    # Rounding suppresses ~1e-14 noise that would flip a*=0 across the central bin edge.
    v = np.round(np.asarray(values, dtype=float), 9)
    idx = np.floor((v - lo) / (hi - lo) * bins).astype(np.int64)
    return np.clip(idx, 0, bins - 1)


def lab_histogram(x: np.ndarray, bins: int = 16) -> ToneHistogram:
    """Marginal normalized histograms of an RGB image's L, a and b channels."""
    if bins < 2:
        raise ValueError("bins must be >= 2")
    lab = srgb_to_lab(np.asarray(x, dtype=float)).reshape(-1, 3)
    if lab.shape[0] == 0:
        raise ValueError("empty image")
    counts = np.zeros((3, bins))
    for ch, (lo, hi) in enumerate(CHANNEL_RANGES):
        idx = bin_indices(lab[:, ch], lo, hi, bins)
        counts[ch] = np.bincount(idx, minlength=bins) / lab.shape[0]
    return ToneHistogram(bins, counts)


def histogram_distance(p: ToneHistogram, q: ToneHistogram) -> float:
    """Mean over channels of the L1 distance between frequencies, in [0, 2]."""
    if p.counts.shape != q.counts.shape:
        raise ValueError("histograms have different bin counts")
    return float(np.abs(p.counts - q.counts).sum(axis=-1).mean())
