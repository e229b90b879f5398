"""Synthetic content images and parametric tone presets.

These stand in for photo collections and Lightroom-style presets so every
stage can be trained and checked at desk scale with known ground truth.
"""

from __future__ import annotations

from dataclasses import dataclass, asdict

import numpy as np

from .color import mean_delta_e, lab_to_srgb, srgb_decode, srgb_encode, srgb_to_lab
from .features import tone_features
from .lut import Lut3D, lut_from_function
from .scorer import RankingGroup

CATEGORIES = ("portrait", "landscape", "night", "lifestyle", "food", "other")


@dataclass(frozen=True)
class ToneParams:
    """A global photographic edit, applied in this order to gamma-encoded RGB."""

    exposure: float = 0.0  # EV, applied in linear light
    gain_r: float = 1.0  # white-balance gains in linear light
    gain_b: float = 1.0
    contrast: float = 1.0  # S-curve strength around mid gray
    saturation: float = 1.0
    fade: float = 0.0  # black-point lift
    shadow_tint: tuple[float, float, float] = (0.0, 0.0, 0.0)

    def vector(self) -> np.ndarray:
        return np.array(
            [self.exposure, np.log(self.gain_r), np.log(self.gain_b), np.log(self.contrast),
             np.log(self.saturation), self.fade, *self.shadow_tint]
        )

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_vector(cls, v) -> "ToneParams":
        v = np.asarray(v, dtype=float)
        return cls(
            exposure=float(v[0]),
            gain_r=float(np.exp(v[1])),
            gain_b=float(np.exp(v[2])),
            contrast=float(np.exp(v[3])),
            saturation=float(np.exp(v[4])),
            fade=float(max(v[5], 0.0)),
            shadow_tint=tuple(float(t) for t in v[6:9]),
        )


def tone_transform(rgb: np.ndarray, p: ToneParams) -> np.ndarray:
    rgb = np.clip(np.asarray(rgb, dtype=float), 0.0, 1.0)
    lin = srgb_decode(rgb) * (2.0**p.exposure)
    lin = lin * np.array([p.gain_r, 1.0, p.gain_b])
    x = srgb_encode(np.clip(lin, 0.0, 1.0))
    # Contrast: blend toward a logistic S-curve normalized to map [0, 1] onto itself.
    k = 4.0 * p.contrast
    s = 1.0 / (1.0 + np.exp(-k * (x - 0.5)))
    lo, hi = 1.0 / (1.0 + np.exp(k * 0.5)), 1.0 / (1.0 + np.exp(-k * 0.5))
    x = (s - lo) / (hi - lo)
    gray = (x @ np.array([0.299, 0.587, 0.114]))[..., None]
    x = gray + p.saturation * (x - gray)
    shadow = (1.0 - np.clip(gray, 0.0, 1.0)) ** 2
    x = x + shadow * np.array(p.shadow_tint)
    x = p.fade + (1.0 - p.fade) * x
    return np.clip(x, 0.0, 1.0)


def preset_lut(p: ToneParams, n: int = 33, title: str = "") -> Lut3D:
    return lut_from_function(lambda g: tone_transform(g, p), n, title)


def random_tone_params(rng: np.random.Generator, strength: float = 1.0) -> ToneParams:
    u = lambda lo, hi: float(rng.uniform(lo, hi)) * strength  # noqa: E731
    return ToneParams(
        exposure=u(-0.8, 0.8),
        gain_r=float(np.exp(u(-0.3, 0.3))),
        gain_b=float(np.exp(u(-0.3, 0.3))),
        contrast=float(np.exp(u(-0.5, 0.5))),
        saturation=float(np.exp(u(-0.7, 0.5))),
        fade=max(0.0, u(-0.05, 0.15)),
        shadow_tint=tuple(float(v) for v in rng.uniform(-0.06, 0.06, 3) * strength),
    )


def distinct_tone_params(k: int, rng: np.random.Generator, min_distance: float = 0.5) -> list[ToneParams]:
    """Rejection-sample ``k`` parameter sets pairwise at least ``min_distance`` apart."""
    out: list[ToneParams] = []
    tries = 0
    while len(out) < k:
        p = random_tone_params(rng)
        tries += 1
        if all(np.linalg.norm(p.vector() - q.vector()) >= min_distance for q in out) or tries > 200 * k:
            out.append(p)
    return out


def separated_tone_params(k: int, rng: np.random.Generator, pool: int = 400, n_probes: int = 8) -> list[ToneParams]:
    """Greedy farthest-point selection of ``k`` presets from a random pool.

    Two presets are as far apart as the closest pair of their tone features
    over a set of probe contents, so a chosen preset cannot be mimicked by
    another one applied to different content.
    """
    probes = content_images(n_probes, rng, 16)
    cands = [random_tone_params(rng) for _ in range(max(pool, k))]
    feats = np.stack([[tone_features(tone_transform(c, p)) for c in probes] for p in cands])

    def dist_to(i: int) -> np.ndarray:
        d = np.linalg.norm(feats[:, :, None, :] - feats[i][None, None, :, :], axis=-1)
        return d.min(axis=(1, 2))

    chosen = [0]
    dist = dist_to(0)
    while len(chosen) < k:
        i = int(np.argmax(dist))
        chosen.append(i)
        dist = np.minimum(dist, dist_to(i))
    return [cands[i] for i in chosen]


def content_image(rng: np.random.Generator, size: int = 32) -> np.ndarray:
    """A normalized synthetic photo: a soft gradient background plus colored ellipses.

    Colors are drawn in LAB with mid-range lightness and moderate chroma, as
    expected of white-balanced, filter-free content.
    """
    h = w = size
    yy, xx = np.mgrid[0:h, 0:w] / max(size - 1, 1)

    def lab_color(l_lo=30.0, l_hi=75.0, chroma=30.0):
        hue = rng.uniform(0, 2 * np.pi)
        c = rng.uniform(0, chroma)
        rgb, _ = lab_to_srgb(np.array([rng.uniform(l_lo, l_hi), c * np.cos(hue), c * np.sin(hue)]))
        return rgb

    c0, c1 = lab_color(), lab_color()
    angle = rng.uniform(0, 2 * np.pi)
    t = np.clip(0.5 + (xx - 0.5) * np.cos(angle) + (yy - 0.5) * np.sin(angle), 0, 1)[..., None]
    img = (1 - t) * c0 + t * c1
    for _ in range(rng.integers(3, 7)):
        cy, cx = rng.uniform(0, 1, 2)
        ry, rx = rng.uniform(0.08, 0.3, 2)
        mask = (((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2) <= 1.0
        img[mask] = lab_color(25.0, 80.0, 35.0)
    img = img + rng.normal(0, 0.01, img.shape)
    return normalize_exposure_balance(np.clip(img, 0.0, 1.0))


def normalize_exposure_balance(img: np.ndarray, target_l: float = 50.0, iterations: int = 8) -> np.ndarray:
    """White balance and exposure normalization by linear-light channel gains.

    Gains are refined so the mean CIELAB color approaches ``(target_l, 0, 0)``.
    """
    lin = srgb_decode(img)
    gray = srgb_decode(lab_to_srgb(np.array([target_l, 0.0, 0.0]))[0])
    for _ in range(iterations):
        m = srgb_to_lab(np.clip(srgb_encode(np.clip(lin, 0.0, 1.0)), 0.0, 1.0)).reshape(-1, 3).mean(axis=0)
        cast = srgb_decode(lab_to_srgb(m)[0])
        lin = lin * (gray / np.maximum(cast, 1e-6))
    return np.clip(srgb_encode(np.clip(lin, 0.0, 1.0)), 0.0, 1.0)


def content_images(n: int, rng: np.random.Generator, size: int = 32) -> list[np.ndarray]:
    return [content_image(rng, size) for _ in range(n)]


@dataclass
class RetrievalSet:
    """Every preset applied to every content image, split by content."""

    presets: list[ToneParams]
    train_images: list[np.ndarray]
    train_labels: np.ndarray
    query_images: list[np.ndarray]
    query_labels: np.ndarray


def retrieval_benchmark(
    n_presets: int = 20,
    n_contents: int = 50,
    n_train: int = 35,
    size: int = 32,
    seed: int = 0,
) -> RetrievalSet:
    """Contents ``[0, n_train)`` form the training set and gallery; the rest are queries."""
    rng = np.random.default_rng(seed)
    presets = separated_tone_params(n_presets, rng)
    contents = content_images(n_contents, rng, size)
    train, query = [], []
    for ci, c in enumerate(contents):
        for pi, p in enumerate(presets):
            (train if ci < n_train else query).append((tone_transform(c, p), pi))
    return RetrievalSet(
        presets,
        [im for im, _ in train],
        np.array([lab for _, lab in train]),
        [im for im, _ in query],
        np.array([lab for _, lab in query]),
    )


def preset_dissimilarity(p: ToneParams, q: ToneParams, probe: np.ndarray) -> float:
    """Mean CIEDE2000 between two presets' renderings of ``probe``."""
    return mean_delta_e(tone_transform(probe, p), tone_transform(probe, q))


def ranking_groups(n_groups: int, rng: np.random.Generator, size: int = 32) -> list[RankingGroup]:
    """Anchor and candidates are different contents under related presets.

    Candidate presets blend the anchor preset toward random presets by
    varying amounts; the reference ranking sorts them by the perceptual
    difference of their effect on the anchor content, a stand-in for human
    judgment that the scorer never observes directly.
    """
    groups = []
    for _ in range(n_groups):
        anchor_p = random_tone_params(rng)
        contents = content_images(5, rng, size)
        cand_p = []
        for alpha in rng.uniform(0.1, 1.0, 4):
            other = random_tone_params(rng).vector()
            cand_p.append(ToneParams.from_vector((1 - alpha) * anchor_p.vector() + alpha * other))
        dis = [preset_dissimilarity(anchor_p, q, contents[0]) for q in cand_p]
        groups.append(
            RankingGroup(
                tone_transform(contents[0], anchor_p),
                [tone_transform(c, q) for c, q in zip(contents[1:], cand_p)],
                tuple(int(i) for i in np.argsort(dis, kind="stable")),
            )
        )
    return groups


@dataclass
class FlowTriplet:
    """Content, a reference in the target tone on other content, and the ground truth."""

    content: np.ndarray
    reference: np.ndarray
    target: np.ndarray
    preset: int
    reference_preset: int

    @property
    def mismatched(self) -> bool:
        return self.preset != self.reference_preset


def flow_triplets(
    n: int,
    presets: list[ToneParams],
    rng: np.random.Generator,
    size: int = 32,
    mismatch: float = 0.0,
) -> list[FlowTriplet]:
    """Draw ``n`` triplets; a ``mismatch`` fraction gets a reference from another preset."""
    if not 0.0 <= mismatch <= 1.0:
        raise ValueError("mismatch must lie in [0, 1]")
    n_bad = int(round(mismatch * n))
    bad = set(rng.choice(n, n_bad, replace=False).tolist()) if n_bad else set()
    out = []
    for i in range(n):
        content, other = content_images(2, rng, size)
        p = int(rng.integers(len(presets)))
        q = p
        if i in bad and len(presets) > 1:
            q = int((p + rng.integers(1, len(presets))) % len(presets))
        out.append(
            FlowTriplet(content, tone_transform(other, presets[q]), tone_transform(content, presets[p]), p, q)
        )
    return out
