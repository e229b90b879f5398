"""Pixelwise appearance perturbations: scorer-training degradations and
online content augmentation for triplet construction."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.ndimage import uniform_filter

from .color import SRGB_TO_XYZ, srgb_decode, srgb_encode
from .lut import apply_lut, random_perturbation_lut

_Y_WEIGHTS = SRGB_TO_XYZ[1]


def desaturate(x: np.ndarray, factor: float) -> np.ndarray:
    """Blend toward luminance in linear light; ``factor`` 0 gives neutral gray."""
    lin = srgb_decode(np.clip(x, 0.0, 1.0))
    y = (lin @ _Y_WEIGHTS)[..., None]
    return np.clip(srgb_encode(y + factor * (lin - y)), 0.0, 1.0)


def exposure_shift(x: np.ndarray, ev: float) -> np.ndarray:
    """Scale linear light by ``2**ev`` and clip."""
    return np.clip(srgb_encode(np.clip(srgb_decode(np.clip(x, 0.0, 1.0)) * 2.0**ev, 0.0, 1.0)), 0.0, 1.0)


def box_blur(x: np.ndarray, radius: int) -> np.ndarray:
    size = 2 * int(radius) + 1
    return uniform_filter(np.asarray(x, dtype=float), size=(size, size, 1), mode="nearest")


def add_noise(x: np.ndarray, sigma: float, rng: np.random.Generator) -> np.ndarray:
    return np.clip(x + rng.normal(0.0, sigma, np.shape(x)), 0.0, 1.0)


@dataclass
class DegradationConfig:
    """Probabilities and ranges of the scorer-training degradations."""

    p_blur: float = 0.25
    blur_radius: tuple[int, int] = (1, 3)
    p_noise: float = 0.25
    noise_sigma: tuple[float, float] = (0.01, 0.05)
    p_desaturate: float = 0.25
    desaturate_factor: tuple[float, float] = (0.5, 1.0)
    p_exposure: float = 0.25
    exposure_ev: tuple[float, float] = (-1.0, 0.0)


def degrade(x: np.ndarray, cfg: DegradationConfig, rng: np.random.Generator) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if rng.random() < cfg.p_blur:
        x = box_blur(x, rng.integers(cfg.blur_radius[0], cfg.blur_radius[1] + 1))
    if rng.random() < cfg.p_noise:
        x = add_noise(x, rng.uniform(*cfg.noise_sigma), rng)
    if rng.random() < cfg.p_desaturate:
        x = desaturate(x, rng.uniform(*cfg.desaturate_factor))
    if rng.random() < cfg.p_exposure:
        x = exposure_shift(x, rng.uniform(*cfg.exposure_ev))
    return x


@dataclass
class AugmentConfig:
    """Online content augmentation applied when assembling triplets."""

    p_desaturate: float = 0.3
    desaturate_factor: tuple[float, float] = (0.5, 1.0)
    p_exposure: float = 0.3
    exposure_ev: tuple[float, float] = (-1.0, 0.0)
    p_lut: float = 0.3
    lut_strength: float = 0.05
    lut_size: int = 17

    def __post_init__(self):
        if self.exposure_ev[1] > 0:
            raise ValueError("exposure augmentation only reduces exposure")


def augment_content(x: np.ndarray, cfg: AugmentConfig, rng: np.random.Generator) -> np.ndarray:
    """Random subset of desaturation, exposure reduction and a LUT perturbation."""
    x = np.asarray(x, dtype=float)
    if rng.random() < cfg.p_desaturate:
        x = desaturate(x, rng.uniform(*cfg.desaturate_factor))
    if rng.random() < cfg.p_exposure:
        x = exposure_shift(x, rng.uniform(*cfg.exposure_ev))
    if rng.random() < cfg.p_lut:
        seed = int(rng.integers(0, 2**31 - 1))
        x = apply_lut(random_perturbation_lut(seed, cfg.lut_strength, n=cfg.lut_size), x)
    return x
