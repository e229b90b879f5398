"""Evaluation metrics: edge-map SSIM content preservation, CIEDE2000, PSNR and
adapters for external (pretrained) scorers."""

from __future__ import annotations

import hashlib
import json
import logging
import math
import re
import subprocess
import tempfile
import threading
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .color import mean_delta_e
from .imageio import write_image

logger = logging.getLogger(__name__)

PSNR_CAP = 99.0
LUMA_WEIGHTS = np.array([0.299, 0.587, 0.114])


class ScorerUnavailable(RuntimeError):
    """An external scorer timed out, failed, or printed something unparseable."""


@dataclass
class SsimConfig:
    window: int = 11
    c1: float = (0.01 * 1.0) ** 2
    c2: float = (0.03 * 1.0) ** 2

    def __post_init__(self):
        if self.window < 3 or self.window % 2 == 0:
            raise ValueError("SSIM window must be odd and >= 3")
        if self.c1 <= 0 or self.c2 <= 0:
            raise ValueError("SSIM stabilizers must be positive")


def luma(x: np.ndarray) -> np.ndarray:
    return np.asarray(x, dtype=float) @ LUMA_WEIGHTS


def sobel(gray: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Sobel gradients with edge-replicated borders, computed separably.

    Smoothing then differencing keeps flat regions exactly zero.
    """
    p = np.pad(np.asarray(gray, dtype=float), 1, mode="edge")
    sv = p[:-2, :] + 2.0 * p[1:-1, :] + p[2:, :]
    sh = p[:, :-2] + 2.0 * p[:, 1:-1] + p[:, 2:]
    return sv[:, 2:] - sv[:, :-2], sh[2:, :] - sh[:-2, :]


def edge_map(x: np.ndarray, percentile: float = 99.0) -> np.ndarray:
    """Gradient-magnitude edge map in [0, 1].

    Luma is filtered with 3x3 Sobel kernels; the magnitude is divided by its
    ``percentile``-th value (the maximum if that is zero) and clamped.
    """
    x = np.asarray(x, dtype=float)
    if x.ndim != 3 or x.shape[0] < 3 or x.shape[1] < 3:
        raise ValueError("edge_map needs an RGB image of at least 3x3 pixels")
    gray = luma(x)
    mag = np.hypot(*sobel(gray))
    scale = np.percentile(mag, percentile)
    if scale <= 0:
        scale = mag.max()
    if scale <= 0:
        return np.zeros_like(mag)
    return np.clip(mag / scale, 0.0, 1.0)


def ssim(x: np.ndarray, y: np.ndarray, cfg: SsimConfig | None = None) -> float:
    """Mean SSIM over all fully contained square windows with uniform weights.

    Window statistics use population (1/n) moments. Inputs smaller than the
    window use the largest odd window that fits.
    """
    cfg = cfg or SsimConfig()
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if x.shape != y.shape:
        raise ValueError(f"dimension mismatch: {x.shape} vs {y.shape}")
    if x.ndim != 2:
        raise ValueError("ssim expects 2-D (grayscale or edge) inputs")
    win = min(cfg.window, x.shape[0], x.shape[1])
    if win % 2 == 0:
        win -= 1
    if win < 1:
        raise ValueError("image too small for SSIM")

    def wmean(a):
        return sliding_window_view(a, (win, win)).mean(axis=(-1, -2))

    mx, my = wmean(x), wmean(y)
    vx = wmean(x * x) - mx * mx
    vy = wmean(y * y) - my * my
    cxy = wmean(x * y) - mx * my
    num = (2 * mx * my + cfg.c1) * (2 * cxy + cfg.c2)
    den = (mx * mx + my * my + cfg.c1) * (vx + vy + cfg.c2)
    return float(np.mean(num / den))


def content_preservation(output: np.ndarray, gt: np.ndarray, cfg: SsimConfig | None = None) -> float:
    """SSIM between the edge maps of an output image and its ground truth."""
    output = np.asarray(output, dtype=float)
    gt = np.asarray(gt, dtype=float)
    if output.shape != gt.shape:
        raise ValueError(f"dimension mismatch: {output.shape} vs {gt.shape}")
    return ssim(edge_map(output), edge_map(gt), cfg)


def psnr(x: np.ndarray, y: np.ndarray) -> float:
    """PSNR in dB for [0, 1] images, capped at 99 dB."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if x.shape != y.shape:
        raise ValueError(f"dimension mismatch: {x.shape} vs {y.shape}")
    mse = float(np.mean((x - y) ** 2))
    if mse == 0.0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * math.log10(1.0 / mse))


# -- external scorers ------------------------------------------------------

_NUMBER = re.compile(r"^[-+]?(\d+(\.\d*)?|\.\d+)([eE][-+]?\d+)?$")


@dataclass
class ExternalScorer:
    """A program invoked as ``command + image_paths`` that prints one decimal."""

    command: Sequence[str]
    timeout: float = 60.0
    use_cache: bool = True
    launches: int = field(default=0, init=False)
    _cache: dict = field(default_factory=dict, init=False, repr=False)
    _lock: threading.Lock = field(default_factory=threading.Lock, init=False, repr=False)

    def __post_init__(self):
        if isinstance(self.command, str):
            self.command = self.command.split()
        self.command = list(self.command)
        if not self.command:
            raise ValueError("scorer command must be nonempty")


@dataclass
class ConstantScorer:
    """Stub scorer returning a fixed value; stands in for unavailable models."""

    value: float = 0.5
    launches: int = field(default=0, init=False)


def _hash_inputs(command: Sequence[str], paths: Sequence[Path]) -> str:
    h = hashlib.sha256("\0".join(command).encode())
    for p in paths:
        h.update(b"\0")
        h.update(Path(p).read_bytes())
    return h.hexdigest()


def external_score(scorer: ExternalScorer | ConstantScorer, images: Sequence) -> float:
    """Score one or two image files with an external program.

    Results are memoized by a hash of the command and file contents.

    Raises:
        ScorerUnavailable: on timeout, nonzero exit or unparseable output.
    """
    paths = [Path(p) for p in images]
    if not 1 <= len(paths) <= 2:
        raise ValueError("external_score takes one or two image paths")
    if isinstance(scorer, ConstantScorer):
        return float(scorer.value)
    key = _hash_inputs(scorer.command, paths) if scorer.use_cache else None
    if key is not None:
        with scorer._lock:
            if key in scorer._cache:
                return scorer._cache[key]
    try:
        proc = subprocess.run(
            [*scorer.command, *map(str, paths)],
            capture_output=True,
            text=True,
            timeout=scorer.timeout,
        )
    except subprocess.TimeoutExpired as e:
        raise ScorerUnavailable(f"scorer timed out after {scorer.timeout}s") from e
    except OSError as e:
        raise ScorerUnavailable(f"cannot launch scorer: {e}") from e
    finally:
        with scorer._lock:
            scorer.launches += 1
    if proc.returncode != 0:
        raise ScorerUnavailable(f"scorer exited with status {proc.returncode}: {proc.stderr.strip()[:200]}")
    lines = [ln.strip() for ln in proc.stdout.splitlines() if ln.strip()]
    if not lines or not _NUMBER.match(lines[-1]):
        raise ScorerUnavailable(f"unparseable scorer output: {proc.stdout[:200]!r}")
    value = float(lines[-1])
    if key is not None:
        with scorer._lock:
            scorer._cache[key] = value
    return value


def score_arrays(scorer, *images: np.ndarray) -> float:
    """Score in-memory images by writing them to temporary PNG files."""
    if isinstance(scorer, ConstantScorer):
        return float(scorer.value)
    with tempfile.TemporaryDirectory() as tmp:
        paths = []
        for i, img in enumerate(images):
            p = Path(tmp) / f"img{i}.png"
            write_image(p, img)
            paths.append(p)
        return external_score(scorer, paths)


# -- reports ---------------------------------------------------------------


def evaluate_pair(
    output: np.ndarray,
    gt: np.ndarray,
    pair_id: str = "0",
    aes_scorer=None,
    cd_scorer=None,
    cfg: SsimConfig | None = None,
) -> dict:
    """All metrics for one output / ground-truth pair.

    External scores that cannot be computed are reported as ``None``.
    """
    row = {
        "pair_id": pair_id,
        "cp": content_preservation(output, gt, cfg),
        "delta_e": mean_delta_e(output, gt),
        "psnr": psnr(output, gt),
        "aes": None,
        "cd": None,
    }
    if aes_scorer is not None:
        try:
            row["aes"] = score_arrays(aes_scorer, output)
        except ScorerUnavailable as e:
            logger.warning("aesthetic scorer unavailable: %s", e)
    if cd_scorer is not None:
        try:
            row["cd"] = score_arrays(cd_scorer, output, gt)
        except ScorerUnavailable as e:
            logger.warning("color-difference scorer unavailable: %s", e)
    return row


def summarize(rows: list[dict]) -> dict:
    """Mean of each metric over rows, ignoring nulls."""
    out = {}
    for key in ("cp", "delta_e", "psnr", "aes", "cd"):
        vals = [r[key] for r in rows if r.get(key) is not None]
        out[key] = float(np.mean(vals)) if vals else None
    return out


def write_report(rows: list[dict], path) -> None:
    Path(path).write_text(json.dumps(rows, indent=2))
