"""Triplet dataset construction: preset deduplication, content normalization,
candidate generation, tone and aesthetic filtering, and a JSON-lines manifest."""

from __future__ import annotations

import json
import logging
import subprocess
import tempfile
import zlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from . import __version__
from .augment import AugmentConfig, augment_content
from .color import histogram_distance, lab_histogram
from .imageio import quantize, read_image, write_image
from .lut import Lut3D, apply_lut, read_cube, write_cube
from .metrics import ConstantScorer, ScorerUnavailable, score_arrays
from .scorer import ProjectionHead, tone_similarity
from .synthetic import CATEGORIES

logger = logging.getLogger(__name__)

AESTHETIC_POLICIES = ("require", "stub", "skip")


class HookError(RuntimeError):
    """An external normalization hook failed and no fallback was allowed."""


class PipelineError(RuntimeError):
    """The pipeline cannot run with the given inputs or configuration."""


@dataclass(frozen=True)
class Preset:
    id: str
    category: str
    lut: Lut3D

    def __post_init__(self):
        if self.category not in CATEGORIES:
            raise ValueError(f"unknown preset category {self.category!r}")


@dataclass
class PipelineConfig:
    tone_threshold: float = 0.8
    dedup_threshold: float = 0.1
    seed: int = 0
    hooks: list[list[str]] = field(default_factory=list)
    hook_fallback: bool = True
    hook_timeout: float = 60.0
    aesthetic_policy: str = "require"
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    workers: int = 1

    def __post_init__(self):
        if not 0.0 < self.tone_threshold <= 1.0:
            raise ValueError("tone_threshold must lie in (0, 1]")
        if self.dedup_threshold < 0.0:
            raise ValueError("dedup_threshold must be nonnegative")
        if self.aesthetic_policy not in AESTHETIC_POLICIES:
            raise ValueError(f"aesthetic_policy must be one of {AESTHETIC_POLICIES}")
        if isinstance(self.augment, dict):
            self.augment = AugmentConfig(**self.augment)
        self.hooks = [list(h) for h in self.hooks]


@dataclass
class Triplet:
    preset_id: str
    content_id: str
    reference_id: str
    content_path: str
    reference_path: str
    stylized_path: str
    tone_sim: float
    aes_content: float | None
    aes_stylized: float | None


@dataclass
class Manifest:
    header: dict
    rows: list[Triplet]
    warnings: list[str] = field(default_factory=list)

    def to_jsonl(self) -> str:
        lines = [json.dumps({"header": self.header}, sort_keys=True)]
        lines.extend(json.dumps(asdict(r), sort_keys=True) for r in self.rows)
        return "\n".join(lines) + "\n"

    def write(self, path) -> None:
        Path(path).write_text(self.to_jsonl())


def read_manifest(path) -> Manifest:
    lines = Path(path).read_text().splitlines()
    if not lines:
        raise PipelineError(f"{path}: empty manifest")
    header = json.loads(lines[0]).get("header")
    if header is None:
        raise PipelineError(f"{path}: first line is not a manifest header")
    return Manifest(header, [Triplet(**json.loads(ln)) for ln in lines[1:] if ln.strip()])


def _as_8bit(img: np.ndarray) -> np.ndarray:
    """Round to the 8-bit values that will be stored, so filters score what is written."""
    return quantize(img).astype(float) / 255.0


# -- presets ------------------------------------------------------------------------


def preset_fingerprint(preset: Preset, probes: Sequence[np.ndarray]):
    return [lab_histogram(apply_lut(preset.lut, p)) for p in probes]


def fingerprint_distance(a, b) -> float:
    return float(np.mean([histogram_distance(p, q) for p, q in zip(a, b)]))


def dedup_presets(pool: Sequence[Preset], probes: Sequence[np.ndarray], threshold: float) -> list[Preset]:
    """Greedy scan in id order; keep a preset if it is at least ``threshold``
    away from every preset kept so far (mean histogram distance over probes)."""
    if not pool:
        raise PipelineError("empty preset pool")
    if not probes:
        raise PipelineError("dedup needs at least one probe image")
    ids = [p.id for p in pool]
    if len(set(ids)) != len(ids):
        raise PipelineError("preset ids must be unique")
    kept: list[tuple[Preset, list]] = []
    for preset in sorted(pool, key=lambda p: p.id):
        fp = preset_fingerprint(preset, probes)
        if all(fingerprint_distance(fp, k_fp) >= threshold for _, k_fp in kept):
            kept.append((preset, fp))
    return [p for p, _ in kept]


def save_preset_pool(presets: Sequence[Preset], directory) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    index = []
    for p in presets:
        write_cube(p.lut, directory / f"{p.id}.cube")
        index.append({"id": p.id, "category": p.category, "path": f"{p.id}.cube"})
    (directory / "index.json").write_text(json.dumps(index, indent=1))


def load_preset_pool(directory) -> list[Preset]:
    directory = Path(directory)
    index = json.loads((directory / "index.json").read_text())
    return [Preset(e["id"], e["category"], read_cube(directory / e["path"])) for e in index]


# -- content ------------------------------------------------------------------------


def normalize_content(x: np.ndarray, cfg: PipelineConfig) -> tuple[np.ndarray, list[str]]:
    """Run the configured hooks in order, each as ``cmd in.png out.png``.

    Returns:
        ``(image, warnings)``. A failing hook either raises :class:`HookError`
        or, with ``hook_fallback``, returns the unmodified input and a warning.
    """
    if not cfg.hooks:
        return x, []
    current = x
    with tempfile.TemporaryDirectory() as tmp:
        for i, cmd in enumerate(cfg.hooks):
            src, dst = Path(tmp) / f"in{i}.png", Path(tmp) / f"out{i}.png"
            write_image(src, current)
            try:
                proc = subprocess.run([*cmd, str(src), str(dst)], capture_output=True, timeout=cfg.hook_timeout)
                if proc.returncode != 0:
                    raise HookError(f"hook {cmd[0]} exited with status {proc.returncode}")
                if not dst.exists():
                    raise HookError(f"hook {cmd[0]} wrote no output")
                current = read_image(dst)
            except (OSError, subprocess.TimeoutExpired, HookError) as e:
                msg = str(e) if isinstance(e, HookError) else f"hook {cmd[0]} failed: {e}"
                if not cfg.hook_fallback:
                    raise HookError(msg) from e
                logger.warning("%s; passing image through unmodified", msg)
                return x, [msg]
    return current, []


@dataclass
class Candidate:
    image_id: str
    preset_id: str
    image: np.ndarray


def generate_candidates(
    images: Mapping[str, np.ndarray], presets: Sequence[Preset], pairs=None, workers: int = 1
) -> list[Candidate]:
    """Apply presets to images; ``pairs`` optionally restricts to (image_id, preset_id)."""
    if not images or not presets:
        raise PipelineError("need at least one image and one preset")
    by_id = {p.id: p for p in presets}
    todo = pairs if pairs is not None else [(i, p.id) for p in presets for i in images]

    def run(pair):
        image_id, preset_id = pair
        return Candidate(image_id, preset_id, apply_lut(by_id[preset_id].lut, images[image_id]))

    if workers > 1:
        with ThreadPoolExecutor(workers) as ex:
            return list(ex.map(run, todo))
    return [run(t) for t in todo]


# -- filters ------------------------------------------------------------------------------


def tone_filter(reference: np.ndarray, stylized: np.ndarray, head: ProjectionHead, threshold: float):
    """Keep iff tone similarity reaches ``threshold`` (inclusive)."""
    score = tone_similarity(reference, stylized, head)
    return score >= threshold, score


def aesthetic_filter(original: np.ndarray, stylized: np.ndarray, scorer):
    """Keep iff the stylized image scores no lower than the original."""
    s_orig = score_arrays(scorer, original)
    s_styl = score_arrays(scorer, stylized)
    return s_styl >= s_orig, s_orig, s_styl


def pair_rng(seed: int, preset_id: str, content_id: str, reference_id: str) -> np.random.Generator:
    key = zlib.crc32(f"{preset_id}\0{content_id}\0{reference_id}".encode())
    return np.random.default_rng([seed, key])


def build_triplets(
    images: Mapping[str, np.ndarray],
    presets: Sequence[Preset],
    head: ProjectionHead,
    scorer,
    cfg: PipelineConfig,
    out_dir=None,
) -> Manifest:
    """Assemble filtered (content, reference, stylized) triplets.

    For each preset P and ordered image pair (A, B) with A != B: the content is
    an augmented copy of normalized A, the reference is B under P and the
    target is A under P. Rows are emitted when both filters pass and are sorted
    by (preset_id, content_id, reference_id). Images are written under
    ``out_dir`` when it is given.
    """
    if scorer is None:
        if cfg.aesthetic_policy == "require":
            raise PipelineError("no aesthetic scorer configured and aesthetic_policy is 'require'")
        if cfg.aesthetic_policy == "stub":
            scorer = ConstantScorer()
    elif cfg.aesthetic_policy == "skip":
        scorer = None
    ids = sorted(images)
    if len(ids) < 2:
        raise PipelineError("need at least two images to form content/reference pairs")
    warnings: list[str] = []
    normalized = {}
    for i in ids:
        img, w = normalize_content(images[i], cfg)
        normalized[i] = _as_8bit(img)
        warnings.extend(f"{i}: {m}" for m in w)
    cands = generate_candidates(normalized, presets, workers=cfg.workers)
    stylized = {(c.preset_id, c.image_id): _as_8bit(c.image) for c in cands}
    aes_cache: dict = {}

    def aes(key, img):
        if key not in aes_cache:
            aes_cache[key] = score_arrays(scorer, img)
        return aes_cache[key]

    rows: list[Triplet] = []
    for preset in sorted(presets, key=lambda p: p.id):
        for a in ids:
            target = stylized[(preset.id, a)]
            for b in ids:
                if a == b:
                    continue
                keep, sim = tone_filter(stylized[(preset.id, b)], target, head, cfg.tone_threshold)
                if not keep:
                    continue
                aes_c = aes_s = None
                if scorer is not None:
                    try:
                        aes_c, aes_s = aes(("content", a), normalized[a]), aes((preset.id, a), target)
                    except ScorerUnavailable as e:
                        raise PipelineError(f"aesthetic scorer failed: {e}") from e
                    if aes_s < aes_c:
                        continue
                stem = f"{preset.id}__{a}__{b}"
                row = Triplet(
                    preset.id, a, b,
                    f"content/{stem}.png", f"reference/{stem}.png", f"stylized/{stem}.png",
                    sim, aes_c, aes_s,
                )
                if out_dir is not None:
                    content = augment_content(normalized[a], cfg.augment, pair_rng(cfg.seed, preset.id, a, b))
                    root = Path(out_dir)
                    write_image(root / row.content_path, content)
                    write_image(root / row.reference_path, stylized[(preset.id, b)])
                    write_image(root / row.stylized_path, target)
                rows.append(row)
    header = {
        "version": __version__,
        "seed": cfg.seed,
        "tone_threshold": cfg.tone_threshold,
        "aesthetic_policy": cfg.aesthetic_policy,
        "rows": len(rows),
    }
    manifest = Manifest(header, rows, warnings)
    if out_dir is not None:
        manifest.write(Path(out_dir) / "manifest.jsonl")
    return manifest


def audit_manifest(manifest: Manifest, threshold: float | None = None, head=None, root=None) -> list[str]:
    """Independent re-check of every row; returns a list of violations.

    With ``head`` and ``root`` the tone similarity is recomputed from the
    stored reference and stylized files.
    """
    threshold = manifest.header.get("tone_threshold") if threshold is None else threshold
    problems = []
    for r in manifest.rows:
        tag = f"{r.preset_id}/{r.content_id}/{r.reference_id}"
        sim = r.tone_sim
        if head is not None and root is not None:
            sim = tone_similarity(read_image(Path(root) / r.reference_path), read_image(Path(root) / r.stylized_path), head)
        if not sim >= threshold:
            problems.append(f"{tag}: tone_sim {sim:.6f} below {threshold}")
        if (r.aes_content is None) != (r.aes_stylized is None):
            problems.append(f"{tag}: only one aesthetic score present")
        elif r.aes_content is not None and not r.aes_stylized >= r.aes_content:
            problems.append(f"{tag}: aesthetic score dropped {r.aes_content} -> {r.aes_stylized}")
    keys = [(r.preset_id, r.content_id, r.reference_id) for r in manifest.rows]
    if keys != sorted(keys):
        problems.append("rows are not sorted by (preset_id, content_id, reference_id)")
    return problems
