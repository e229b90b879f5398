"""Toy in-context flow-matching generator.

A canvas holds a content panel, a reference panel and a target panel. A small
per-pixel network predicts the velocity of each target pixel from its noisy
value, the aligned content pixel, a global tone summary of the reference and
the time ``t``. Training combines flow matching with an optional tone reward
applied through the last Euler step of the sampler.

Pixels live in flow space ``s = 2 * rgb - 1``; noise is standard normal.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .features import feature_dim, soft_tone_features
from .imageio import box_resize
from .lut import LutFitConfig, apply_lut, fit_lut_from_images
from .nn import MLP, AdamW
from .scorer import ProjectionHead, normalize_rows, normalize_backward


def to_flow(rgb: np.ndarray) -> np.ndarray:
    return 2.0 * np.asarray(rgb, dtype=float) - 1.0


def from_flow(s: np.ndarray) -> np.ndarray:
    return (np.asarray(s, dtype=float) + 1.0) / 2.0


@dataclass
class Canvas:
    """Content, reference and target panels of size p x p, side by side."""

    content: np.ndarray
    reference: np.ndarray
    target: np.ndarray | None = None
    bandwidth: float = 0.5
    ref_features: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        p = self.content.shape[0]
        for panel in (self.content, self.reference, self.target):
            if panel is not None and panel.shape != (p, p, 3):
                raise ValueError("canvas panels must be equal-size square RGB images")
        self.ref_features = soft_tone_features(self.reference, self.bandwidth)[0]

    @property
    def p(self) -> int:
        return self.content.shape[0]

    @property
    def mask(self) -> np.ndarray:
        m = np.zeros((self.p, 3 * self.p), dtype=bool)
        m[:, 2 * self.p :] = True
        return m

    def image(self) -> np.ndarray:
        target = self.target if self.target is not None else np.zeros_like(self.content)
        return np.concatenate([self.content, self.reference, target], axis=1)


def make_canvas(content: np.ndarray, reference: np.ndarray, p: int = 32, target=None, bandwidth: float = 0.5) -> Canvas:
    """Box-resample inputs to p x p panels and allocate the target panel."""
    rs = lambda x: box_resize(x, p, p) if x is not None else None  # noqa: E731
    return Canvas(rs(content), rs(reference), rs(target), bandwidth)


def flow_interpolate(s0: np.ndarray, eps: np.ndarray, t: float) -> tuple[np.ndarray, np.ndarray]:
    """Return ``(s_t, v_target)`` with ``s_t = (1 - t) s0 + t eps`` and ``v = eps - s0``."""
    s0 = np.asarray(s0, dtype=float)
    eps = np.asarray(eps, dtype=float)
    if s0.shape != eps.shape:
        raise ValueError(f"shape mismatch: {s0.shape} vs {eps.shape}")
    if not 0.0 <= t <= 1.0:
        raise ValueError("t must lie in [0, 1]")
    if t == 0.0:
        return s0.copy(), eps - s0
    if t == 1.0:
        return eps.copy(), eps - s0
    return (1.0 - t) * s0 + t * eps, eps - s0


class FlowModel:
    """Per-pixel velocity network: [s (3), content (3), ref summary (D), t (1)] -> 3."""

    def __init__(self, bins: int = 16, hidden: int = 64, rng=None, params=None):
        self.bins = bins
        self.hidden = hidden
        self.net = MLP([7 + feature_dim(bins), hidden, hidden, 3], rng=rng or np.random.default_rng(0), params=params)
        # Start near zero velocity so early samples stay close to the noise scale.
        if params is None:
            self.net.params[-2] *= 0.1

    @property
    def params(self) -> list[np.ndarray]:
        return self.net.params

    def inputs(self, s: np.ndarray, canvas: Canvas, t: float, rows=None) -> np.ndarray:
        c = to_flow(canvas.content).reshape(-1, 3)
        if rows is not None:
            c = c[rows]
        n = s.shape[0]
        return np.concatenate(
            [s, c, np.broadcast_to(canvas.ref_features, (n, canvas.ref_features.size)), np.full((n, 1), t)], axis=1
        )

    def velocity(self, s: np.ndarray, canvas: Canvas, t: float) -> np.ndarray:
        return self.net(self.inputs(s, canvas, t))


# -- flow matching ------------------------------------------------------------------


def _target_rows(canvas: Canvas) -> np.ndarray:
    if canvas.target is None:
        raise ValueError("training canvases need a target panel")
    return to_flow(canvas.target).reshape(-1, 3)


def fm_loss(
    model: FlowModel,
    batch: Sequence[Canvas],
    rng: np.random.Generator | None = None,
    t: Sequence[float] | None = None,
    eps: Sequence[np.ndarray] | None = None,
    pixels: int | None = None,
) -> tuple[float, list[np.ndarray]]:
    """Mean squared error between predicted and target velocity on the target panels.

    One ``t ~ U[0, 1]`` and one noise draw per item unless ``t`` / ``eps`` are
    given. ``pixels`` optionally subsamples that many target pixels per item.
    The mean runs over all scalar entries of all items.
    """
    rng = rng or np.random.default_rng(0)
    xs, vts = [], []
    for i, cv in enumerate(batch):
        s0 = _target_rows(cv)
        rows = None
        if pixels is not None and pixels < s0.shape[0]:
            rows = np.sort(rng.choice(s0.shape[0], pixels, replace=False))
            s0 = s0[rows]
        ti = float(rng.uniform()) if t is None else float(t[i])
        e = rng.standard_normal(s0.shape) if eps is None else np.asarray(eps[i], dtype=float).reshape(-1, 3)
        if rows is not None and e.shape[0] != s0.shape[0]:
            e = e[rows]
        st, vt = flow_interpolate(s0, e, ti)
        xs.append(model.inputs(st, cv, ti, rows))
        vts.append(vt)
    X, V = np.concatenate(xs), np.concatenate(vts)
    pred, acts = model.net.forward(X)
    diff = pred - V
    loss = float(np.mean(diff * diff))
    grads, _ = model.net.backward(acts, 2.0 * diff / diff.size)
    return loss, grads


# -- sampling --------------------------------------------------------------------------


def euler_trajectory(model, canvas: Canvas, eps: np.ndarray, K: int) -> list[np.ndarray]:
    """States ``[s(1), s(1 - 1/K), ..., s(0)]`` of the K-step Euler solver."""
    if K < 1:
        raise ValueError("K must be >= 1")
    s = np.asarray(eps, dtype=float).reshape(-1, 3)
    states = [s]
    dt = 1.0 / K
    for k in range(K):
        t = 1.0 - k * dt
        s = s - dt * model.velocity(s, canvas, t)
        states.append(s)
    return states


def sample(
    model,
    content: np.ndarray,
    reference: np.ndarray,
    K: int = 4,
    p: int = 32,
    seed: int = 0,
    eps: np.ndarray | None = None,
    lut_cfg: LutFitConfig | None = None,
) -> np.ndarray:
    """Generate a stylized image for ``content`` in the tone of ``reference``.

    The target panel starts as noise at t = 1 and takes K Euler steps to t = 0.
    When the content is not p x p, a LUT fitted between the low-resolution
    content panel and the generated panel is applied to the full-resolution
    content.
    """
    canvas = make_canvas(content, reference, p)
    if eps is None:
        eps = np.random.default_rng(seed).standard_normal((p * p, 3))
    s = euler_trajectory(model, canvas, eps, K)[-1]
    panel = np.clip(from_flow(s), 0.0, 1.0).reshape(p, p, 3)
    content = np.asarray(content, dtype=float)
    if content.shape[:2] == (p, p):
        return panel
    lut, _ = fit_lut_from_images(canvas.content, panel, lut_cfg or LutFitConfig(lattice_size=17))
    return apply_lut(lut, content)


# -- tone reward -----------------------------------------------------------------------


def tone_reward_loss(
    generated: np.ndarray, reference: np.ndarray, head: ProjectionHead, bandwidth: float = 0.5
) -> tuple[float, np.ndarray]:
    """``1 - cos(z_generated, z_reference)`` over soft tone features and its pixel gradient."""
    fg, vjp = soft_tone_features(generated, bandwidth, head.bins)
    fr, _ = soft_tone_features(reference, bandwidth, head.bins)
    U, acts = head.forward(np.stack([fg, fr]))
    Z, norms, deg = normalize_rows(U)
    sim = float(Z[0] @ Z[1])
    dZ = np.zeros_like(Z)
    dZ[0] = -Z[1]
    _, dF = head.backward(acts, normalize_backward(Z, norms, deg, dZ))
    return 1.0 - sim, vjp(dF[0])


def refl_tone_loss(
    model: FlowModel, canvas: Canvas, head: ProjectionHead, eps: np.ndarray, K: int, bandwidth: float = 0.5
) -> tuple[float, list[np.ndarray]]:
    """Tone reward on a sampled panel with gradients through the final Euler step only."""
    states = euler_trajectory(model, canvas, eps, K) if K > 1 else [np.asarray(eps, dtype=float).reshape(-1, 3)]
    s_prev = states[K - 1] if K > 1 else states[0]
    t_last = 1.0 / K
    dt = 1.0 / K
    X = model.inputs(s_prev, canvas, t_last)
    v, acts = model.net.forward(X)
    s_final = s_prev - dt * v
    panel = from_flow(s_final).reshape(canvas.p, canvas.p, 3)
    loss, dpanel = tone_reward_loss(panel, canvas.reference, head, bandwidth)
    dv = -dt * 0.5 * dpanel.reshape(-1, 3)
    grads, _ = model.net.backward(acts, dv)
    return loss, grads


# -- training -----------------------------------------------------------------------------


@dataclass
class TrainSchedule:
    total_steps: int = 1000
    reward_start_step: int | None = None  # None: no reward phase
    learning_rate: float = 2e-3
    batch_size: int = 8
    seed: int = 0
    sampler_steps: int = 4
    pixels_per_item: int | None = 256
    reward_items: int = 8
    reward_bandwidth: float = 0.5
    weight_decay: float = 0.0

    def __post_init__(self):
        if self.reward_start_step is None:
            self.reward_start_step = self.total_steps
        if not 0 <= self.reward_start_step <= self.total_steps:
            raise ValueError("reward_start_step must lie in [0, total_steps]")
        if self.sampler_steps < 1:
            raise ValueError("sampler_steps must be >= 1")

    def lambda_tone(self, step: int) -> float:
        return 0.0 if step < self.reward_start_step else 1.0


@dataclass
class TraceRow:
    step: int
    fm_loss: float
    tone_loss: float | None
    lambda_tone: float


def train(
    model: FlowModel,
    dataset: Sequence[Canvas],
    schedule: TrainSchedule,
    head: ProjectionHead | None = None,
    log: Callable[[str], None] | None = None,
) -> tuple[FlowModel, list[TraceRow]]:
    """Optimize ``L_FM + lambda_tone * L_tone`` with AdamW; ``model`` is updated in place.

    The flow-matching batches draw from their own random stream, so runs that
    differ only in the reward phase share the same flow-matching samples.
    """
    if not dataset:
        raise ValueError("empty training set")
    if schedule.reward_start_step < schedule.total_steps and head is None:
        raise ValueError("a tone-style head is required for the reward phase")
    rng_fm = np.random.default_rng([schedule.seed, 0])
    rng_rw = np.random.default_rng([schedule.seed, 1])
    opt = AdamW(schedule.learning_rate, weight_decay=schedule.weight_decay)
    trace: list[TraceRow] = []
    n = len(dataset)
    for step in range(schedule.total_steps):
        idx = rng_fm.choice(n, min(schedule.batch_size, n), replace=False)
        loss, grads = fm_loss(model, [dataset[i] for i in idx], rng_fm, pixels=schedule.pixels_per_item)
        lam = schedule.lambda_tone(step)
        tone = None
        if lam > 0:
            items = rng_rw.choice(n, min(schedule.reward_items, n), replace=False)
            tone = 0.0
            for i in items:
                cv = dataset[i]
                eps = rng_rw.standard_normal((cv.p * cv.p, 3))
                tl, tg = refl_tone_loss(model, cv, head, eps, schedule.sampler_steps, schedule.reward_bandwidth)
                tone += tl / len(items)
                grads = [g + lam * x / len(items) for g, x in zip(grads, tg)]
        opt.step(model.params, grads)
        trace.append(TraceRow(step, loss, tone, lam))
        if log and (step % 100 == 0 or step == schedule.total_steps - 1):
            log(f"step {step} fm {loss:.4f} tone {tone if tone is not None else float('nan'):.4f} lambda {lam}")
    return model, trace


def write_trace(trace: Sequence[TraceRow], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "fm_loss", "tone_loss", "lambda"])
        for r in trace:
            w.writerow([r.step, repr(r.fm_loss), "" if r.tone_loss is None else repr(r.tone_loss), r.lambda_tone])


# -- checkpoints ----------------------------------------------------------------------------


def save_checkpoint(model: FlowModel, path, schedule: TrainSchedule | None = None, step: int = 0) -> None:
    """One JSON header line followed by little-endian float32 parameters."""
    header = {
        "type": "flow_model",
        "bins": model.bins,
        "hidden": model.hidden,
        "shapes": [list(p.shape) for p in model.params],
        "schedule": asdict(schedule) if schedule else None,
        "seed": schedule.seed if schedule else None,
        "step": step,
    }
    blob = np.concatenate([p.ravel() for p in model.params]).astype("<f4").tobytes()
    Path(path).write_bytes(json.dumps(header, sort_keys=True).encode() + b"\n" + blob)


def load_checkpoint(path) -> tuple[FlowModel, dict]:
    raw = Path(path).read_bytes()
    cut = raw.index(b"\n")
    header = json.loads(raw[:cut])
    if header.get("type") != "flow_model":
        raise ValueError(f"{path} is not a flow model checkpoint")
    flat = np.frombuffer(raw[cut + 1 :], dtype="<f4").astype(float)
    params, pos = [], 0
    for shape in header["shapes"]:
        size = math.prod(shape)
        params.append(flat[pos : pos + size].reshape(shape))
        pos += size
    if pos != flat.size:
        raise ValueError(f"{path}: parameter blob does not match the header shapes")
    return FlowModel(header["bins"], header["hidden"], params=params), header
