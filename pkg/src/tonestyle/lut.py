"""3D lookup tables: trilinear application, least-squares fitting and .cube I/O."""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import scipy.sparse as sp

logger = logging.getLogger(__name__)


class CubeParseError(ValueError):
    """Malformed .cube file; the message carries the offending line number."""

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line is not None else message)


@dataclass(frozen=True)
class Lut3D:
    """Cubic RGB lattice. ``table[r, g, b]`` holds the output color of vertex (r, g, b)."""

    table: np.ndarray
    title: str = ""

    def __post_init__(self):
        t = np.asarray(self.table, dtype=float)
        n = t.shape[0]
        if t.ndim != 4 or t.shape != (n, n, n, 3) or n < 2:
            raise ValueError(f"LUT table must have shape (N, N, N, 3) with N >= 2, got {t.shape}")
        object.__setattr__(self, "table", t)

    @property
    def size(self) -> int:
        return self.table.shape[0]

    def flat(self) -> np.ndarray:
        """Vertices in .cube order (r fastest), shape (N**3, 3)."""
        return self.table.transpose(2, 1, 0, 3).reshape(-1, 3)

    @classmethod
    def from_flat(cls, values: np.ndarray, n: int, title: str = "") -> "Lut3D":
        table = np.asarray(values, dtype=float).reshape(n, n, n, 3).transpose(2, 1, 0, 3)
        return cls(np.ascontiguousarray(table), title)


def _grid(n: int) -> np.ndarray:
    g = np.arange(n) / (n - 1)
    return np.stack(np.meshgrid(g, g, g, indexing="ij"), axis=-1)


def identity_lut(n: int = 33) -> Lut3D:
    if n < 2:
        raise ValueError("lattice size must be >= 2")
    return Lut3D(_grid(n), "identity")


def lut_from_function(fn, n: int = 33, title: str = "") -> Lut3D:
    """Sample a vectorized color map (..., 3) -> (..., 3) on the lattice."""
    return Lut3D(np.clip(fn(_grid(n)), 0.0, 1.0), title)


def trilinear_footprint(colors: np.ndarray, n: int) -> tuple[np.ndarray, np.ndarray]:
    """Flat vertex indices (r fastest) and weights of the 8 enclosing vertices.

    Args:
        colors: (M, 3) RGB values; clamped to [0, 1].
        n: lattice size.

    Returns:
        ``(idx, w)`` each of shape (M, 8).
    """
    pos = np.clip(np.asarray(colors, dtype=float), 0.0, 1.0) * (n - 1)
    base = np.minimum(np.floor(pos).astype(np.int64), n - 2)
    frac = pos - base
    idx = np.empty((pos.shape[0], 8), dtype=np.int64)
    w = np.empty((pos.shape[0], 8))
    corner = 0
    for dr in (0, 1):
        wr = frac[:, 0] if dr else 1.0 - frac[:, 0]
        for dg in (0, 1):
            wg = frac[:, 1] if dg else 1.0 - frac[:, 1]
            for db in (0, 1):
                wb = frac[:, 2] if db else 1.0 - frac[:, 2]
                idx[:, corner] = (base[:, 0] + dr) + n * (base[:, 1] + dg) + n * n * (base[:, 2] + db)
                w[:, corner] = wr * wg * wb
                corner += 1
    return idx, w


def lookup(lut: Lut3D, c: np.ndarray) -> np.ndarray:
    """Trilinear lookup of colors of shape (..., 3); inputs are clamped to [0, 1]."""
    c = np.asarray(c, dtype=float)
    shape = c.shape
    idx, w = trilinear_footprint(c.reshape(-1, 3), lut.size)
    flat = lut.flat()
    out = np.einsum("mk,mkc->mc", w, flat[idx])
    return out.reshape(shape)


def apply_lut(lut: Lut3D, x: np.ndarray) -> np.ndarray:
    """Apply a LUT to every pixel of an (H, W, 3) image."""
    return np.clip(lookup(lut, x), 0.0, 1.0)


# -- fitting ---------------------------------------------------------------


@dataclass
class LutFitConfig:
    lattice_size: int = 33
    smoothness: float = 1e-3
    # Weak pull of every vertex toward the identity; relative to ``smoothness``.
    anchor: float = 3e-3
    max_iterations: int = 200
    tolerance: float = 1e-8
    max_correspondences: int = 100_000

    def __post_init__(self):
        if self.lattice_size < 2:
            raise ValueError("lattice_size must be >= 2")
        if self.tolerance <= 0:
            raise ValueError("tolerance must be > 0")
        if self.smoothness < 0 or self.anchor < 0:
            raise ValueError("smoothness and anchor must be nonnegative")


@dataclass
class FitReport:
    data_residual: float
    iterations: int
    unconstrained_vertices: int
    converged: bool
    objective_trace: list[float] = field(default_factory=list, repr=False)

    def to_json(self) -> str:
        d = asdict(self)
        d.pop("objective_trace")
        return json.dumps(d)


@dataclass(frozen=True)
class ColorCorrespondence:
    input: tuple[float, float, float]
    target: tuple[float, float, float]
    weight: float = 1.0


def second_difference_operator(n: int) -> sp.csr_matrix:
    """Stacked per-axis second differences over the lattice (r fastest).

    Its null space holds every function that is affine along each axis,
    which includes the identity and all trilinear maps.
    """
    v = n**3
    rows, cols, vals = [], [], []
    r_idx = 0
    i = np.arange(n)
    rr, gg, bb = np.meshgrid(i, i, i, indexing="ij")
    flat = lambda r, g, b: r + n * g + n * n * b  # noqa: E731
    for axis in range(3):
        coords = [rr, gg, bb]
        mask = (coords[axis] >= 1) & (coords[axis] <= n - 2)
        centers = [c[mask] for c in coords]
        m = centers[0].size
        for offset, val in ((-1, 1.0), (0, -2.0), (1, 1.0)):
            shifted = list(centers)
            shifted[axis] = shifted[axis] + offset
            rows.append(np.arange(r_idx, r_idx + m))
            cols.append(flat(*shifted))
            vals.append(np.full(m, val))
        r_idx += m
    return sp.csr_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(r_idx, v)
    )


def _normal_system(inputs, targets, weights, cfg: LutFitConfig):
    n = cfg.lattice_size
    v = n**3
    idx, w = trilinear_footprint(inputs, n)
    m = inputs.shape[0]
    A = sp.csr_matrix((w.ravel(), (np.repeat(np.arange(m), 8), idx.ravel())), shape=(m, v))
    Aw = A.multiply(weights[:, None]).tocsr()
    ident = identity_lut(n).flat()
    resid0 = targets - A @ ident
    H = (Aw.T @ A).tocsr()
    if cfg.smoothness > 0:
        R = second_difference_operator(n)
        H = H + cfg.smoothness * (R.T @ R + cfg.anchor * sp.identity(v))
    H = H.tocsr()
    H.sum_duplicates()
    b = Aw.T @ resid0
    data_const = float(np.sum(weights[:, None] * resid0**2))
    touched = np.zeros(v, dtype=bool)
    touched[idx[(w * weights[:, None]) > 0]] = True
    return A, H, b, ident, data_const, int(v - touched.sum())


def _pcg(H, b, max_iter: int, tol: float, const: float):
    """Jacobi-preconditioned CG for all three channels at once.

    Returns the iterate minimizing the quadratic ``x'Hx - 2b'x + const``, the
    objective trace, iteration count and convergence flag.
    """
    diag = H.diagonal()
    inv_d = np.where(diag > 0, 1.0 / np.where(diag > 0, diag, 1.0), 1.0)[:, None]
    x = np.zeros_like(b)
    r = b.copy()
    bnorm = np.linalg.norm(b, axis=0)
    bnorm = np.where(bnorm > 0, bnorm, 1.0)
    z = inv_d * r
    p = z.copy()
    rz = np.sum(r * z, axis=0)
    trace = [const]
    converged = bool(np.all(np.linalg.norm(r, axis=0) <= tol * bnorm))
    it = 0
    while not converged and it < max_iter:
        Hp = H @ p
        pHp = np.sum(p * Hp, axis=0)
        active = pHp > 0
        alpha = np.where(active, rz / np.where(active, pHp, 1.0), 0.0)
        x = x + alpha * p
        r = r - alpha * Hp
        it += 1
        trace.append(float(-np.sum(x * (b + r)) + const))
        converged = bool(np.all(np.linalg.norm(r, axis=0) <= tol * bnorm))
        if converged:
            break
        z = inv_d * r
        rz_new = np.sum(r * z, axis=0)
        beta = np.where(rz > 0, rz_new / np.where(rz > 0, rz, 1.0), 0.0)
        p = z + beta * p
        rz = rz_new
    return x, trace, it, converged


def fit_lut(
    pairs: Sequence[ColorCorrespondence] | tuple[np.ndarray, np.ndarray] | tuple[np.ndarray, np.ndarray, np.ndarray],
    cfg: LutFitConfig | None = None,
) -> tuple[Lut3D, FitReport]:
    """Least-squares LUT fit with Laplacian-style smoothing toward the identity.

    Minimizes ``sum_i w_i |LUT(c_i) - s_i|^2 + smoothness * (|D d|^2 + anchor |d|^2)``
    where ``d`` is the LUT's offset from the identity and ``D`` stacks per-axis
    second differences. LUT(c) is linear in the vertex values, so this is a
    sparse linear least-squares problem solved by preconditioned CG on the
    normal equations starting from the identity.

    ``pairs`` is either a sequence of :class:`ColorCorrespondence` or arrays
    ``(inputs, targets[, weights])`` of shape (M, 3).
    """
    cfg = cfg or LutFitConfig()
    if isinstance(pairs, tuple) and len(pairs) in (2, 3) and isinstance(pairs[0], np.ndarray):
        inputs = np.asarray(pairs[0], dtype=float).reshape(-1, 3)
        targets = np.asarray(pairs[1], dtype=float).reshape(-1, 3)
        weights = (
            np.asarray(pairs[2], dtype=float).reshape(-1)
            if len(pairs) == 3
            else np.ones(inputs.shape[0])
        )
    else:
        pairs = list(pairs)
        if not pairs:
            raise ValueError("fit_lut needs at least one correspondence")
        inputs = np.array([p.input for p in pairs], dtype=float)
        targets = np.array([p.target for p in pairs], dtype=float)
        weights = np.array([p.weight for p in pairs], dtype=float)
    if inputs.shape[0] == 0:
        raise ValueError("fit_lut needs at least one correspondence")
    if inputs.shape != targets.shape or weights.shape[0] != inputs.shape[0]:
        raise ValueError("inputs, targets and weights must have matching lengths")
    if np.any(weights < 0):
        raise ValueError("weights must be nonnegative")

    if inputs.shape[0] > cfg.max_correspondences:
        stride = int(np.ceil(inputs.shape[0] / cfg.max_correspondences))
        inputs, targets, weights = inputs[::stride], targets[::stride], weights[::stride]

    A, H, b, ident, const, unconstrained = _normal_system(inputs, targets, weights, cfg)
    delta, trace, iters, converged = _pcg(H, b, cfg.max_iterations, cfg.tolerance, const)
    if not converged:
        logger.warning("LUT fit did not converge in %d iterations", cfg.max_iterations)
    values = np.clip(ident + delta, 0.0, 1.0)
    fitted = Lut3D.from_flat(values, cfg.lattice_size, "fitted")
    resid = A @ values - targets
    report = FitReport(
        data_residual=float(np.sum(weights[:, None] * resid**2)),
        iterations=iters,
        unconstrained_vertices=unconstrained,
        converged=converged,
        objective_trace=trace,
    )
    return fitted, report


def fit_lut_from_images(
    content: np.ndarray, stylized: np.ndarray, cfg: LutFitConfig | None = None
) -> tuple[Lut3D, FitReport]:
    """Fit a LUT from paired pixels of two equally sized images."""
    content = np.asarray(content, dtype=float)
    stylized = np.asarray(stylized, dtype=float)
    if content.shape != stylized.shape:
        raise ValueError(f"image dimensions differ: {content.shape} vs {stylized.shape}")
    return fit_lut((content.reshape(-1, 3), stylized.reshape(-1, 3)), cfg)


# -- random perturbations --------------------------------------------------


def random_perturbation_lut(seed, strength: float, n: int = 33, terms: int = 4) -> Lut3D:
    """Identity plus smooth low-frequency offsets bounded by ``strength``.

    Each output channel gets a sum of a few random sinusoids of frequency at
    most 1.5 cycles per unit cube, rescaled so its peak magnitude is
    ``strength``; the result is clamped to [0, 1].
    """
    if not 0.0 <= strength <= 1.0:
        raise ValueError("strength must lie in [0, 1]")
    grid = _grid(n)
    if strength == 0.0:
        return Lut3D(grid, "identity")
    rng = np.random.default_rng(seed)
    offset = np.zeros_like(grid)
    for ch in range(3):
        for _ in range(terms):
            freq = rng.uniform(-1.5, 1.5, size=3)
            phase = rng.uniform(0, 2 * np.pi)
            amp = rng.normal()
            offset[..., ch] += amp * np.sin(2 * np.pi * grid @ freq + phase)
        peak = np.abs(offset[..., ch]).max()
        if peak > 0:
            offset[..., ch] *= strength / peak
    return Lut3D(np.clip(grid + offset, 0.0, 1.0), f"perturb-{seed}")


# -- .cube I/O -------------------------------------------------------------


def write_cube(lut: Lut3D, path) -> None:
    lines = []
    if lut.title:
        lines.append(f'TITLE "{lut.title}"')
    lines.append(f"LUT_3D_SIZE {lut.size}")
    lines.extend(f"{r:.6f} {g:.6f} {b:.6f}" for r, g, b in lut.flat())
    Path(path).write_text("\n".join(lines) + "\n")


def read_cube(path) -> Lut3D:
    """Parse an Adobe .cube 3D LUT with the default [0, 1] domain."""
    title = ""
    size = None
    values: list[tuple[float, float, float]] = []
    last_line = 0
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), start=1):
        last_line = lineno
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        head = line.split()[0]
        if head == "TITLE":
            title = line[len("TITLE"):].strip().strip('"')
        elif head == "LUT_3D_SIZE":
            try:
                size = int(line.split()[1])
            except (IndexError, ValueError):
                raise CubeParseError("malformed LUT_3D_SIZE", lineno) from None
            if size < 2:
                raise CubeParseError("LUT_3D_SIZE must be >= 2", lineno)
        elif head == "LUT_1D_SIZE":
            raise CubeParseError("1D LUTs are not supported", lineno)
        elif head in ("DOMAIN_MIN", "DOMAIN_MAX"):
            want = 0.0 if head == "DOMAIN_MIN" else 1.0
            try:
                dom = [float(t) for t in line.split()[1:4]]
            except ValueError:
                raise CubeParseError(f"malformed {head}", lineno) from None
            if len(dom) != 3 or any(d != want for d in dom):
                raise CubeParseError(f"unsupported {head}", lineno)
        else:
            if size is None:
                raise CubeParseError("data before LUT_3D_SIZE header", lineno)
            parts = line.split()
            try:
                triple = tuple(float(t) for t in parts)
            except ValueError:
                raise CubeParseError(f"unrecognized line {raw!r}", lineno) from None
            if len(triple) != 3:
                raise CubeParseError("expected three values", lineno)
            if any(not (0.0 <= t <= 1.0) for t in triple):
                raise CubeParseError("value outside [0, 1]", lineno)
            if len(values) >= size**3:
                raise CubeParseError(f"more than {size ** 3} data lines", lineno)
            values.append(triple)
    if size is None:
        raise CubeParseError("missing LUT_3D_SIZE header")
    if len(values) != size**3:
        raise CubeParseError(
            f"expected {size ** 3} data lines, found {len(values)}; "
            f"data line {len(values) + 1} missing",
            last_line + 1,
        )
    return Lut3D.from_flat(np.array(values), size, title)
