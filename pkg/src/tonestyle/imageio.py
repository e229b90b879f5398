"""Image I/O and basic image helpers.

Images are float64 arrays of shape (height, width, 3) with channels in [0, 1].
PNG goes through Pillow; binary PPM (P6) is handled directly.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np


def as_image(x) -> np.ndarray:
    """Validate and convert to a float (H, W, 3) image in [0, 1]."""
    img = np.asarray(x, dtype=float)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ValueError(f"expected an (H, W, 3) image, got shape {img.shape}")
    if img.size and (img.min() < 0.0 or img.max() > 1.0):
        raise ValueError("image channels must lie in [0, 1]")
    return img


def quantize(img: np.ndarray) -> np.ndarray:
    return np.clip(np.round(np.asarray(img) * 255.0), 0, 255).astype(np.uint8)


def read_image(path) -> np.ndarray:
    path = Path(path)
    if path.suffix.lower() in (".ppm", ".pnm"):
        data = _read_ppm(path)
    else:
        from PIL import Image

        with Image.open(path) as im:
            data = np.asarray(im.convert("RGB"), dtype=np.uint8)
    return data.astype(float) / 255.0


def write_image(path, img: np.ndarray) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    data = quantize(img)
    if path.suffix.lower() in (".ppm", ".pnm"):
        h, w, _ = data.shape
        with open(path, "wb") as fh:
            fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
            fh.write(data.tobytes())
    else:
        from PIL import Image

        Image.fromarray(data, mode="RGB").save(path, format="PNG")


def _read_ppm(path: Path) -> np.ndarray:
    raw = path.read_bytes()
    tokens: list[bytes] = []
    pos = 0
    while len(tokens) < 4:
        while pos < len(raw) and raw[pos : pos + 1].isspace():
            pos += 1
        if raw[pos : pos + 1] == b"#":
            while pos < len(raw) and raw[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos : pos + 1].isspace():
            pos += 1
        tokens.append(raw[start:pos])
    if tokens[0] != b"P6":
        raise ValueError(f"{path}: not a binary PPM (P6) file")
    w, h, maxval = (int(t) for t in tokens[1:])
    if maxval != 255:
        raise ValueError(f"{path}: only 8-bit PPM is supported")
    pos += 1  # single whitespace after maxval
    pixels = np.frombuffer(raw, dtype=np.uint8, count=w * h * 3, offset=pos)
    return pixels.reshape(h, w, 3)


def box_resize(img: np.ndarray, height: int, width: int) -> np.ndarray:
    """Area-weighted box resampling to (height, width)."""
    img = np.asarray(img, dtype=float)
    rows = _area_matrix(img.shape[0], height)
    cols = _area_matrix(img.shape[1], width)
    return np.einsum("ih,hwc,jw->ijc", rows, img, cols)


def _area_matrix(src: int, dst: int) -> np.ndarray:
    """Row-stochastic matrix averaging source cells overlapping each target cell."""
    if src == dst:
        return np.eye(src)
    edges_dst = np.linspace(0.0, src, dst + 1)
    m = np.zeros((dst, src))
    for i in range(dst):
        lo, hi = edges_dst[i], edges_dst[i + 1]
        for j in range(int(np.floor(lo)), min(int(np.ceil(hi)), src)):
            overlap = min(hi, j + 1) - max(lo, j)
            if overlap > 0:
                m[i, j] = overlap
        m[i] /= m[i].sum()
    return m
