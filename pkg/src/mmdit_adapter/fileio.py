"""Atomic file writes and the netpbm / CSV / SVG emitters."""

from __future__ import annotations

import csv
import io
import os
import tempfile
from pathlib import Path

import numpy as np

from .errors import DimensionError, FormatError


def atomic_write_bytes(path, data: bytes) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return path


def atomic_write_text(path, text: str) -> Path:
    return atomic_write_bytes(path, text.encode("utf-8"))


def write_csv(path, header, rows) -> Path:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    writer.writerows(rows)
    return atomic_write_text(path, buf.getvalue())


# -- netpbm ------------------------------------------------------------
def _to_bytes(img: np.ndarray) -> np.ndarray:
    """Map [-1, 1] floats to 0..255."""
    return np.clip(np.rint((np.asarray(img, dtype=np.float64) + 1.0) * 127.5), 0, 255).astype(np.uint8)


def write_ppm(path, image: np.ndarray) -> Path:
    """Binary P6 from an ``(H, W, 3)`` array in [-1, 1]."""
    px = _to_bytes(image)
    h, w, _ = px.shape
    return atomic_write_bytes(path, f"P6\n{w} {h}\n255\n".encode() + px.tobytes())


def write_pgm(path, gray: np.ndarray, normalize: bool = True) -> Path:
    """Binary P5; ``normalize`` stretches the value range to 0..255."""
    g = np.asarray(gray, dtype=np.float64)
    if normalize:
        lo, hi = g.min(), g.max()
        g = (g - lo) / (hi - lo) if hi > lo else np.zeros_like(g)
        px = np.rint(g * 255).astype(np.uint8)
    else:
        px = _to_bytes(g)
    h, w = px.shape
    return atomic_write_bytes(path, f"P5\n{w} {h}\n255\n".encode() + px.tobytes())


def _pnm_tokens(raw: bytes):
    """Yield header tokens and the offset just past the last one."""
    pos, tokens = 0, []
    while len(tokens) < 4:
        while pos < len(raw) and raw[pos:pos + 1].isspace():
            pos += 1
        if raw[pos:pos + 1] == b"#":
            while pos < len(raw) and raw[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise FormatError("truncated netpbm header")
        tokens.append(raw[start:pos].decode("ascii"))
    return tokens, pos + 1


def read_pnm(path) -> np.ndarray:
    """Read P2/P3/P5/P6 into floats in [-1, 1]; ``(H, W)`` or ``(H, W, 3)``."""
    raw = Path(path).read_bytes()
    magic = raw[:2].decode("ascii", "replace")
    if magic not in ("P2", "P3", "P5", "P6"):
        raise FormatError(f"{path}: unsupported netpbm magic {magic!r}")
    tokens, offset = _pnm_tokens(raw)
    w, h, maxval = int(tokens[1]), int(tokens[2]), int(tokens[3])
    chans = 3 if magic in ("P3", "P6") else 1
    count = w * h * chans
    if magic in ("P5", "P6"):
        if maxval > 255:
            raise FormatError(f"{path}: 16-bit netpbm not supported")
        data = np.frombuffer(raw[offset:offset + count], dtype=np.uint8)
    else:
        data = np.array(raw[offset - 1:].split(), dtype=np.int64)[:count]
    if data.size != count:
        raise FormatError(f"{path}: expected {count} samples, found {data.size}")
    img = data.astype(np.float64) / maxval * 2.0 - 1.0
    shape = (h, w, 3) if chans == 3 else (h, w)
    return img.reshape(shape).astype(np.float32)


def write_pbm(path, mask: np.ndarray) -> Path:
    """Plain P1 bitmap of a 2-D binary array."""
    mask = np.asarray(mask)
    h, w = mask.shape
    lines = ["P1", f"{w} {h}"] + [" ".join(str(int(v)) for v in row) for row in mask]
    return atomic_write_text(path, "\n".join(lines) + "\n")


def parse_pbm(text: str) -> np.ndarray:
    """Parse plain P1; digits may or may not be whitespace-separated."""
    body = "\n".join(line.split("#", 1)[0] for line in text.splitlines())
    parts = body.split()
    if not parts or parts[0] != "P1":
        raise FormatError("mask file is not a plain PBM (P1)")
    if len(parts) < 3:
        raise FormatError("P1 header lacks width/height")
    try:
        w, h = int(parts[1]), int(parts[2])
    except ValueError as exc:
        raise FormatError(f"bad P1 dimensions: {exc}") from exc
    digits = "".join(parts[3:])
    bad = set(digits) - {"0", "1"}
    if bad:
        raise FormatError(f"P1 body contains non-binary tokens {sorted(bad)}")
    if len(digits) != w * h:
        raise FormatError(f"P1 body has {len(digits)} entries, header says {w}x{h}")
    return np.array([int(c) for c in digits], dtype=np.uint8).reshape(h, w)


def parse_mask(path, expected_m: int) -> np.ndarray:
    """Read a token-grid P1 mask whose width * height must equal ``expected_m``."""
    try:
        text = Path(path).read_text()
    except UnicodeDecodeError as exc:
        raise FormatError(f"{path}: mask must be a plain-text P1 file") from exc
    try:
        mask = parse_pbm(text)
    except FormatError as exc:
        raise FormatError(f"{path}: {exc}") from exc
    if mask.size != expected_m:
        h, w = mask.shape
        raise DimensionError(f"{path}: mask is {w}x{h} = {mask.size} tokens, model has {expected_m}")
    return mask


def write_mask(path, mask: np.ndarray, grid: int | None = None) -> Path:
    """Write a flat or 2-D binary token mask as P1; flat masks need ``grid``."""
    mask = np.asarray(mask)
    if mask.ndim == 1:
        side = grid or int(round(mask.size ** 0.5))
        if side * side != mask.size:
            raise DimensionError(f"cannot lay {mask.size} mask entries on a square grid")
        mask = mask.reshape(side, side)
    if not np.isin(mask, (0, 1)).all():
        raise FormatError("mask entries must be 0 or 1")
    return write_pbm(path, mask)


# -- svg -----------------------------------------------------------------
def svg_line_chart(path, ys, title: str = "", width: int = 480, height: int = 240) -> Path:
    ys = np.asarray(ys, dtype=np.float64)
    pad = 30
    lo, hi = float(ys.min()), float(ys.max())
    span = hi - lo or 1.0
    xs = np.linspace(pad, width - pad, len(ys)) if len(ys) > 1 else np.array([width / 2])
    pts = " ".join(f"{x:.1f},{height - pad - (y - lo) / span * (height - 2 * pad):.1f}"
                   for x, y in zip(xs, ys))
    svg = (f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}">\n'
           f'<text x="{pad}" y="18" font-size="12">{title}</text>\n'
           f'<polyline fill="none" stroke="black" stroke-width="1" points="{pts}"/>\n'
           f'<text x="2" y="{pad}" font-size="10">{hi:.3g}</text>\n'
           f'<text x="2" y="{height - pad}" font-size="10">{lo:.3g}</text>\n</svg>\n')
    return atomic_write_text(path, svg)


def svg_bar_chart(path, labels, groups, series=("low", "mid", "high"), width: int = 480,
                  height: int = 240) -> Path:
    """Grouped bars: one group per label, one bar per series value in [0, 1]."""
    pad, colors = 30, ("#4477aa", "#ddaa33", "#bb5566")
    n = max(len(labels), 1)
    gw = (width - 2 * pad) / n
    bw = gw / (len(series) + 1)
    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}">']
    for i, (label, vals) in enumerate(zip(labels, groups)):
        for j, v in enumerate(vals):
            bh = float(v) * (height - 2 * pad)
            x = pad + i * gw + j * bw
            parts.append(f'<rect x="{x:.1f}" y="{height - pad - bh:.1f}" width="{bw:.1f}" '
                         f'height="{bh:.1f}" fill="{colors[j % 3]}"/>')
        parts.append(f'<text x="{pad + i * gw:.1f}" y="{height - 10}" font-size="9">{label}</text>')
    parts.append("</svg>\n")
    return atomic_write_text(path, "\n".join(parts))
