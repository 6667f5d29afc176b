"""Frozen toy vision transformer that exposes hierarchical features.

The weights are drawn once from ``EncoderConfig.seed`` and never trained. The
residual stream is tapped after three blocks (shallow, middle, deep) and each
tap is split into the CLS row and the patch rows.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import erf

from .errors import ConfigError, FormatError
from .fileio import atomic_write_bytes, atomic_write_text
from .tensor import layer_norm_kernel, softmax_kernel

LEVELS = ("low", "mid", "high")


@dataclass(frozen=True)
class EncoderConfig:
    image_size: int = 24
    patch_size: int = 6
    channels: int = 3
    depth: int = 6
    width: int = 32
    heads: int = 4
    taps: tuple = (2, 4, 6)
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "taps", tuple(int(t) for t in self.taps))
        if self.image_size % self.patch_size:
            raise ConfigError(f"image side {self.image_size} not divisible by patch {self.patch_size}")
        if len(self.taps) != 3 or not (0 < self.taps[0] < self.taps[1] < self.taps[2] <= self.depth):
            raise ConfigError(f"tap layers must satisfy 0 < low < mid < high <= depth, got {self.taps}")
        if self.width % self.heads:
            raise ConfigError("encoder width must be divisible by head count")

    @property
    def grid(self) -> int:
        return self.image_size // self.patch_size

    @property
    def num_patches(self) -> int:
        return self.grid ** 2

    def to_dict(self) -> dict:
        d = asdict(self)
        d["taps"] = list(self.taps)
        return d


@dataclass
class HierFeatures:
    """Per-level patch tokens (``..., g, d1``) and CLS tokens (``..., 1, d1``)."""

    full: dict
    cls: dict
    layers: tuple = field(default=(0, 0, 0))

    def __post_init__(self):
        if set(self.full) != set(LEVELS) or set(self.cls) != set(LEVELS):
            raise FormatError(f"features must provide levels {LEVELS}")
        ref = self.full[LEVELS[0]].shape
        for lvl in LEVELS:
            f, c = self.full[lvl], self.cls[lvl]
            if f.shape != ref:
                raise FormatError(f"level {lvl!r} full tokens {f.shape} differ from {ref}")
            if c.shape[-2:] != (1, ref[-1]) or c.shape[:-2] != ref[:-2]:
                raise FormatError(f"level {lvl!r} CLS shape {c.shape} inconsistent with {ref}")

    @property
    def num_tokens(self) -> int:
        return self.full[LEVELS[0]].shape[-2]

    @property
    def width(self) -> int:
        return self.full[LEVELS[0]].shape[-1]


def sincos_2d(grid: int, width: int) -> np.ndarray:
    """Fixed 2-D sinusoidal table, rows in raster order, shape ``(grid*grid, width)``."""
    quarter = width // 4
    omega = 1.0 / 10000 ** (np.arange(quarter) / max(quarter, 1))
    ys, xs = np.meshgrid(np.arange(grid), np.arange(grid), indexing="ij")
    parts = []
    for coord in (ys.reshape(-1), xs.reshape(-1)):
        ang = coord[:, None] * omega[None, :]
        parts += [np.sin(ang), np.cos(ang)]
    table = np.concatenate(parts, axis=1)
    out = np.zeros((grid * grid, width))
    out[:, : table.shape[1]] = table
    return out


def patchify(images: np.ndarray, patch: int) -> np.ndarray:
    """``(..., H, W, C)`` -> ``(..., (H/p)*(W/p), p*p*C)`` in raster order."""
    *lead, h, w, c = images.shape
    x = images.reshape(*lead, h // patch, patch, w // patch, patch, c)
    x = np.moveaxis(x, -4, -3)
    return x.reshape(*lead, (h // patch) * (w // patch), patch * patch * c)


def unpatchify(tokens: np.ndarray, patch: int, size: int, channels: int) -> np.ndarray:
    *lead, m, _ = tokens.shape
    g = size // patch
    x = tokens.reshape(*lead, g, g, patch, patch, channels)
    x = np.moveaxis(x, -3, -4)
    return x.reshape(*lead, size, size, channels)


class HierEncoder:
    """Seed-deterministic pre-norm ViT; stateless after construction."""

    def __init__(self, cfg: EncoderConfig):
        self.cfg = cfg
        rng = np.random.default_rng(cfg.seed)
        d, pdim = cfg.width, cfg.patch_size ** 2 * cfg.channels
        dt = np.float32

        def normal(shape, std):
            return (rng.standard_normal(shape) * std).astype(dt)

        self.patch_w = normal((pdim, d), 1.0 / np.sqrt(pdim))
        self.patch_b = np.zeros(d, dt)
        self.cls_token = normal((1, d), 1.0)
        self.pos = sincos_2d(cfg.grid, d).astype(dt)
        out_std = 1.0 / np.sqrt(d * 2 * cfg.depth)
        self.blocks = []
        for _ in range(cfg.depth):
            self.blocks.append({
                "qkv": normal((d, 3 * d), 1.0 / np.sqrt(d)),
                "proj": normal((d, d), out_std),
                "fc1": normal((d, 2 * d), 1.0 / np.sqrt(d)),
                "fc2": normal((2 * d, d), 1.0 / np.sqrt(2 * d)),
            })

    def _block(self, x: np.ndarray, p: dict) -> np.ndarray:
        cfg = self.cfg
        h, dh = cfg.heads, cfg.width // cfg.heads
        y, _ = layer_norm_kernel(x, 1e-6)
        qkv = y @ p["qkv"]
        *lead, n, _ = qkv.shape
        qkv = qkv.reshape(*lead, n, 3, h, dh)
        q, k, v = (np.moveaxis(qkv[..., i, :, :], -2, -3) for i in range(3))
        att = softmax_kernel(q @ np.swapaxes(k, -1, -2) / np.sqrt(dh))
        o = np.moveaxis(att @ v, -3, -2).reshape(*lead, n, cfg.width)
        x = x + o @ p["proj"]
        y, _ = layer_norm_kernel(x, 1e-6)
        hid = y @ p["fc1"]
        hid = hid * 0.5 * (1.0 + erf(hid / np.sqrt(2.0)))
        return x + hid @ p["fc2"]

    def encode(self, image: np.ndarray) -> HierFeatures:
        """Encode ``(H, W, C)`` or ``(B, H, W, C)`` pixels into three feature levels."""
        cfg = self.cfg
        image = np.asarray(image, dtype=np.float32)
        if image.shape[-3:] != (cfg.image_size, cfg.image_size, cfg.channels):
            raise ConfigError(
                f"image shape {image.shape} does not match encoder input "
                f"({cfg.image_size}, {cfg.image_size}, {cfg.channels})")
        tokens = patchify(image, cfg.patch_size) @ self.patch_w + self.patch_b + self.pos
        cls = np.broadcast_to(self.cls_token, tokens.shape[:-2] + (1, cfg.width))
        x = np.concatenate([cls, tokens], axis=-2)
        full, cls_out = {}, {}
        taps = dict(zip(cfg.taps, LEVELS))
        for i, blk in enumerate(self.blocks, start=1):
            x = self._block(x, blk)
            if i in taps:
                full[taps[i]] = np.ascontiguousarray(x[..., 1:, :])
                cls_out[taps[i]] = np.ascontiguousarray(x[..., :1, :])
        return HierFeatures(full, cls_out, layers=cfg.taps)


def encode(image: np.ndarray, cfg: EncoderConfig) -> HierFeatures:
    return HierEncoder(cfg).encode(image)


# -- feature container -------------------------------------------------
FEATURE_FORMAT = "hier-features/1"


def save_features(features: HierFeatures, directory) -> Path:
    """Write ``manifest.json`` plus one little-endian float32 blob per tensor."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    entries = []
    for lvl in LEVELS:
        for kind, store in (("full", features.full), ("cls", features.cls)):
            name = f"{lvl}.{kind}"
            arr = np.ascontiguousarray(store[lvl], dtype="<f4")
            atomic_write_bytes(directory / f"{name}.bin", arr.tobytes())
            entries.append({"name": name, "shape": list(arr.shape), "dtype": "float32",
                            "file": f"{name}.bin"})
    manifest = {"format": FEATURE_FORMAT, "layers": list(features.layers), "tensors": entries}
    path = directory / "manifest.json"
    atomic_write_text(path, json.dumps(manifest, indent=2))
    return path


def load_features(path) -> HierFeatures:
    path = Path(path)
    manifest_path = path / "manifest.json" if path.is_dir() else path
    try:
        manifest = json.loads(manifest_path.read_text())
        if manifest.get("format") != FEATURE_FORMAT:
            raise FormatError(f"unsupported feature format {manifest.get('format')!r}")
        entries = {e["name"]: e for e in manifest["tensors"]}
    except (json.JSONDecodeError, KeyError, TypeError, AttributeError) as exc:
        raise FormatError(f"malformed feature manifest {manifest_path}: {exc}") from exc
    full, cls = {}, {}
    for lvl in LEVELS:
        for kind, store in (("full", full), ("cls", cls)):
            name = f"{lvl}.{kind}"
            if name not in entries:
                raise FormatError(f"feature manifest lacks tensor {name!r}")
            e = entries[name]
            if e.get("dtype") != "float32":
                raise FormatError(f"tensor {name!r} has unsupported dtype {e.get('dtype')!r}")
            shape = tuple(int(s) for s in e["shape"])
            raw = (manifest_path.parent / e["file"]).read_bytes()
            expected = int(np.prod(shape)) * 4
            if len(raw) != expected:
                raise FormatError(
                    f"tensor {name!r}: expected {expected} bytes, found {len(raw)}")
            store[lvl] = np.frombuffer(raw, dtype="<f4").astype(np.float32).reshape(shape)
    return HierFeatures(full, cls, layers=tuple(manifest.get("layers", (0, 0, 0))))
