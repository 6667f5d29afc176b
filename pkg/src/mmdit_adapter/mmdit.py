"""Miniature MM-DiT with an image-prompt adapter in every block.

Text tokens ``T (n, d)`` and noisy-image tokens ``X (m, d)`` share one joint
attention. Each block also owns adapter key/value projections that turn the
reference tokens ``C (h, d)`` into keys and values for a cross-attention
driven by the joint-attention queries. Where the adapter output is added
depends on the :class:`AttentionMode`:

* ``train_joint`` - both branches (the training-time configuration),
* ``infer_image_only`` - image rows only, optionally masked per subject,
* ``text_only_probe`` - text rows only (diagnostic),
* ``both_branches_legacy`` - both branches at inference (no decoupling).
"""

from __future__ import annotations

import enum
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .encoder import EncoderConfig, HierEncoder, HierFeatures, patchify, unpatchify
from .errors import ConfigError, ContractError, DimensionError
from .fileio import write_csv, write_pgm
from .hmoe import HMoEFFM, FusionCoefficients
from .tensor import Tensor, concat, gelu, layer_norm, linear, softmax

TEXT_VOCAB = (
    # scene tags
    "room", "snow", "jungle", "beach",
    # placement tags, row-major 3x3
    "top-left", "top", "top-right", "left", "center", "right",
    "bottom-left", "bottom", "bottom-right",
    # size tags
    "small", "large",
)


class AttentionMode(str, enum.Enum):
    TRAIN_JOINT = "train_joint"
    INFER_IMAGE_ONLY = "infer_image_only"
    BOTH_BRANCHES_LEGACY = "both_branches_legacy"
    TEXT_ONLY_PROBE = "text_only_probe"


@dataclass
class SubjectCondition:
    """Reference tokens ``C``, an optional binary mask over image tokens, and a weight."""

    tokens: Tensor
    mask: np.ndarray | None = None
    weight: float = 1.0

    def validate(self, m: int):
        if not math.isfinite(self.weight):
            raise ContractError("subject weight must be finite")
        if self.tokens.shape[-2] < 1:
            raise ContractError("reference token sequence is empty")
        if self.mask is not None:
            mask = np.asarray(self.mask)
            if mask.shape[-1] != m:
                raise DimensionError(f"mask length {mask.shape[-1]} != image token count {m}")
            if not np.isin(mask, (0, 1)).all():
                raise ContractError("mask entries must be 0 or 1")

    def full_mask(self) -> bool:
        return self.mask is None or bool(np.all(np.asarray(self.mask) == 1))


@dataclass
class AdapterProbe:
    """Diagnostics collected while the adapter runs.

    ``text_query_delta`` is added to the text-branch queries seen by the adapter
    (not by the joint attention). After a forward pass ``x_terms``/``t_terms``
    hold the per-layer adapter additions and ``subject_terms`` the per-layer,
    per-subject masked contributions on the image rows.
    """

    text_query_delta: np.ndarray | None = None
    x_terms: list = field(default_factory=list)
    t_terms: list = field(default_factory=list)
    subject_terms: list = field(default_factory=list)
    layer_inputs: list = field(default_factory=list)
    queries: list = field(default_factory=list)


# -- rotary position encoding -----------------------------------------
class Rope:
    """Axial 2-D rotary encoding; text tokens sit at position (0, 0)."""

    def __init__(self, head_dim: int, grid: int, base: float = 100.0):
        if head_dim % 4:
            raise ConfigError(f"rotary encoding needs head_dim divisible by 4, got {head_dim}")
        self.head_dim, self.grid = head_dim, grid
        nfreq = head_dim // 4
        self.freqs = base ** (-np.arange(nfreq) / nfreq)
        rot = np.zeros((head_dim, head_dim))
        for i in range(0, head_dim, 2):
            rot[i + 1, i] = -1.0
            rot[i, i + 1] = 1.0
        self.rotation = rot
        self._cache = {}

    def tables(self, n: int, dtype):
        key = (n, np.dtype(dtype).str)
        if key not in self._cache:
            ys, xs = np.meshgrid(np.arange(self.grid), np.arange(self.grid), indexing="ij")
            pos = np.concatenate([np.zeros((n, 2)), np.stack([ys.ravel(), xs.ravel()], 1)])
            ang = np.concatenate([pos[:, :1] * self.freqs, pos[:, 1:] * self.freqs], axis=1)
            ang = np.repeat(ang, 2, axis=1)
            self._cache[key] = tuple(Tensor(a, dtype=dtype) for a in
                                     (np.cos(ang), np.sin(ang), self.rotation))
        return self._cache[key]

    def apply(self, x: Tensor, n: int) -> Tensor:
        """Rotate ``(..., H, n + m, dh)`` queries or keys."""
        cos, sin, rot = self.tables(n, x.dtype)
        if x.shape[-2] != cos.shape[0]:
            raise DimensionError(f"rotary table covers {cos.shape[0]} tokens, got {x.shape[-2]}")
        return x * cos + (x @ rot) * sin


# -- parameters --------------------------------------------------------
def _p(rng, shape, std, dtype):
    return Tensor(rng.standard_normal(shape) * std, dtype=dtype, requires_grad=True)


def _ones(n, dtype):
    return Tensor(np.ones(n), dtype=dtype, requires_grad=True)


def _zeros(n, dtype):
    return Tensor(np.zeros(n), dtype=dtype, requires_grad=True)


class BranchParams:
    """Projections, norms and MLP for one stream (text or image)."""

    def __init__(self, d: int, hidden: int, rng, dtype, out_scale: float):
        s = 1.0 / math.sqrt(d)
        self.norm1_g, self.norm1_b = _ones(d, dtype), _zeros(d, dtype)
        self.q_w, self.q_b = _p(rng, (d, d), s, dtype), _p(rng, (d,), 0.02, dtype)
        self.k_w, self.k_b = _p(rng, (d, d), s, dtype), _p(rng, (d,), 0.02, dtype)
        self.v_w, self.v_b = _p(rng, (d, d), s, dtype), _p(rng, (d,), 0.02, dtype)
        self.out_w, self.out_b = _p(rng, (d, d), s * out_scale, dtype), _p(rng, (d,), 0.02, dtype)
        self.norm2_g, self.norm2_b = _ones(d, dtype), _zeros(d, dtype)
        self.fc1_w, self.fc1_b = _p(rng, (d, hidden), s, dtype), _p(rng, (hidden,), 0.02, dtype)
        self.fc2_w = _p(rng, (hidden, d), out_scale / math.sqrt(hidden), dtype)
        self.fc2_b = _p(rng, (d,), 0.02, dtype)

    def named(self) -> dict:
        return dict(vars(self))


class AdapterParams:
    """Key/value projections for the reference tokens (no bias, no position code)."""

    def __init__(self, d: int, rng, dtype):
        self.k_w = _p(rng, (d, d), 1.0 / math.sqrt(d), dtype)
        self.v_w = _p(rng, (d, d), 1.0 / math.sqrt(d), dtype)

    def named(self) -> dict:
        return {"k_w": self.k_w, "v_w": self.v_w}


class BlockParams:
    def __init__(self, d: int, heads: int, mlp_ratio: int, rng, dtype, out_scale: float = 0.5):
        if d % heads:
            raise ConfigError(f"width {d} not divisible by head count {heads}")
        self.width, self.heads = d, heads
        self.txt = BranchParams(d, mlp_ratio * d, rng, dtype, out_scale)
        self.img = BranchParams(d, mlp_ratio * d, rng, dtype, out_scale)
        self.mod_w = _p(rng, (d, 8 * d), 0.02, dtype)
        self.mod_b = _zeros(8 * d, dtype)
        self.adapter = AdapterParams(d, rng, dtype)

    def named(self) -> dict:
        out = {f"txt.{k}": v for k, v in self.txt.named().items()}
        out.update({f"img.{k}": v for k, v in self.img.named().items()})
        out.update({"mod_w": self.mod_w, "mod_b": self.mod_b})
        out.update({f"adapter.{k}": v for k, v in self.adapter.named().items()})
        return out


# -- attention primitives ---------------------------------------------
def split_heads(x: Tensor, heads: int) -> Tensor:
    d = x.shape[-1]
    return x.reshape(x.shape[:-1] + (heads, d // heads)).swapaxes(-2, -3)


def merge_heads(x: Tensor) -> Tensor:
    y = x.swapaxes(-2, -3)
    return y.reshape(y.shape[:-2] + (y.shape[-2] * y.shape[-1],))


def attention(q: Tensor, k: Tensor, v: Tensor) -> Tensor:
    """Scaled dot-product attention on split heads ``(..., H, L, dh)``."""
    scale = 1.0 / math.sqrt(q.shape[-1])
    return softmax((q @ k.swapaxes(-1, -2)) * scale, axis=-1) @ v


def mma(T: Tensor, X: Tensor, params: BlockParams, rope: Rope | None = None):
    """Joint attention over ``[T, X]``.

    Returns ``(T_mma, X_mma, Q)`` where ``Q`` is the position-encoded joint
    query with merged heads, shape ``(..., n + m, d)``; its last ``m`` rows are
    the image queries reused by the adapter.
    """
    n, m, d = T.shape[-2], X.shape[-2], X.shape[-1]
    if m == 0:
        raise ContractError("joint attention needs at least one image token")
    if T.shape[-1] != d or d != params.width:
        raise DimensionError(f"token widths {T.shape[-1]}, {d} do not match block width {params.width}")
    h = params.heads
    tp, ip = params.txt, params.img

    def proj(w, b, wi, bi):
        return split_heads(concat([linear(T, w, b), linear(X, wi, bi)], axis=-2), h)

    q = proj(tp.q_w, tp.q_b, ip.q_w, ip.q_b)
    k = proj(tp.k_w, tp.k_b, ip.k_w, ip.k_b)
    v = proj(tp.v_w, tp.v_b, ip.v_w, ip.v_b)
    if rope is not None:
        q, k = rope.apply(q, n), rope.apply(k, n)
    out = merge_heads(attention(q, k, v))
    return out[..., :n, :], out[..., n:, :], merge_heads(q)


def _reference_kv(C: Tensor, params: BlockParams):
    if C.shape[-2] < 1:
        raise ContractError("cross-attention needs at least one reference token")
    h = params.heads
    return (split_heads(C @ params.adapter.k_w, h), split_heads(C @ params.adapter.v_w, h))


def ca_image(Q_X: Tensor, C: Tensor, params: BlockParams) -> Tensor:
    """Image-query cross-attention onto the reference tokens, ``(..., m, d)``."""
    k, v = _reference_kv(C, params)
    return merge_heads(attention(split_heads(Q_X, params.heads), k, v))


def ca_joint(Q: Tensor, C: Tensor, params: BlockParams, n: int) -> Tensor:
    """Cross-attention for every row of the joint query (text rows first).

    Rows are independent, so the image rows are computed by the very same call
    as :func:`ca_image`; the result is assembled by concatenation.
    """
    parts = []
    if n > 0:
        parts.append(ca_image(Q[..., :n, :], C, params))
    parts.append(ca_image(Q[..., n:, :], C, params))
    return concat(parts, axis=-2) if len(parts) > 1 else parts[0]


def attn_map(Q_X: Tensor, C: Tensor, params: BlockParams) -> np.ndarray:
    """Head-averaged attention probabilities of queries onto reference tokens."""
    k, _ = _reference_kv(C, params)
    q = split_heads(Q_X, params.heads)
    scale = 1.0 / math.sqrt(q.shape[-1])
    probs = softmax((q @ k.swapaxes(-1, -2)) * scale, axis=-1)
    return probs.data.mean(axis=-3)


def _mask_tensor(mask, dtype) -> Tensor:
    mask = np.asarray(mask)
    return Tensor(mask[..., None], dtype=dtype)


def adapter_terms(Q: Tensor, n: int, conditions, mode: AttentionMode, params: BlockParams,
                  probe: AdapterProbe | None = None):
    """Adapter additions ``(t_term, x_term)``; either may be None."""
    mode = AttentionMode(mode)
    if not conditions:
        return None, None
    m = Q.shape[-2] - n
    for c in conditions:
        c.validate(m)
    if mode is AttentionMode.TRAIN_JOINT and len(conditions) != 1:
        raise ContractError("train_joint mode takes exactly one subject condition")
    if mode is AttentionMode.TRAIN_JOINT and not conditions[0].full_mask():
        raise ContractError("train_joint mode does not accept a region mask")

    Q_T, Q_X = Q[..., :n, :], Q[..., n:, :]
    if probe is not None:
        probe.queries.append((Q_T.data.copy(), Q_X.data.copy()))
    if probe is not None and probe.text_query_delta is not None and n > 0:
        Q_T = Q_T + Tensor(probe.text_query_delta, dtype=Q.dtype)
    use_text = mode is not AttentionMode.INFER_IMAGE_ONLY and n > 0
    use_image = mode is not AttentionMode.TEXT_ONLY_PROBE

    t_parts, x_parts = [], []
    for c in conditions:
        if use_text:
            t_parts.append(ca_image(Q_T, c.tokens, params) * c.weight)
        if use_image:
            ca = ca_image(Q_X, c.tokens, params)
            if c.mask is not None:
                ca = ca * _mask_tensor(c.mask, Q.dtype)
            x_parts.append(ca * c.weight)

    def total(parts):
        if not parts:
            return None
        out = parts[0]
        for p in parts[1:]:
            out = out + p
        return out

    t_term, x_term = total(t_parts), total(x_parts)
    if probe is not None:
        probe.t_terms.append(None if t_term is None else t_term.data.copy())
        probe.x_terms.append(None if x_term is None else x_term.data.copy())
        probe.subject_terms.append([p.data.copy() for p in x_parts])
    return t_term, x_term


def dca(T: Tensor, X: Tensor, conditions, mode: AttentionMode, params: BlockParams,
        rope: Rope | None = None, probe: AdapterProbe | None = None):
    """Joint attention plus the mode-dependent adapter term.

    Returns ``(T_out, X_out)`` in attention-output space (before the output
    projection).
    """
    T_mma, X_mma, Q = mma(T, X, params, rope)
    t_term, x_term = adapter_terms(Q, T.shape[-2], conditions, mode, params, probe)
    T_out = T_mma if t_term is None else T_mma + t_term
    X_out = X_mma if x_term is None else X_mma + x_term
    return T_out, X_out


def _modulate(x: Tensor, g: Tensor, b: Tensor, shift: Tensor, scale: Tensor) -> Tensor:
    return layer_norm(x, g, b) * (scale + 1.0) + shift


def block_forward(T: Tensor, X: Tensor, temb: Tensor, conditions, mode: AttentionMode,
                  params: BlockParams, rope: Rope | None = None,
                  probe: AdapterProbe | None = None):
    """One block: modulated pre-norm, adapter-augmented attention, residual, MLP."""
    d = params.width
    mod = linear(gelu(temb), params.mod_w, params.mod_b)
    mod = mod.reshape(mod.shape[:-1] + (1, 8 * d))
    chunk = [mod[..., i * d:(i + 1) * d] for i in range(8)]
    tp, ip = params.txt, params.img
    if probe is not None:
        probe.layer_inputs.append((T.data.copy(), X.data.copy()))

    Tn = _modulate(T, tp.norm1_g, tp.norm1_b, chunk[0], chunk[1])
    Xn = _modulate(X, ip.norm1_g, ip.norm1_b, chunk[2], chunk[3])
    T_att, X_att = dca(Tn, Xn, conditions, mode, params, rope, probe)
    T = T + linear(T_att, tp.out_w, tp.out_b)
    X = X + linear(X_att, ip.out_w, ip.out_b)

    Th = _modulate(T, tp.norm2_g, tp.norm2_b, chunk[4], chunk[5])
    Xh = _modulate(X, ip.norm2_g, ip.norm2_b, chunk[6], chunk[7])
    T = T + linear(gelu(linear(Th, tp.fc1_w, tp.fc1_b)), tp.fc2_w, tp.fc2_b)
    X = X + linear(gelu(linear(Xh, ip.fc1_w, ip.fc1_b)), ip.fc2_w, ip.fc2_b)
    return T, X


def timestep_embedding(t: np.ndarray, dim: int, scale: float = 1000.0) -> np.ndarray:
    t = np.asarray(t, dtype=np.float64).reshape(-1) * scale
    half = dim // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half) / half)
    ang = t[:, None] * freqs[None, :]
    emb = np.concatenate([np.cos(ang), np.sin(ang)], axis=1)
    if dim % 2:
        emb = np.concatenate([emb, np.zeros((len(t), 1))], axis=1)
    return emb


# -- full model ------------------------------------------------------------
@dataclass(frozen=True)
class ModelConfig:
    image_size: int = 24
    channels: int = 3
    patch: int = 4
    width: int = 64
    heads: int = 4
    depth: int = 3
    mlp_ratio: int = 2
    text_len: int = 3
    vocab_size: int = len(TEXT_VOCAB)
    text_dim: int = 16
    rope: bool = True
    rope_base: float = 100.0
    fusion: str = "hmoe"
    router_hidden: int | None = None
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    seed: int = 0
    dtype: str = "float32"

    def __post_init__(self):
        if isinstance(self.encoder, dict):
            object.__setattr__(self, "encoder", EncoderConfig(**self.encoder))
        if self.image_size % self.patch:
            raise ConfigError("image size must be divisible by the patch size")
        if self.encoder.image_size != self.image_size or self.encoder.channels != self.channels:
            raise ConfigError("encoder input must match the generated image size")

    @property
    def grid(self) -> int:
        return self.image_size // self.patch

    @property
    def num_tokens(self) -> int:
        return self.grid ** 2

    @property
    def patch_dim(self) -> int:
        return self.patch * self.patch * self.channels

    def to_dict(self) -> dict:
        d = asdict(self)
        d["encoder"] = self.encoder.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


ADAPTER_PREFIXES = ("hmoe.", "null_text")


class MMDiT:
    """Velocity model over patch tokens with per-block adapters and HMoE fusion."""

    def __init__(self, cfg: ModelConfig = ModelConfig()):
        self.cfg = cfg
        dt = np.dtype(cfg.dtype).type
        self.dtype = dt
        rng = np.random.default_rng(cfg.seed)
        d, P = cfg.width, cfg.patch_dim
        self.encoder = HierEncoder(cfg.encoder)
        table_rng = np.random.default_rng([cfg.seed, 7])
        self.text_table = table_rng.standard_normal((cfg.vocab_size, cfg.text_dim)).astype(dt)

        self.params: dict = {}
        self.params["patch_w"] = _p(rng, (P, d), 1.0 / math.sqrt(P), dt)
        self.params["patch_b"] = _zeros(d, dt)
        self.params["text_w"] = _p(rng, (cfg.text_dim, d), 1.0 / math.sqrt(cfg.text_dim), dt)
        self.params["text_b"] = _zeros(d, dt)
        self.params["null_text"] = _p(rng, (cfg.text_len, d), 1.0, dt)
        self.params["time_w1"] = _p(rng, (d, d), 1.0 / math.sqrt(d), dt)
        self.params["time_b1"] = _zeros(d, dt)
        self.params["time_w2"] = _p(rng, (d, d), 1.0 / math.sqrt(d), dt)
        self.params["time_b2"] = _zeros(d, dt)
        self.blocks = [BlockParams(d, cfg.heads, cfg.mlp_ratio, rng, dt) for _ in range(cfg.depth)]
        for i, blk in enumerate(self.blocks):
            self.params.update({f"blocks.{i}.{k}": v for k, v in blk.named().items()})
        self.params["final_mod_w"] = _p(rng, (d, 2 * d), 0.02, dt)
        self.params["final_mod_b"] = _zeros(2 * d, dt)
        self.params["final_w"] = _p(rng, (d, P), 0.02, dt)
        self.params["final_b"] = _zeros(P, dt)
        self.hmoe = HMoEFFM(cfg.encoder.width, d, rng, mode=cfg.fusion,
                            router_hidden=cfg.router_hidden, dtype=dt)
        self.params.update({f"hmoe.{k}": v for k, v in self.hmoe.named().items()})
        for name, p in self.params.items():
            p.name = name
        self.rope = Rope(d // cfg.heads, cfg.grid, cfg.rope_base) if cfg.rope else None

    # -- parameter views ---------------------------------------------------
    def named_parameters(self) -> dict:
        return dict(self.params)

    @staticmethod
    def is_adapter(name: str) -> bool:
        return name.startswith(ADAPTER_PREFIXES) or ".adapter." in name

    def trainable(self, train_base: bool = True) -> dict:
        return {k: v for k, v in self.params.items() if train_base or self.is_adapter(k)}

    # -- conditioning ------------------------------------------------------
    def encode_reference(self, images: np.ndarray) -> HierFeatures:
        return self.encoder.encode(images)

    def reference_tokens(self, features: HierFeatures, coefficients: FusionCoefficients | None = None,
                         expert_drop: float = 0.0, rng=None):
        """Fused reference tokens ``C`` and the coefficients used (None for baselines)."""
        return self.hmoe(features, coefficients, expert_drop, rng)

    def text_tokens(self, ids, keep=None) -> Tensor:
        """Embed tag ids ``(B, n)``; rows with ``keep == 0`` (or ids None) use the null text."""
        p = self.params
        if ids is None:
            return p["null_text"]
        ids = np.asarray(ids)
        if ids.shape[-1] != self.cfg.text_len:
            raise DimensionError(f"expected {self.cfg.text_len} text tokens, got {ids.shape[-1]}")
        emb = linear(Tensor(self.text_table[ids], dtype=self.dtype), p["text_w"], p["text_b"])
        if keep is None:
            return emb
        k = Tensor(np.asarray(keep, dtype=self.dtype).reshape(-1, 1, 1), dtype=self.dtype)
        return emb * k + p["null_text"] * (1.0 - k)

    # -- forward -------------------------------------------------------------
    def forward(self, x_t: np.ndarray, t, text: Tensor, conditions=(), mode=AttentionMode.TRAIN_JOINT,
                probe: AdapterProbe | None = None) -> Tensor:
        """Predict velocity tokens ``(B, m, patch_dim)`` for images ``(B, H, W, C)``."""
        cfg, p = self.cfg, self.params
        x_t = np.asarray(x_t)
        if x_t.shape[-3:] != (cfg.image_size, cfg.image_size, cfg.channels):
            raise DimensionError(f"image shape {x_t.shape} does not match model config")
        B = x_t.shape[0]
        tokens = Tensor(patchify(x_t, cfg.patch), dtype=self.dtype)
        X = linear(tokens, p["patch_w"], p["patch_b"])
        T = text
        if T.ndim == 2:
            T = T * Tensor(np.ones((B, 1, 1)), dtype=self.dtype)
        temb_raw = Tensor(timestep_embedding(np.broadcast_to(np.asarray(t), (B,)), cfg.width),
                          dtype=self.dtype)
        temb = linear(gelu(linear(temb_raw, p["time_w1"], p["time_b1"])), p["time_w2"], p["time_b2"])
        conditions = list(conditions)
        for blk in self.blocks:
            T, X = block_forward(T, X, temb, conditions, mode, blk, self.rope, probe)
        mod = linear(gelu(temb), p["final_mod_w"], p["final_mod_b"]).reshape((B, 1, 2 * cfg.width))
        Xf = layer_norm(X) * (mod[..., cfg.width:] + 1.0) + mod[..., :cfg.width]
        return linear(Xf, p["final_w"], p["final_b"])

    def predict_velocity(self, x_t, t, text_ids, conditions=(), mode=AttentionMode.INFER_IMAGE_ONLY,
                         probe: AdapterProbe | None = None) -> np.ndarray:
        """Untracked forward returning a velocity image shaped like ``x_t``."""
        cfg = self.cfg
        out = self.forward(x_t, t, self.text_tokens(text_ids), conditions, mode, probe)
        return unpatchify(out.data, cfg.patch, cfg.image_size, cfg.channels)


# -- attention-map export ----------------------------------------------
def export_attention_map(prefix, amap: np.ndarray, grid: int | None = None):
    """Write ``<prefix>.csv`` (query x reference token) and ``<prefix>.pgm``.

    With ``grid`` given, also write ``<prefix>_ref.pgm``: the attention mass
    each reference token receives, averaged over queries, laid out on its
    patch grid.
    """
    amap = np.asarray(amap, dtype=np.float64)
    rows = [(i, j, f"{amap[i, j]:.8f}") for i in range(amap.shape[0]) for j in range(amap.shape[1])]
    write_csv(f"{prefix}.csv", ("query_token", "reference_token", "weight"), rows)
    write_pgm(f"{prefix}.pgm", amap)
    if grid is not None and amap.shape[1] == grid * grid:
        write_pgm(f"{prefix}_ref.pgm", amap.mean(axis=0).reshape(grid, grid))
