"""Hierarchical mixture-of-experts fusion of encoder features.

Each encoder level has its own expert (linear -> GELU -> LayerNorm) mapping
width ``d1`` to the transformer width ``d``. A per-level scalar router reads
that level's CLS token; the three logits are normalised jointly with a
softmax, so the fusion weights always form a convex combination. The fused
tokens are used directly as reference tokens for the adapter cross-attention.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .encoder import LEVELS, HierFeatures
from .errors import ConfigError, ContractError, DimensionError, ValidationError
from .fileio import svg_bar_chart, write_csv
from .tensor import Tensor, concat, gelu, layer_norm, linear, softmax, tanh

SUM_TOL = 1e-6
BASELINE_MODES = ("add", "concat", "single:low", "single:mid", "single:high")


def _param(rng, shape, std, dtype):
    return Tensor(rng.standard_normal(shape) * std, dtype=dtype, requires_grad=True)


def _const(x, dtype):
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x), dtype=dtype)


class ExpertParams:
    """Per-level ``weight (d1, d)``, ``bias``, ``gamma`` and ``beta``."""

    def __init__(self, d1: int, d: int, rng, dtype=np.float32):
        self.d1, self.d = d1, d
        self.weight, self.bias, self.gamma, self.beta = {}, {}, {}, {}
        for lvl in LEVELS:
            self.weight[lvl] = _param(rng, (d1, d), 1.0 / np.sqrt(d1), dtype)
            self.bias[lvl] = _param(rng, (d,), 0.02, dtype)
            self.gamma[lvl] = Tensor(np.ones(d), dtype=dtype, requires_grad=True)
            self.beta[lvl] = Tensor(np.zeros(d), dtype=dtype, requires_grad=True)

    def named(self) -> dict:
        out = {}
        for lvl in LEVELS:
            out[f"{lvl}.weight"] = self.weight[lvl]
            out[f"{lvl}.bias"] = self.bias[lvl]
            out[f"{lvl}.gamma"] = self.gamma[lvl]
            out[f"{lvl}.beta"] = self.beta[lvl]
        return out


class RouterParams:
    """Per-level two-layer MLP ``d1 -> hidden -> 1`` with a Tanh in between."""

    def __init__(self, d1: int, hidden: int, rng, dtype=np.float32):
        self.d1, self.hidden = d1, hidden
        self.w1, self.b1, self.w2, self.b2 = {}, {}, {}, {}
        for lvl in LEVELS:
            self.w1[lvl] = _param(rng, (d1, hidden), 1.0 / np.sqrt(d1), dtype)
            self.b1[lvl] = _param(rng, (hidden,), 0.02, dtype)
            self.w2[lvl] = _param(rng, (hidden, 1), 1.0 / np.sqrt(hidden), dtype)
            self.b2[lvl] = Tensor(np.zeros(1), dtype=dtype, requires_grad=True)

    def named(self) -> dict:
        out = {}
        for lvl in LEVELS:
            for key in ("w1", "b1", "w2", "b2"):
                out[f"{lvl}.{key}"] = getattr(self, key)[lvl]
        return out


class BaselineParams:
    """Projections for the ``add`` and ``concat`` fusers."""

    def __init__(self, d1: int, d: int, rng, dtype=np.float32):
        self.add_weight = {lvl: _param(rng, (d1, d), 1.0 / np.sqrt(d1), dtype) for lvl in LEVELS}
        self.concat_weight = _param(rng, (3 * d1, d), 1.0 / np.sqrt(3 * d1), dtype)
        self.bias = _param(rng, (d,), 0.02, dtype)
        self.gamma = Tensor(np.ones(d), dtype=dtype, requires_grad=True)
        self.beta = Tensor(np.zeros(d), dtype=dtype, requires_grad=True)

    def named(self) -> dict:
        out = {f"add.{lvl}.weight": self.add_weight[lvl] for lvl in LEVELS}
        out.update({"concat.weight": self.concat_weight, "bias": self.bias,
                    "gamma": self.gamma, "beta": self.beta})
        return out


@dataclass
class FusionCoefficients:
    """Fusion weights over (low, mid, high), shape ``(3,)`` or ``(B, 3)``."""

    weights: Tensor
    source: str = "routed"
    allow_unnormalized: bool = False

    def __post_init__(self):
        if self.source not in ("routed", "manual"):
            raise ValidationError(f"unknown coefficient source {self.source!r}")
        if self.weights.shape[-1] != 3:
            raise DimensionError(f"fusion weights need a trailing axis of 3, got {self.weights.shape}")

    def values(self) -> np.ndarray:
        return np.asarray(self.weights.data)

    def check(self):
        w = self.values().astype(np.float64)
        if np.any(w < 0) or not np.all(np.isfinite(w)):
            raise ContractError("fusion weights must be finite and nonnegative")
        s = w.sum(axis=-1)
        ok = np.abs(s - 1.0) <= SUM_TOL
        if self.allow_unnormalized:
            ok |= s == 0.0
        if not np.all(ok):
            raise ContractError(f"fusion weights must sum to 1 within {SUM_TOL}, got {s}")


def manual_coefficients(w_low, w_mid, w_high, dtype=np.float32) -> FusionCoefficients:
    """User-chosen granularity weights; scalars or equal-length arrays."""
    w = np.stack([np.asarray(w_low), np.asarray(w_mid), np.asarray(w_high)], axis=-1)
    w64 = w.astype(np.float64)
    if np.any(w64 < 0):
        raise ValidationError(f"fusion coefficients must be nonnegative, got {w.tolist()}")
    s = w64.sum(axis=-1)
    if np.any(np.abs(s - 1.0) > SUM_TOL):
        raise ValidationError(f"fusion coefficients must sum to 1, got sum {s}")
    return FusionCoefficients(Tensor(w, dtype=dtype), source="manual")


def _full(features: HierFeatures, lvl: str, dtype) -> Tensor:
    return _const(features.full[lvl], dtype)


def expert_apply(features: HierFeatures, params: ExpertParams, dtype=None) -> dict:
    """``e_l = LayerNorm(GELU(Phi_l W_l + b_l))`` for every level."""
    dtype = dtype or params.weight[LEVELS[0]].dtype
    if features.width != params.d1:
        raise ConfigError(f"feature width {features.width} != expert input width {params.d1}")
    out = {}
    for lvl in LEVELS:
        h = gelu(linear(_full(features, lvl, dtype), params.weight[lvl], params.bias[lvl]))
        out[lvl] = layer_norm(h, params.gamma[lvl], params.beta[lvl])
    return out


def route_logits(cls: dict, params: RouterParams, dtype=None) -> Tensor:
    """Stack the three per-level scalar logits into shape ``(..., 3)``."""
    dtype = dtype or params.w1[LEVELS[0]].dtype
    cols = []
    for lvl in LEVELS:
        c = _const(cls[lvl], dtype)
        if c.shape[-1] != params.d1:
            raise DimensionError(f"CLS width {c.shape[-1]} != router input width {params.d1}")
        hid = tanh(linear(c, params.w1[lvl], params.b1[lvl]))
        logit = linear(hid, params.w2[lvl], params.b2[lvl])  # (..., 1, 1)
        cols.append(logit.reshape(logit.shape[:-2] + (1,)))
    return concat(cols, axis=-1)


def coefficients_from_logits(logits: Tensor) -> FusionCoefficients:
    return FusionCoefficients(softmax(logits, axis=-1), source="routed")


def route(cls: dict, params: RouterParams, dtype=None) -> FusionCoefficients:
    return coefficients_from_logits(route_logits(cls, params, dtype))


def fuse(e, w: FusionCoefficients) -> Tensor:
    """Weighted sum ``sum_l w_l * e_l`` accumulated in (low, mid, high) order."""
    e = [e[lvl] for lvl in LEVELS] if isinstance(e, dict) else list(e)
    if len(e) != 3:
        raise ContractError("fuse needs exactly three expert outputs")
    if any(x.shape != e[0].shape for x in e):
        raise DimensionError(f"expert outputs differ in shape: {[x.shape for x in e]}")
    w.check()
    out = None
    for i, x in enumerate(e):
        wi = w.weights[..., i]
        wi = wi.reshape(wi.shape + (1, 1))
        term = wi * x
        out = term if out is None else out + term
    return out


def apply_expert_mask(e, w: FusionCoefficients, keep: np.ndarray):
    """Zero dropped experts and renormalise the surviving weights.

    ``keep`` is a boolean array shaped like ``w.weights``. Rows without any
    drop pass through untouched; rows where every expert is dropped end up
    with all-zero weights, so the fused output there is zero.
    """
    e = [e[lvl] for lvl in LEVELS] if isinstance(e, dict) else list(e)
    keep = np.broadcast_to(np.asarray(keep, dtype=bool), w.weights.shape)
    dt = w.weights.dtype
    kf = keep.astype(dt)
    masked = []
    for i, x in enumerate(e):
        k = kf[..., i]
        masked.append(x * k.reshape(k.shape + (1, 1)))
    num = w.weights * kf
    den = num.sum(axis=-1, keepdims=True)
    row_drop = (~keep).any(axis=-1, keepdims=True).astype(dt)
    zero_den = (den.data == 0).astype(dt) * row_drop
    adjusted = num / (den * row_drop + (1.0 - row_drop) + zero_den)
    all_dropped = bool((~keep).all(axis=-1).any())
    return masked, FusionCoefficients(adjusted, source=w.source, allow_unnormalized=all_dropped)


def expert_dropout(e, w: FusionCoefficients, p: float, rng: np.random.Generator):
    """Drop each expert independently with probability ``p`` (training only)."""
    if not 0.0 <= p < 1.0:
        raise ValidationError(f"expert dropout probability must be in [0, 1), got {p}")
    if p == 0.0:
        return ([e[lvl] for lvl in LEVELS] if isinstance(e, dict) else list(e)), w
    keep = rng.random(w.weights.shape) >= p
    return apply_expert_mask(e, w, keep)


def baseline_fuse(features: HierFeatures, mode: str, params, dtype=None) -> Tensor:
    """Fusion baselines: ``add``, ``concat`` or ``single:<level>``.

    ``add`` and ``concat`` take :class:`BaselineParams`; ``single:*`` takes
    :class:`ExpertParams` and runs that level's expert alone.
    """
    mode = mode.lower()
    if mode.startswith("single:"):
        lvl = mode.split(":", 1)[1]
        if lvl not in LEVELS:
            raise ValidationError(f"unknown level {lvl!r}")
        if not isinstance(params, ExpertParams):
            raise ContractError("single-level fusion needs ExpertParams")
        return expert_apply(features, params, dtype)[lvl]
    if not isinstance(params, BaselineParams):
        raise ContractError(f"{mode} fusion needs BaselineParams")
    dtype = dtype or params.bias.dtype
    if mode == "add":
        d1 = params.add_weight[LEVELS[0]].shape[0]
        if features.width != d1:
            raise DimensionError(f"feature width {features.width} != projection width {d1}")
        z = None
        for lvl in LEVELS:
            p = _full(features, lvl, dtype) @ params.add_weight[lvl]
            z = p if z is None else z + p
    elif mode == "concat":
        if 3 * features.width != params.concat_weight.shape[0]:
            raise DimensionError(
                f"concat projection expects {params.concat_weight.shape[0]} channels, "
                f"features give {3 * features.width}")
        z = concat([_full(features, lvl, dtype) for lvl in LEVELS], axis=-1) @ params.concat_weight
    else:
        raise ValidationError(f"unknown fusion mode {mode!r}")
    return layer_norm(gelu(z + params.bias), params.gamma, params.beta)


class HMoEFFM:
    """Experts, router and baseline fusers bundled behind one call."""

    def __init__(self, d1: int, d: int, rng, mode: str = "hmoe", router_hidden: int | None = None,
                 dtype=np.float32):
        if mode != "hmoe" and mode.lower() not in BASELINE_MODES:
            raise ConfigError(f"unknown fusion mode {mode!r}")
        self.mode = mode.lower()
        self.dtype = dtype
        self.experts = ExpertParams(d1, d, rng, dtype)
        self.router = RouterParams(d1, router_hidden or d1, rng, dtype)
        self.baseline = BaselineParams(d1, d, rng, dtype)

    def named(self) -> dict:
        out = {f"experts.{k}": v for k, v in self.experts.named().items()}
        out.update({f"router.{k}": v for k, v in self.router.named().items()})
        out.update({f"baseline.{k}": v for k, v in self.baseline.named().items()})
        return out

    def __call__(self, features: HierFeatures, coefficients: FusionCoefficients | None = None,
                 expert_drop: float = 0.0, rng=None):
        """Return ``(reference tokens, coefficients)``; coefficients is None for baselines."""
        if self.mode != "hmoe":
            params = self.experts if self.mode.startswith("single:") else self.baseline
            return baseline_fuse(features, self.mode, params, self.dtype), None
        e = expert_apply(features, self.experts, self.dtype)
        w = coefficients if coefficients is not None else route(features.cls, self.router, self.dtype)
        if expert_drop > 0.0:
            e, w = expert_dropout(e, w, expert_drop, rng)
        return fuse(e, w), w


COEFFICIENT_HEADER = ("image_id", "w_low", "w_mid", "w_high", "source")


def coefficient_rows(image_ids, w: FusionCoefficients) -> list:
    vals = np.atleast_2d(w.values())
    if len(image_ids) != len(vals):
        raise ContractError(f"{len(image_ids)} image ids for {len(vals)} coefficient rows")
    return [(str(i), *(f"{float(v):.6f}" for v in row), w.source) for i, row in zip(image_ids, vals)]


def write_coefficient_csv(path, image_ids, w: FusionCoefficients, svg_path=None):
    rows = coefficient_rows(image_ids, w)
    write_csv(path, COEFFICIENT_HEADER, rows)
    if svg_path is not None:
        svg_bar_chart(svg_path, [r[0] for r in rows], [[float(x) for x in r[1:4]] for r in rows])
    return rows
