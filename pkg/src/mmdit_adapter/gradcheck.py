"""Finite-difference audit of every trainable parameter group.

For each parameter tensor a random unit-norm direction ``u`` is drawn and the
reverse-mode directional derivative ``<grad, u>`` is compared with the central
difference ``(L(p + eps u) - L(p - eps u)) / (2 eps)`` in float64.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .encoder import EncoderConfig, patchify
from .mmdit import AttentionMode, MMDiT, ModelConfig, SubjectCondition
from .tensor import Tape, Tensor, backward, mean

EPS = 1e-3
REL_TOL = 1e-4
ZERO_TOL = 1e-10


def tiny_config(seed: int = 0, fusion: str = "hmoe") -> ModelConfig:
    enc = EncoderConfig(image_size=8, patch_size=4, channels=3, depth=3, width=16, heads=2,
                        taps=(1, 2, 3), seed=seed)
    return ModelConfig(image_size=8, channels=3, patch=4, width=16, heads=2, depth=2, mlp_ratio=2,
                       text_len=3, text_dim=8, fusion=fusion, encoder=enc, seed=seed, dtype="float64")


def group_of(name: str) -> str:
    if ".adapter." in name:
        return "adapter"
    if name.startswith("hmoe.experts."):
        return "experts"
    if name.startswith("hmoe.router."):
        return "router"
    if name.startswith("hmoe.baseline."):
        return "baseline-fusers"
    return "base"


def relative_error(a: float, b: float) -> float:
    if abs(a) < ZERO_TOL and abs(b) < ZERO_TOL:
        return 0.0
    return abs(a - b) / max(abs(a), abs(b))


def flow_loss_fn(model: MMDiT, seed: int, batch: int = 2, mode=AttentionMode.TRAIN_JOINT):
    """Closure computing a flow-matching loss on fixed random inputs."""
    cfg = model.cfg
    rng = np.random.default_rng(seed + 1000)
    shape = (batch, cfg.image_size, cfg.image_size, cfg.channels)
    x_t = rng.standard_normal(shape)
    t = rng.random(batch)
    target = Tensor(patchify(rng.standard_normal(shape), cfg.patch), dtype=model.dtype)
    refs = rng.uniform(-1, 1, shape)
    ids = rng.integers(cfg.vocab_size, size=(batch, cfg.text_len))
    keep = np.arange(batch) % 2 == 0
    feats = model.encode_reference(refs)

    def loss():
        C, _ = model.reference_tokens(feats)
        text = model.text_tokens(ids, keep=keep)
        pred = model.forward(x_t, t, text, [SubjectCondition(C, None, 1.0)], mode)
        diff = pred - target
        return mean(diff * diff)

    return loss


@dataclass
class CheckResult:
    name: str
    group: str
    analytic: float
    numeric: float
    rel_error: float

    @property
    def ok(self) -> bool:
        return self.rel_error < REL_TOL


def check_model(model: MMDiT, loss_fn, seed: int, eps: float = EPS, names=None) -> list:
    params = model.named_parameters()
    names = list(params) if names is None else names
    with Tape() as tape:
        loss = loss_fn()
    grads = backward(tape, loss)
    rng = np.random.default_rng(seed)
    results = []
    for name in names:
        p = params[name]
        u = rng.standard_normal(p.shape)
        u /= np.linalg.norm(u)
        analytic = float(np.sum(grads[p] * u))
        orig = p.data
        p.data = orig + eps * u
        up = loss_fn().item()
        p.data = orig - eps * u
        down = loss_fn().item()
        p.data = orig
        numeric = (up - down) / (2 * eps)
        results.append(CheckResult(name, group_of(name), analytic, numeric,
                                   relative_error(analytic, numeric)))
    return results


def run_suite(seeds=(0,), eps: float = EPS) -> list:
    """Check every parameter of a float64 toy model (HMoE plus add/concat fusers) per seed."""
    results = []
    for seed in seeds:
        for fusion in ("hmoe", "add", "concat"):
            model = MMDiT(tiny_config(seed, fusion))
            names = None
            if fusion != "hmoe":
                names = [n for n in model.params if group_of(n) == "baseline-fusers"]
            results += check_model(model, flow_loss_fn(model, seed), seed, eps, names)
    return results


def summarize(results) -> dict:
    """Worst relative error per parameter group."""
    out = {}
    for r in results:
        out[r.group] = max(out.get(r.group, 0.0), r.rel_error)
    return out


def is_finite_results(results) -> bool:
    return all(math.isfinite(r.analytic) and math.isfinite(r.numeric) for r in results)
