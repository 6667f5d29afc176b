"""Rectified-flow training on procedurally generated subject scenes.

Scenes are 24x24 RGB grids in [-1, 1]: a background chosen by a scene tag and
one subject (shape, colour, texture motif) placed on a 3x3 anchor grid at one
of two sizes. The text prompt is the (scene, placement, size) tag triple.

* intra pairs: the reference is the target with its background painted white;
* cross pairs: the reference shows the same subject at a different pose on
  white, so the model has to transfer appearance rather than copy pixels.

Training runs two stages (intra only, then a mix of intra and cross) with
classifier-free-guidance dropout on text and image, per-expert dropout inside
the fusion module, and decoupled weight decay Adam on a cosine schedule.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from .encoder import patchify
from .errors import ContractError, NumericError, TrainingDivergedError, ValidationError
from .fileio import atomic_write_text, svg_line_chart, write_csv
from .mmdit import TEXT_VOCAB, AttentionMode, MMDiT, ModelConfig, SubjectCondition
from .tensor import Tape, Tensor, backward, mean

log = logging.getLogger(__name__)

SCENES = TEXT_VOCAB[:4]
PLACEMENTS = TEXT_VOCAB[4:13]
SIZES = TEXT_VOCAB[13:15]
SHAPES = ("disk", "square", "diamond")
MOTIFS = ("solid", "stripes", "dots")
PALETTE = np.array([
    [0.9, -0.8, -0.8], [-0.8, 0.8, -0.7], [-0.8, -0.6, 0.9],
    [0.9, 0.7, -0.9], [0.7, -0.8, 0.8], [-0.9, 0.7, 0.8],
])
WHITE = 1.0
IMAGE_SIZE = 24
_ANCHORS = (6, 12, 18)
_RADII = (4, 6)


@dataclass(frozen=True)
class SubjectDescriptor:
    shape: str
    color: int
    motif: str


@dataclass
class ToyScene:
    target: np.ndarray
    reference: np.ndarray
    descriptor: SubjectDescriptor
    scene: str
    placement: int
    size: int
    pairing: str
    text_ids: np.ndarray


def background(scene: str, size: int = IMAGE_SIZE) -> np.ndarray:
    yy = np.linspace(0.0, 1.0, size)[:, None, None]
    xx = np.linspace(0.0, 1.0, size)[None, :, None]
    img = np.zeros((size, size, 3))
    if scene == "room":
        img[:] = np.array([0.1, -0.3, -0.6]) + 0.3 * yy
    elif scene == "snow":
        img[:] = np.array([0.3, 0.4, 0.6]) - 0.3 * yy
    elif scene == "jungle":
        img[:] = np.array([-0.7, 0.0, -0.6]) + 0.25 * np.sin(xx * 6 * np.pi)
    elif scene == "beach":
        img[:] = np.where(yy < 0.5, np.array([-0.3, 0.2, 0.7]), np.array([0.6, 0.4, -0.2]))
    else:
        raise ValidationError(f"unknown scene tag {scene!r}")
    return img


def subject_mask(desc: SubjectDescriptor, placement: int, size: int, side: int = IMAGE_SIZE) -> np.ndarray:
    cy, cx = _ANCHORS[placement // 3], _ANCHORS[placement % 3]
    r = _RADII[size]
    yy, xx = np.mgrid[0:side, 0:side] + 0.5
    dy, dx = yy - cy, xx - cx
    if desc.shape == "disk":
        return dy ** 2 + dx ** 2 <= r ** 2
    if desc.shape == "square":
        return (np.abs(dy) <= r * 0.85) & (np.abs(dx) <= r * 0.85)
    return np.abs(dy) + np.abs(dx) <= r * 1.2


def subject_pixels(desc: SubjectDescriptor, side: int = IMAGE_SIZE) -> np.ndarray:
    base = PALETTE[desc.color]
    img = np.broadcast_to(base, (side, side, 3)).copy()
    yy, xx = np.mgrid[0:side, 0:side]
    if desc.motif == "stripes":
        img[(yy // 2) % 2 == 1] *= 0.3
    elif desc.motif == "dots":
        img[((yy // 2) % 2 == 0) & ((xx // 2) % 2 == 0)] = -1.0
    return img


def render(desc: SubjectDescriptor, placement: int, size: int, scene: str | None) -> tuple:
    """Return ``(image, subject_mask)``; ``scene=None`` paints a white background."""
    mask = subject_mask(desc, placement, size)
    bg = np.full((IMAGE_SIZE, IMAGE_SIZE, 3), WHITE) if scene is None else background(scene)
    img = np.where(mask[..., None], subject_pixels(desc), bg)
    return img.astype(np.float32), mask


def text_ids(scene: str, placement: int, size: int) -> np.ndarray:
    return np.array([TEXT_VOCAB.index(scene), TEXT_VOCAB.index(PLACEMENTS[placement]),
                     TEXT_VOCAB.index(SIZES[size])])


def make_scene(rng: np.random.Generator, pairing: str) -> ToyScene:
    if pairing not in ("intra", "cross"):
        raise ValidationError(f"unknown pairing kind {pairing!r}")
    desc = SubjectDescriptor(SHAPES[rng.integers(3)], int(rng.integers(len(PALETTE))),
                             MOTIFS[rng.integers(3)])
    scene = SCENES[rng.integers(len(SCENES))]
    placement, size = int(rng.integers(9)), int(rng.integers(2))
    target, mask = render(desc, placement, size, scene)
    if pairing == "intra":
        reference = np.where(mask[..., None], target, np.float32(WHITE)).astype(np.float32)
    else:
        pose = int(rng.integers(17))
        pose += pose >= placement * 2 + size  # any pose except the target's own
        reference, _ = render(desc, pose // 2, pose % 2, None)
    return ToyScene(target, reference, desc, scene, placement, size, pairing,
                    text_ids(scene, placement, size))


def synth_batch(rng: np.random.Generator, pairing: str, batch_size: int, cross_fraction: float = 0.5):
    """Return ``(scenes, text_ids (B, 3))``; ``pairing='mixed'`` draws cross pairs at ``cross_fraction``."""
    scenes = []
    for _ in range(batch_size):
        kind = pairing
        if pairing == "mixed":
            kind = "cross" if rng.random() < cross_fraction else "intra"
        scenes.append(make_scene(rng, kind))
    return scenes, np.stack([s.text_ids for s in scenes])


def flow_sample(x0: np.ndarray, eps: np.ndarray, t):
    """Point on the straight path and its velocity: ``x_t = (1-t) x0 + t eps``, ``v = eps - x0``."""
    x0, eps = np.asarray(x0), np.asarray(eps)
    if x0.shape != eps.shape:
        raise ContractError(f"x0 {x0.shape} and noise {eps.shape} differ in shape")
    t = np.asarray(t, dtype=x0.dtype)
    if np.any(t < 0) or np.any(t > 1) or not np.all(np.isfinite(t)):
        raise ContractError("t must lie in [0, 1]")
    tb = t.reshape(t.shape + (1,) * (x0.ndim - t.ndim))
    return (1 - tb) * x0 + tb * eps, eps - x0


# -- optimisation ------------------------------------------------------------
def cosine_lr(step: int, total: int, initial: float) -> float:
    """Cosine decay from ``initial`` at step 0 to 0 at step ``total - 1``."""
    if total <= 1:
        return initial
    return initial * 0.5 * (1.0 + math.cos(math.pi * min(step, total - 1) / (total - 1)))


class AdamW:
    """Adam with decoupled weight decay over a dict of named tensors."""

    def __init__(self, params: dict, weight_decay: float = 1e-4, betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = params
        self.weight_decay = weight_decay
        self.betas = betas
        self.eps = eps
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def step(self, grads: dict, lr: float):
        self.t += 1
        b1, b2 = self.betas
        c1, c2 = 1.0 - b1 ** self.t, 1.0 - b2 ** self.t
        for name, p in self.params.items():
            g = grads.get(name)
            if g is None:
                g = np.zeros_like(p.data)
            self.m[name] = b1 * self.m[name] + (1 - b1) * g
            self.v[name] = b2 * self.v[name] + (1 - b2) * g * g
            update = (self.m[name] / c1) / (np.sqrt(self.v[name] / c2) + self.eps)
            p.data = (p.data - lr * (update + self.weight_decay * p.data)).astype(p.dtype)

    def state(self) -> dict:
        return {"t": self.t, "m": self.m, "v": self.v}

    def load_state(self, state: dict):
        self.t = int(state["t"])
        for k in self.params:
            self.m[k] = np.asarray(state["m"][k], dtype=self.params[k].dtype)
            self.v[k] = np.asarray(state["v"][k], dtype=self.params[k].dtype)


# -- configuration -------------------------------------------------------
@dataclass
class TrainConfig:
    stage1_steps: int = 300
    stage2_steps: int = 700
    batch_size: int = 8
    lr: float = 1e-3
    weight_decay: float = 1e-4
    p_drop_text: float = 0.05
    p_drop_image: float = 0.05
    p_drop_both: float = 0.05
    p_drop_expert: float = 0.05
    lam: float = 1.0
    cross_fraction: float = 0.5
    train_base: bool = True
    checkpoint_every: int = 0
    seed: int = 0
    model: ModelConfig = field(default_factory=ModelConfig)

    def __post_init__(self):
        if isinstance(self.model, dict):
            self.model = ModelConfig.from_dict(self.model)
        for name in ("p_drop_text", "p_drop_image", "p_drop_both", "p_drop_expert", "cross_fraction"):
            v = getattr(self, name)
            if not 0.0 <= v < 1.0 and not (name == "cross_fraction" and v == 1.0):
                raise ValidationError(f"{name} must lie in [0, 1), got {v}")
        if self.p_drop_text + self.p_drop_image + self.p_drop_both >= 1.0:
            raise ValidationError("conditioning dropout probabilities must sum below 1")
        if self.stage1_steps < 0 or self.stage2_steps < 0 or self.batch_size < 1:
            raise ValidationError("stage lengths must be >= 0 and batch size >= 1")

    @property
    def total_steps(self) -> int:
        return self.stage1_steps + self.stage2_steps

    def to_dict(self) -> dict:
        d = {f.name: getattr(self, f.name) for f in fields(self) if f.name != "model"}
        d["model"] = self.model.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValidationError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def load(cls, path) -> "TrainConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def save(self, path):
        atomic_write_text(path, json.dumps(self.to_dict(), indent=2, sort_keys=True))


def conditioning_dropout(rng: np.random.Generator, batch: int, cfg: TrainConfig):
    """Per-sample keep flags ``(text_keep, image_keep)``.

    The three drop events are mutually exclusive: text only, image only, both.
    """
    u = rng.random(batch)
    a = cfg.p_drop_text
    b = a + cfg.p_drop_image
    c = b + cfg.p_drop_both
    drop_text = (u < a) | ((u >= b) & (u < c))
    drop_image = (u >= a) & (u < c)
    return (~drop_text).astype(np.float64), (~drop_image).astype(np.float64)


def _diagnostics(model: MMDiT, step: int, loss) -> dict:
    return {"step": step, "loss": float(loss),
            "param_norms": {k: float(np.linalg.norm(p.data)) for k, p in model.params.items()},
            "non_finite_params": [k for k, p in model.params.items() if not np.all(np.isfinite(p.data))]}


def train_step(model: MMDiT, optimizer: AdamW, scenes, ids, cfg: TrainConfig, rng: np.random.Generator,
               step: int = 0, lr: float | None = None, probe=None) -> float:
    """One flow-matching update; returns the batch loss before the update."""
    x0 = np.stack([s.target for s in scenes]).astype(model.dtype)
    refs = np.stack([s.reference for s in scenes])
    B = len(scenes)
    eps = rng.standard_normal(x0.shape).astype(model.dtype)
    t = rng.random(B)
    x_t, v = flow_sample(x0, eps, t.astype(model.dtype))
    text_keep, image_keep = conditioning_dropout(rng, B, cfg)
    feats = model.encode_reference(refs)
    target = Tensor(patchify(v, model.cfg.patch), dtype=model.dtype)

    try:
        with Tape() as tape:
            C, _ = model.reference_tokens(feats, expert_drop=cfg.p_drop_expert, rng=rng)
            C = C * Tensor(image_keep.reshape(B, 1, 1), dtype=model.dtype)
            text = model.text_tokens(ids, keep=text_keep)
            pred = model.forward(x_t, t, text, [SubjectCondition(C, None, cfg.lam)],
                                 AttentionMode.TRAIN_JOINT, probe)
            diff = pred - target
            loss = mean(diff * diff)
    except NumericError as exc:
        diag = _diagnostics(model, step, float("nan"))
        raise TrainingDivergedError(f"forward pass failed at step {step}: {exc}", diag) from exc
    value = loss.item()
    if not math.isfinite(value):
        diag = _diagnostics(model, step, value)
        raise TrainingDivergedError(f"non-finite loss {value} at step {step}", diag)
    grads = backward(tape, loss)
    trainable = optimizer.params
    optimizer.step({k: grads[p] for k, p in trainable.items()},
                   cfg.lr if lr is None else lr)
    return value


@dataclass
class TrainingResult:
    model: MMDiT
    optimizer: AdamW
    losses: list
    pairing_counts: dict
    checkpoint: Path | None = None


def run_training(cfg: TrainConfig, sink=None, svg: bool = False) -> TrainingResult:
    """Two-stage training; writes ``loss.csv`` and checkpoints under ``sink`` when given."""
    from .checkpoint import save_checkpoint

    rng = np.random.default_rng(cfg.seed)
    model = MMDiT(cfg.model)
    optimizer = AdamW(model.trainable(cfg.train_base), weight_decay=cfg.weight_decay)
    sink = Path(sink) if sink is not None else None
    total = cfg.total_steps
    losses, rows = [], []
    counts = {"intra": 0, "cross": 0}
    for step in range(total):
        stage = 1 if step < cfg.stage1_steps else 2
        pairing = "intra" if stage == 1 else "mixed"
        scenes, ids = synth_batch(rng, pairing, cfg.batch_size, cfg.cross_fraction)
        for s in scenes:
            counts[s.pairing] += 1
        lr = cosine_lr(step, total, cfg.lr)
        try:
            loss = train_step(model, optimizer, scenes, ids, cfg, rng, step=step, lr=lr)
        except TrainingDivergedError as exc:
            if sink is not None:
                try:
                    atomic_write_text(sink / "diagnostics.json", json.dumps(exc.diagnostics, indent=2))
                except OSError as io_exc:
                    raise OSError(f"cannot write diagnostics under {sink}: {io_exc}") from io_exc
            raise
        losses.append(loss)
        rows.append((step, stage, f"{lr:.8g}", f"{loss:.8g}"))
        if step % 100 == 0:
            log.info("step %d stage %d lr %.3g loss %.4f", step, stage, lr, loss)
        if sink is not None and cfg.checkpoint_every and (step + 1) % cfg.checkpoint_every == 0:
            save_checkpoint(model, optimizer, sink / "checkpoints" / f"step_{step + 1:06d}",
                            meta={"step": step + 1, "stage": stage, "config": cfg.to_dict()})
    final = None
    if sink is not None:
        try:
            write_csv(sink / "loss.csv", ("step", "stage", "lr", "loss"), rows)
            if svg:
                svg_line_chart(sink / "loss.svg", losses, title="flow-matching loss")
        except OSError as exc:
            raise OSError(f"cannot write training outputs under {sink}: {exc}") from exc
        final = save_checkpoint(model, optimizer, sink / "final",
                                meta={"step": total, "stage": 2 if cfg.stage2_steps else 1,
                                      "config": cfg.to_dict()})
    return TrainingResult(model, optimizer, losses, counts, final)
