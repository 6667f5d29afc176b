"""Command-line entry point: ``mmdit-adapter <subcommand> ...``.

Exit codes: 0 success, 1 runtime failure, 2 usage error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import gradcheck as gc
from .checkpoint import load_checkpoint
from .errors import ConfigError, TrainingDivergedError
from .fileio import parse_mask, read_pnm, write_csv, write_ppm
from .flow import TrainConfig, make_scene, run_training
from .hmoe import LEVELS, manual_coefficients, write_coefficient_csv
from .mmdit import TEXT_VOCAB, AdapterProbe, AttentionMode, SubjectCondition, attn_map, export_attention_map
from .sampler import SampleSpec, Subject, compose_multi, euler_sample, reconstruction_errors
from .tensor import Tensor

log = logging.getLogger("mmdit_adapter")

ABLATION_HEADER = ("setting", "fusion", "mode", "train_steps", "final_loss", "cond_mse", "uncond_mse",
                   "win_rate")
PROBE_HEADER = ("level", "w_low", "w_mid", "w_high", "cond_mse", "uncond_mse", "win_rate")
ATTN_SETTINGS = (AttentionMode.INFER_IMAGE_ONLY, AttentionMode.TEXT_ONLY_PROBE,
                 AttentionMode.BOTH_BRANCHES_LEGACY)


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


# -- argument helpers ------------------------------------------------------
def parse_text(spec: str) -> np.ndarray:
    tags = [t.strip() for t in spec.split(",") if t.strip()]
    bad = [t for t in tags if t not in TEXT_VOCAB]
    if bad:
        raise ConfigError(f"unknown text tags {bad}; vocabulary: {', '.join(TEXT_VOCAB)}")
    return np.array([TEXT_VOCAB.index(t) for t in tags])


def parse_coefficients(spec: str | None, dtype=np.float32):
    if spec is None:
        return None
    try:
        vals = [float(v) for v in spec.split(",")]
    except ValueError as exc:
        raise ConfigError(f"bad coefficient list {spec!r}: {exc}") from exc
    if len(vals) != 3:
        raise ConfigError(f"expected three coefficients low,mid,high; got {len(vals)}")
    return manual_coefficients(*vals, dtype=dtype)


def load_reference(path, model) -> np.ndarray:
    img = read_pnm(path)
    cfg = model.cfg
    if img.ndim == 2:
        img = np.repeat(img[..., None], 3, axis=-1)
    if img.shape != (cfg.image_size, cfg.image_size, cfg.channels):
        raise ConfigError(f"{path}: reference is {img.shape}, model expects "
                          f"{(cfg.image_size, cfg.image_size, cfg.channels)}")
    return img


def held_out_scenes(seed: int, count: int, pairing: str):
    rng = np.random.default_rng([seed, 31337])
    return [make_scene(rng, pairing) for _ in range(count)]


def _out_dir(path) -> Path:
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _load(args):
    model, _ = load_checkpoint(args.checkpoint)
    return model


def _fmt(x: float) -> str:
    return f"{float(x):.8g}"


# -- subcommands -----------------------------------------------------------
def cmd_train(args) -> int:
    cfg = TrainConfig.load(args.config) if args.config else TrainConfig()
    if args.steps is not None:
        s1 = int(round(0.3 * args.steps))
        cfg.stage1_steps, cfg.stage2_steps = s1, args.steps - s1
    if args.seed is not None:
        cfg.seed = args.seed
    if args.batch is not None:
        cfg.batch_size = args.batch
    if args.checkpoint_every is not None:
        cfg.checkpoint_every = args.checkpoint_every
    out = _out_dir(args.out)
    cfg.save(out / "config.json")
    res = run_training(cfg, sink=out, svg=args.svg)
    tail = res.losses[-min(50, len(res.losses)):] if res.losses else [float("nan")]
    print(f"trained {cfg.total_steps} steps; final mean loss {np.mean(tail):.4f}; checkpoint {res.checkpoint}")
    return 0


def _infer_inputs(args, model):
    """Reference image, text ids and (optional) target from flags or a generated scene."""
    target = None
    if args.reference:
        ref = load_reference(args.reference, model)
        ids = parse_text(args.text) if args.text else None
    else:
        scene = held_out_scenes(args.scene_seed, 1, args.pairing)[0]
        ref, target = scene.reference, scene.target
        ids = parse_text(args.text) if args.text else scene.text_ids
    return ref, ids, target


def _emit_sample(out: Path, image, coeffs, image_ids):
    write_ppm(out / "sample.ppm", image)
    for i, w in enumerate(coeffs):
        if w is not None:
            write_coefficient_csv(out / ("routing.csv" if i == 0 else f"routing_{i}.csv"), image_ids, w)


def cmd_infer(args) -> int:
    model = _load(args)
    ref, ids, target = _infer_inputs(args, model)
    spec = SampleSpec(text_ids=ids, subjects=[Subject(ref, None, args.lam)], steps=args.steps,
                      guidance=args.guidance, coefficients=parse_coefficients(args.coefficients, model.dtype),
                      mode=args.mode, seed=args.seed, batch=1)
    images, coeffs = euler_sample(model, spec)
    out = _out_dir(args.out)
    write_ppm(out / "reference.ppm", ref)
    if target is not None:
        write_ppm(out / "target.ppm", target)
        print(f"mse to target {np.mean((images[0] - target) ** 2):.5f}")
    _emit_sample(out, images[0], coeffs, ["reference"])
    print(f"wrote {out / 'sample.ppm'}")
    return 0


def cmd_compose(args) -> int:
    model = _load(args)
    refs = args.reference
    masks = args.mask or []
    weights = args.weight or []
    if len(masks) not in (0, len(refs)):
        raise ConfigError(f"{len(refs)} references but {len(masks)} masks")
    if len(weights) not in (0, 1, len(refs)):
        raise ConfigError(f"{len(refs)} references but {len(weights)} weights")
    if len(weights) <= 1:
        weights = [weights[0] if weights else args.lam] * len(refs)
    m = model.cfg.num_tokens
    subjects = []
    for i, path in enumerate(refs):
        mask = parse_mask(masks[i], m) if masks else None
        subjects.append(Subject(load_reference(path, model), mask, weights[i]))
    spec = SampleSpec(text_ids=parse_text(args.text) if args.text else None, subjects=subjects,
                      steps=args.steps, guidance=args.guidance,
                      coefficients=parse_coefficients(args.coefficients, model.dtype),
                      mode=args.mode, seed=args.seed, batch=1)
    images, coeffs = compose_multi(model, spec)
    out = _out_dir(args.out)
    _emit_sample(out, images[0], coeffs, ["reference"])
    print(f"wrote {out / 'sample.ppm'}")
    return 0


def cmd_gradcheck(args) -> int:
    seeds = range(args.seed, args.seed + args.num_seeds)
    results = gc.run_suite(seeds)
    worst = gc.summarize(results)
    failed = [r for r in results if not r.ok]
    for group, err in sorted(worst.items()):
        print(f"{group:16s} worst rel err {err:.3e} {'ok' if err < gc.REL_TOL else 'FAIL'}")
    for r in failed:
        print(f"FAIL {r.name}: analytic {r.analytic:.6e} numeric {r.numeric:.6e} rel {r.rel_error:.3e}")
    if args.csv:
        write_csv(args.csv, ("parameter", "group", "analytic", "numeric", "rel_error"),
                  [(r.name, r.group, _fmt(r.analytic), _fmt(r.numeric), _fmt(r.rel_error))
                   for r in results])
    print(f"{len(results)} tensors checked over {len(seeds)} seeds, {len(failed)} failures")
    return 1 if failed else 0


def _score(model, scenes, args, mode, coefficients=None):
    cond, uncond, samples, _ = reconstruction_errors(model, scenes, args.sample_steps, args.seed,
                                                     coefficients, mode)
    return float(cond.mean()), float(uncond.mean()), float(np.mean(cond < uncond)), samples


def cmd_ablate(args) -> int:
    base = TrainConfig.load(args.config) if args.config else TrainConfig()
    if args.steps is not None:
        s1 = int(round(0.3 * args.steps))
        base.stage1_steps, base.stage2_steps = s1, args.steps - s1
    if args.batch is not None:
        base.batch_size = args.batch
    base.seed = args.seed
    scenes = held_out_scenes(args.seed, args.eval_scenes, args.eval_pairing)
    runs = [("full", "hmoe", [("Full Model", AttentionMode.INFER_IMAGE_ONLY),
                              ("w/o DDS", AttentionMode.BOTH_BRANCHES_LEGACY)]),
            ("add", "add", [("add fusion", AttentionMode.INFER_IMAGE_ONLY)]),
            ("concat", "concat", [("concat fusion", AttentionMode.INFER_IMAGE_ONLY)])]
    runs += [(f"single-{lvl}", f"single:{lvl}", [(f"only {lvl}-level features", AttentionMode.INFER_IMAGE_ONLY)])
             for lvl in LEVELS]
    rows = []
    for _, fusion, settings in runs:
        cfg = TrainConfig.from_dict({**base.to_dict(), "model": {**base.model.to_dict(), "fusion": fusion}})
        res = run_training(cfg)
        tail = res.losses[-min(50, len(res.losses)):] if res.losses else [float("nan")]
        for label, mode in settings:
            cond, uncond, win, _ = _score(res.model, scenes, args, mode)
            rows.append((label, fusion, mode.value, cfg.total_steps, _fmt(np.mean(tail)), _fmt(cond),
                         _fmt(uncond), _fmt(win)))
            print(f"{label:28s} cond {cond:.4f} uncond {uncond:.4f} win {win:.2f}")
    out = _out_dir(args.out)
    write_csv(out / "ablation.csv", ABLATION_HEADER, rows)
    print(f"wrote {out / 'ablation.csv'}")
    return 0


def _require_hmoe(model, what: str):
    if model.hmoe.mode != "hmoe":
        raise ConfigError(f"{what} needs a model with routed fusion, checkpoint uses {model.hmoe.mode!r}")


def cmd_inspect_routing(args) -> int:
    model = _load(args)
    _require_hmoe(model, "inspect-routing")
    if args.reference:
        refs = np.stack([load_reference(p, model) for p in args.reference])
        ids = [Path(p).stem for p in args.reference]
    else:
        scenes = held_out_scenes(args.scene_seed, args.num_scenes, args.pairing)
        refs = np.stack([s.reference for s in scenes])
        ids = [f"scene{i:03d}-{s.descriptor.shape}-{s.descriptor.motif}" for i, s in enumerate(scenes)]
    _, w = model.reference_tokens(model.encode_reference(refs))
    out = _out_dir(args.out)
    write_coefficient_csv(out / "routing.csv", ids, w, out / "routing.svg" if args.svg else None)
    vals = w.values()
    print(f"mean coefficients low {vals[:, 0].mean():.3f} mid {vals[:, 1].mean():.3f} high {vals[:, 2].mean():.3f}")
    return 0


def cmd_attn_map(args) -> int:
    model = _load(args)
    if not 0 <= args.layer < model.cfg.depth:
        raise ConfigError(f"layer {args.layer} outside 0..{model.cfg.depth - 1}")
    ref, ids, _ = _infer_inputs(args, model)
    if ids is None:
        raise ConfigError("attn-map needs --text when a reference file is given")
    feats = model.encode_reference(ref[None])
    C, _ = model.reference_tokens(feats, parse_coefficients(args.coefficients, model.dtype))
    rng = np.random.default_rng(args.seed)
    cfg = model.cfg
    noise = rng.standard_normal((1, cfg.image_size, cfg.image_size, cfg.channels)).astype(model.dtype)
    x0 = np.asarray(ref, dtype=model.dtype)[None]
    x_t = (1 - args.t) * x0 + args.t * noise
    out = _out_dir(args.out)
    params = model.blocks[args.layer]
    for mode in ATTN_SETTINGS:
        probe = AdapterProbe()
        model.predict_velocity(x_t, np.full(1, args.t), ids[None],
                               [SubjectCondition(C, None, args.lam)], mode, probe)
        q_t, q_x = probe.queries[args.layer]
        rows = []
        if mode is not AttentionMode.INFER_IMAGE_ONLY:
            rows.append(attn_map(Tensor(q_t, dtype=model.dtype), C, params)[0])
        if mode is not AttentionMode.TEXT_ONLY_PROBE:
            rows.append(attn_map(Tensor(q_x, dtype=model.dtype), C, params)[0])
        export_attention_map(out / f"attn_{mode.value}_layer{args.layer}", np.concatenate(rows), cfg.encoder.grid)
    print(f"wrote attention maps for layer {args.layer} under {out}")
    return 0


def cmd_probe_layer(args) -> int:
    model = _load(args)
    _require_hmoe(model, "probe-layer")
    scenes = held_out_scenes(args.scene_seed, args.num_scenes, args.pairing)
    out = _out_dir(args.out)
    rows = []
    for i, lvl in enumerate(LEVELS):
        onehot = [0.0, 0.0, 0.0]
        onehot[i] = 1.0
        coeffs = manual_coefficients(*onehot, dtype=model.dtype)
        cond, uncond, win, samples = _score(model, scenes, args, AttentionMode.INFER_IMAGE_ONLY, coeffs)
        rows.append((lvl, *onehot, _fmt(cond), _fmt(uncond), _fmt(win)))
        write_ppm(out / f"probe_{lvl}.ppm", samples[0])
        print(f"{lvl:5s} cond {cond:.4f} uncond {uncond:.4f} win {win:.2f}")
    write_ppm(out / "probe_reference.ppm", scenes[0].reference)
    write_ppm(out / "probe_target.ppm", scenes[0].target)
    write_csv(out / "probe_layer.csv", PROBE_HEADER, rows)
    return 0


# -- parser ------------------------------------------------------------------
def _sampling_flags(p, reference_repeat: bool = False):
    p.add_argument("--checkpoint", required=True, help="checkpoint directory")
    p.add_argument("--text", help="comma-separated tags, e.g. room,center,large")
    p.add_argument("--lambda", dest="lam", type=float, default=1.0, help="adapter weight")
    p.add_argument("--coefficients", help="manual fusion weights low,mid,high")
    p.add_argument("--steps", type=int, default=20, help="Euler steps")
    p.add_argument("--guidance", type=float, default=1.0)
    p.add_argument("--mode", choices=[m.value for m in AttentionMode], default=AttentionMode.INFER_IMAGE_ONLY.value)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="mmdit-adapter", description="Toy image-prompt adapter for a multimodal DiT.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("train", help="two-stage flow-matching training")
    p.add_argument("--config", help="JSON training config")
    p.add_argument("--out", required=True)
    p.add_argument("--steps", type=int, help="total steps, split 30/70 between the stages")
    p.add_argument("--batch", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--checkpoint-every", type=int)
    p.add_argument("--svg", action="store_true", help="also write loss.svg")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("infer", help="sample one image from a reference")
    _sampling_flags(p)
    src = p.add_mutually_exclusive_group()
    src.add_argument("--reference", help="reference PPM")
    src.add_argument("--scene-seed", type=int, default=0, help="use a generated held-out scene")
    p.add_argument("--pairing", choices=("intra", "cross"), default="intra")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("compose", help="mask-guided multi-subject sampling")
    _sampling_flags(p)
    p.add_argument("--reference", action="append", required=True, help="reference PPM (repeatable)")
    p.add_argument("--mask", action="append", help="P1 token-grid mask (one per reference)")
    p.add_argument("--weight", action="append", type=float, help="per-subject weight")
    p.set_defaults(func=cmd_compose)

    p = sub.add_parser("gradcheck", help="finite-difference gradient audit")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--num-seeds", type=int, default=1)
    p.add_argument("--csv", help="per-tensor report")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("ablate", help="train and score fusion / decoupling variants")
    p.add_argument("--config")
    p.add_argument("--out", required=True)
    p.add_argument("--steps", type=int)
    p.add_argument("--batch", type=int)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--eval-scenes", type=int, default=20)
    p.add_argument("--eval-pairing", choices=("intra", "cross"), default="cross")
    p.add_argument("--sample-steps", type=int, default=20)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("inspect-routing", help="tabulate routed fusion coefficients")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--reference", action="append", help="reference PPM (repeatable)")
    p.add_argument("--num-scenes", type=int, default=12)
    p.add_argument("--scene-seed", type=int, default=0)
    p.add_argument("--pairing", choices=("intra", "cross"), default="intra")
    p.add_argument("--svg", action="store_true")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_inspect_routing)

    p = sub.add_parser("attn-map", help="adapter attention maps under each probe setting")
    p.add_argument("--checkpoint", required=True)
    src = p.add_mutually_exclusive_group()
    src.add_argument("--reference")
    src.add_argument("--scene-seed", type=int, default=0)
    p.add_argument("--pairing", choices=("intra", "cross"), default="intra")
    p.add_argument("--text")
    p.add_argument("--coefficients")
    p.add_argument("--lambda", dest="lam", type=float, default=1.0)
    p.add_argument("--layer", type=int, default=0)
    p.add_argument("--t", type=float, default=0.5, help="noise level of the probed state")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_attn_map)

    p = sub.add_parser("probe-layer", help="reconstruct with one encoder level at a time")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--num-scenes", type=int, default=20)
    p.add_argument("--scene-seed", type=int, default=0)
    p.add_argument("--pairing", choices=("intra", "cross"), default="intra")
    p.add_argument("--sample-steps", type=int, default=20)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_probe_layer)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 2
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except TrainingDivergedError as exc:
        print(f"error: {exc} (diagnostics step {exc.diagnostics.get('step')})", file=sys.stderr)
        return 1
    except (ValueError, ArithmeticError, OSError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
