"""Command-line entry points.

Verbs: train-teacher, prune-train, analyze, flops, eval. Every run is
deterministic given --seed; run directories receive the resolved
config next to their outputs. Exit codes: 0 success, 1 usage error,
2 data or shape error, 3 numerical divergence.
"""

from __future__ import annotations

import argparse
import os
import sys

from . import analysis
from .checkpoint import load_checkpoint
from .config import VAL_SEED_OFFSET, load_config, resolved_text
from .data import MixedSegmentation, SyntheticSegmentation, evaluate_miou
from .distill import train_teacher, train_two_stage
from .errors import (CheckpointError, ContractError, DimensionError,
                     DivergenceError, EmptyInputError, NonFiniteError,
                     UsageError)
from .gating import GateContext
from .model import Segmenter
from .static_pruning import build_static_masks


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _add_common(p, out_required=True):
    p.add_argument("--config", required=True, help="run configuration file")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=out_required,
                   help="output directory for checkpoints and CSV files")
    p.add_argument("--steps", type=int, default=None,
                   help="override the configured step count")


def build_parser() -> _Parser:
    parser = _Parser(prog="dynagate",
                     description="dynamic neuron pruning workbench")
    sub = parser.add_subparsers(dest="verb", required=True)

    p = sub.add_parser("train-teacher", help="train the dense model")
    _add_common(p)
    p.set_defaults(func=cmd_train_teacher)

    p = sub.add_parser("prune-train",
                       help="distill a pruned student from a teacher")
    _add_common(p)
    p.add_argument("--teacher", required=True, help="teacher checkpoint")
    p.add_argument("--mode", choices=("dynamic", "static", "dense"))
    p.add_argument("--sparsity", type=float, help="target pruned fraction")
    p.add_argument("--kd", choices=("none", "stage1", "stage2", "both"))
    p.add_argument("--anneal", choices=("on", "off"))
    p.set_defaults(func=cmd_prune_train)

    p = sub.add_parser("analyze",
                       help="neuron statistics, taxonomy, gate counts")
    _add_common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--layer", default="s0.l0", help="layer id, e.g. s1.l0")
    p.add_argument("--signal", default="ffn_hidden",
                   choices=analysis.TRACE_SIGNALS)
    p.add_argument("--samples", type=int, default=None,
                   help="instances to evaluate (default: val split size)")
    p.add_argument("--median-thresh", type=float, default=None)
    p.add_argument("--range-thresh", type=float, default=None)
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("flops", help="closed-form compute report")
    _add_common(p, out_required=False)
    p.add_argument("--keep", type=float, default=None,
                   help="uniform keep fraction for every gated pair")
    p.add_argument("--keep-profile", default=None,
                   help="CSV file of pair,keep rows")
    p.set_defaults(func=cmd_flops)

    p = sub.add_parser("eval", help="mIoU of a checkpoint on the val split")
    _add_common(p, out_required=False)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--mode", choices=("dynamic", "static", "dense"),
                   default=None,
                   help="gating mode (default: dynamic when the checkpoint "
                        "has gates)")
    p.add_argument("--sparsity", type=float, default=None,
                   help="pruned fraction at evaluation (default: config)")
    p.add_argument("--samples", type=int, default=None)
    p.set_defaults(func=cmd_eval)
    return parser


MODE_SEED_OFFSET = 7_654_321


def _split_pools(num_classes):
    """Shape classes 1..K-1 split into two contiguous halves."""
    shapes = list(range(1, num_classes))
    mid = (len(shapes) + 1) // 2
    return tuple(shapes[:mid]), tuple(shapes[mid:])


def _build_split(cfg, seed, size):
    pools = _split_pools(cfg.model.num_classes)
    parts = [SyntheticSegmentation(seed + i * MODE_SEED_OFFSET, size // 2,
                                   cfg.model.input_hw, cfg.model.num_classes,
                                   cfg.data.noise_sigma, cfg.data.max_shapes,
                                   cfg.data.void_border, pool)
             for i, pool in enumerate(pools)]
    return MixedSegmentation(parts)


def _datasets(cfg, seed):
    if cfg.data.class_split:
        return (_build_split(cfg, seed, cfg.data.train_size),
                _build_split(cfg, seed + VAL_SEED_OFFSET, cfg.data.val_size))
    train = SyntheticSegmentation(seed, cfg.data.train_size, cfg.model.input_hw,
                                  cfg.model.num_classes, cfg.data.noise_sigma,
                                  cfg.data.max_shapes, cfg.data.void_border)
    val = SyntheticSegmentation(seed + VAL_SEED_OFFSET, cfg.data.val_size,
                                cfg.model.input_hw, cfg.model.num_classes,
                                cfg.data.noise_sigma, cfg.data.max_shapes,
                                cfg.data.void_border)
    return train, val


def _prepare_out(args, cfg):
    os.makedirs(args.out, exist_ok=True)
    with open(os.path.join(args.out, "resolved.cfg"), "w") as fh:
        fh.write(resolved_text(cfg, args.seed))


def _write_metrics(path, pairs):
    with open(path, "w") as fh:
        fh.write("metric,value\n")
        for key, value in pairs:
            value = repr(float(value)) if isinstance(value, float) else value
            fh.write(f"{key},{value}\n")


def _load_model(cfg, ckpt_path, seed):
    state = load_checkpoint(ckpt_path)
    gated = any(".gate_" in name for name in state)
    model = Segmenter(cfg.model, seed=seed, gated=gated)
    model.load_state_dict(state)
    return model


def cmd_train_teacher(args) -> int:
    cfg = load_config(args.config)
    if args.steps is not None:
        cfg.train.steps = args.steps
    _prepare_out(args, cfg)
    train_ds, val_ds = _datasets(cfg, args.seed)
    model = Segmenter(cfg.model, seed=args.seed, gated=False)
    train_teacher(model, train_ds, cfg.train.steps, cfg.train.batch_size,
                  cfg.train.lr, cfg.train.poly_power,
                  log_path=os.path.join(args.out, "teacher_log.csv"))
    model.save(os.path.join(args.out, "teacher.ckpt"))
    train_miou = evaluate_miou(model, train_ds,
                               batch_size=cfg.train.batch_size)
    val_miou = evaluate_miou(model, val_ds, batch_size=cfg.train.batch_size)
    _write_metrics(os.path.join(args.out, "metrics.csv"),
                   [("train_miou", train_miou), ("val_miou", val_miou),
                    ("steps", str(cfg.train.steps))])
    print(f"teacher: train mIoU {train_miou:.4f}, val mIoU {val_miou:.4f}")
    return 0


def _eval_context(model, mode, keep):
    if mode == "static":
        return GateContext("static", keep,
                           static_masks=build_static_masks(model, keep))
    if mode == "dynamic" and model.gated:
        return GateContext("dynamic", keep)
    return None


def cmd_prune_train(args) -> int:
    cfg = load_config(args.config)
    prune = cfg.prune
    if args.mode is not None:
        prune.mode = args.mode
    if args.sparsity is not None:
        prune.target_sparsity = args.sparsity
    if args.kd is not None:
        prune.kd = args.kd
    if args.anneal is not None:
        prune.anneal = args.anneal == "on"
    if args.steps is not None:
        total = prune.stage1_steps + prune.stage2_steps
        frac = prune.stage1_steps / total if total else 0.5
        prune.stage1_steps = int(round(args.steps * frac))
        prune.stage2_steps = args.steps - prune.stage1_steps
    prune = type(prune)(**vars(prune))
    _prepare_out(args, cfg)
    train_ds, val_ds = _datasets(cfg, args.seed)

    teacher = Segmenter(cfg.model, seed=args.seed, gated=False)
    teacher.load_state_dict(load_checkpoint(args.teacher))
    student = Segmenter(cfg.model, seed=args.seed,
                        gated=prune.mode == "dynamic")
    student.load_state_dict(teacher.state_dict(), strict=False)

    train_two_stage(teacher, student, train_ds, prune,
                    log_path=os.path.join(args.out, "loss.csv"),
                    checkpoint_dir=args.out)
    keep = prune.schedule().keep_fraction(prune.total_steps)
    ctx = _eval_context(student, prune.mode, keep)
    val_miou = evaluate_miou(student, val_ds, ctx=ctx,
                             batch_size=prune.batch_size)
    metrics = [("val_miou", val_miou), ("keep_fraction", keep),
               ("mode", prune.mode), ("kd", prune.kd),
               ("anneal", "on" if prune.anneal else "off")]
    if prune.mode == "dynamic":
        counts = analysis.count_gate_activations(student, val_ds,
                                                 prune.batch_size)
        with open(os.path.join(args.out, "gate_counts.csv"), "w") as fh:
            fh.write(analysis.gate_counts_csv(counts))
        total_always = sum(int(c.always_active.sum()) for c in counts.values())
        total_never = sum(int(c.never_active.sum()) for c in counts.values())
        metrics += [("always_active_neurons", str(total_always)),
                    ("never_active_neurons", str(total_never))]
    _write_metrics(os.path.join(args.out, "metrics.csv"), metrics)
    print(f"student ({prune.mode}, kd={prune.kd}, "
          f"anneal={'on' if prune.anneal else 'off'}, "
          f"r={prune.target_sparsity}): val mIoU {val_miou:.4f}")
    return 0


def cmd_analyze(args) -> int:
    cfg = load_config(args.config)
    _prepare_out(args, cfg)
    _, val_ds = _datasets(cfg, args.seed)
    if args.samples is not None:
        val_ds.length = args.samples
    model = _load_model(cfg, args.checkpoint, args.seed)
    stats = analysis.collect_neuron_stats(model, val_ds, args.layer,
                                          args.signal)
    taxonomy = analysis.classify_neurons(stats, args.median_thresh,
                                         args.range_thresh)
    with open(os.path.join(args.out, "neuron_stats.csv"), "w") as fh:
        fh.write(analysis.neuron_stats_csv(stats, taxonomy))
    lines = [f"neuron stats: layer {args.layer} signal {args.signal} over "
             f"{stats.instance_count} instances",
             f"thresholds: median {taxonomy.median_thresh!r} "
             f"range {taxonomy.range_thresh!r}"]
    if model.gated:
        counts = analysis.count_gate_activations(model, val_ds)
        with open(os.path.join(args.out, "gate_counts.csv"), "w") as fh:
            fh.write(analysis.gate_counts_csv(counts))
        lines.append(f"gate counts: {len(counts)} gated pairs, "
                     f"{stats.instance_count} instances")
    print("\n".join(lines))
    return 0


def _parse_keep_profile(path):
    profile = {}
    with open(path) as fh:
        for line_no, line in enumerate(fh, 1):
            line = line.strip()
            if not line or line.startswith("#") or line.startswith("pair,"):
                continue
            parts = line.split(",")
            if len(parts) != 2:
                raise UsageError(
                    f"{path}:{line_no}: expected 'pair,keep', got {line!r}")
            try:
                profile[parts[0].strip()] = float(parts[1])
            except ValueError:
                raise UsageError(
                    f"{path}:{line_no}: bad keep fraction {parts[1]!r}") from None
    return profile


def cmd_flops(args) -> int:
    cfg = load_config(args.config)
    profile = None
    if args.keep_profile is not None:
        profile = _parse_keep_profile(args.keep_profile)
    elif args.keep is not None:
        profile = args.keep
    report = analysis.flops_report(cfg.model, profile)
    print(report.render())
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        with open(os.path.join(args.out, "flops.csv"), "w") as fh:
            fh.write(report.csv())
    return 0


def cmd_eval(args) -> int:
    cfg = load_config(args.config)
    _, val_ds = _datasets(cfg, args.seed)
    if args.samples is not None:
        val_ds.length = args.samples
    model = _load_model(cfg, args.checkpoint, args.seed)
    sparsity = (args.sparsity if args.sparsity is not None
                else cfg.prune.target_sparsity)
    mode = args.mode
    if mode is None:
        mode = "dynamic" if model.gated else "dense"
    keep = 1.0 - sparsity if mode != "dense" else 1.0
    ctx = _eval_context(model, mode, keep)
    val_miou = evaluate_miou(model, val_ds, ctx=ctx)
    print(f"val mIoU {val_miou:.4f} (mode {mode}, keep {keep:g}, "
          f"{len(val_ds)} samples)")
    return 0


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except (DimensionError, ContractError, EmptyInputError, CheckpointError,
            NonFiniteError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 2
    except DivergenceError as exc:
        print(f"divergence: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
