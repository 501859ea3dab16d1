"""Command-line entry point.

Subcommands: gen-data, train, distill, eval, ablate, verify. All take an
optional ``--config`` key=value file plus ``--seed``/``--out`` overrides.
Failures exit nonzero with a single ``error: ...`` line on stderr.
"""

from __future__ import annotations

import argparse
import sys
from dataclasses import replace
from pathlib import Path

from . import harness
from .harness import RunConfig, parse_config_file
from .scenes import sample_scene, save_scene


def _load_config(args) -> RunConfig:
    config = parse_config_file(args.config) if args.config else RunConfig()
    overrides = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.out is not None:
        overrides["out_dir"] = args.out
    return replace(config, **overrides) if overrides else config


def _add_common(sub: argparse.ArgumentParser) -> None:
    sub.add_argument("--config", help="key=value config file")
    sub.add_argument("--seed", type=int, help="override the run seed")
    sub.add_argument("--out", help="override the output directory")


def cmd_gen_data(args) -> int:
    config = _load_config(args)
    out = Path(config.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    sc = config.scene_config()
    for i in range(args.count):
        scene = sample_scene(sc, harness.train_scene_seed(config, i))
        save_scene(scene, out / f"scene_{i:05d}.txt")
    print(f"wrote {args.count} scenes to {out}")
    return 0


def _print_report(report) -> int:
    print(f"out_dir={report.out_dir}")
    print(f"mAP={report.no_nms.map_score:.6f} (no NMS)  "
          f"mAP={report.with_nms.map_score:.6f} (NMS)")
    print(f"NDS={report.no_nms.nds_score:.6f} (no NMS)  "
          f"NDS={report.with_nms.nds_score:.6f} (NMS)")
    return 0


def cmd_train(args) -> int:
    return _print_report(harness.train(_load_config(args)))


def cmd_distill(args) -> int:
    config = _load_config(args)
    if args.teacher:
        config = replace(config, teacher_checkpoint=args.teacher)
    if args.mode:
        config = replace(config, distill_mode=args.mode)
    return _print_report(harness.distill(config))


def cmd_eval(args) -> int:
    return _print_report(harness.evaluate(_load_config(args), args.checkpoint))


def cmd_ablate(args) -> int:
    config = _load_config(args)
    values = [v.strip() for v in args.values.split(",") if v.strip()]
    rows = harness.ablate(config, args.sweep, values)
    print(f"{args.sweep:>12}  {'NDS':>9}  {'mAP':>9}")
    for v, rep in rows:
        print(f"{str(v):>12}  {rep.no_nms.nds_score:9.6f}  {rep.no_nms.map_score:9.6f}")
    print(f"table: {Path(config.out_dir) / 'ablation.csv'}")
    return 0


def cmd_verify(args) -> int:
    """Fast self-checks of the numerical kernels against independent oracles."""
    import numpy as np

    from .boxes import RotatedBoxBEV, rotated_iou_bev
    from .matching import assignment_total, brute_force_match, hungarian
    from .optim import cyclic_lr

    rng = np.random.Generator(np.random.PCG64(args.seed if args.seed is not None else 0))
    failures = 0

    worst = 0.0
    for _ in range(200):
        n = int(rng.integers(2, 7))
        cost = rng.normal(size=(n, n))
        worst = max(worst, abs(assignment_total(cost, hungarian(cost))
                               - assignment_total(cost, brute_force_match(cost))))
    ok = worst < 1e-9
    failures += not ok
    print(f"matching vs brute force: {'ok' if ok else 'FAIL'} (max gap {worst:.2e})")

    worst = 0.0
    for _ in range(20):
        a = RotatedBoxBEV(*rng.uniform(-2, 2, 2), *rng.uniform(0.5, 3, 2),
                          rng.uniform(-np.pi, np.pi))
        b = RotatedBoxBEV(*rng.uniform(-2, 2, 2), *rng.uniform(0.5, 3, 2),
                          rng.uniform(-np.pi, np.pi))
        iou = rotated_iou_bev(a, b)
        pts = np.column_stack([rng.uniform(-5, 5, 20000), rng.uniform(-5, 5, 20000)])
        from .boxes import point_in_box
        in_a = point_in_box(a, pts)
        in_b = point_in_box(b, pts)
        union = (in_a | in_b).sum()
        mc = (in_a & in_b).sum() / union if union else 0.0
        worst = max(worst, abs(iou - mc))
    ok = worst < 0.05
    failures += not ok
    print(f"rotated IoU vs Monte Carlo: {'ok' if ok else 'FAIL'} (max gap {worst:.3f})")

    anchors = (cyclic_lr(0, 100), cyclic_lr(40, 100), cyclic_lr(100, 100))
    ok = abs(anchors[0] - 1e-4) < 1e-12 and abs(anchors[1] - 1e-3) < 1e-12 \
        and abs(anchors[2] - 1e-8) < 1e-12
    failures += not ok
    print(f"learning-rate anchors: {'ok' if ok else 'FAIL'} {anchors}")

    return 1 if failures else 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="bevset",
        description="BEV set-prediction 3D detection: training, distillation, "
                    "evaluation, and ablations on synthetic scenes.")
    subs = parser.add_subparsers(dest="command", required=True)

    p = subs.add_parser("gen-data", help="write synthetic scenes to disk")
    _add_common(p)
    p.add_argument("--count", type=int, default=10, help="number of scenes")
    p.set_defaults(fn=cmd_gen_data)

    p = subs.add_parser("train", help="supervised training run")
    _add_common(p)
    p.set_defaults(fn=cmd_train)

    p = subs.add_parser("distill", help="teacher-student training run")
    _add_common(p)
    p.add_argument("--teacher", help="teacher checkpoint (.odgc1)")
    p.add_argument("--mode", choices=[m for m in harness.DISTILL_MODES if m != "none"],
                   help="distillation mode")
    p.set_defaults(fn=cmd_distill)

    p = subs.add_parser("eval", help="evaluate an existing checkpoint")
    _add_common(p)
    p.add_argument("checkpoint", help="checkpoint file (.odgc1)")
    p.set_defaults(fn=cmd_eval)

    p = subs.add_parser("ablate", help="sweep one hyperparameter")
    _add_common(p)
    p.add_argument("--sweep", required=True, choices=harness.SWEEPS)
    p.add_argument("--values", required=True, help="comma-separated sweep values")
    p.set_defaults(fn=cmd_ablate)

    p = subs.add_parser("verify", help="run fast oracle self-checks")
    _add_common(p)
    p.set_defaults(fn=cmd_verify)

    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except (ValueError, RuntimeError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
