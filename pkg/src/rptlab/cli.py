"""Command-line entry point: ``rpt <subcommand> ...`` (or ``python3 -m rptlab``).

Exit codes: 0 success, 2 configuration error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path
from typing import Sequence

from . import harness as H
from .errors import ConfigError, NumericError
from .pretrain import pretrain_backbone

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 2, 3


def _floats(text: str) -> list[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _ints(text: str) -> list[int]:
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _base_config(args) -> H.RunConfig:
    if args.config:
        return H.load_config(args.config, args.overrides)
    return H.parse_overrides(args.overrides, H.RunConfig())


def _add_config_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("-c", "--config", help="key = value config file (dotted keys)")
    p.add_argument("overrides", nargs="*", metavar="KEY=VALUE", help="config overrides, e.g. prompt.n=10")
    p.add_argument("--root", help="output root (default: $RPT_RUNS_DIR or ./runs)")


def _add_sweep_args(p: argparse.ArgumentParser) -> None:
    _add_config_args(p)
    p.add_argument("--seeds", type=_ints, default=list(H.DEFAULT_SEEDS), help="comma-separated seeds")
    p.add_argument("--workers", type=int, default=1, help="concurrent runs")
    p.add_argument("--keep-checkpoints", action="store_true", help="keep per-epoch checkpoints of every run")


def _sweep_base(args) -> H.RunConfig:
    base = _base_config(args)
    if not args.keep_checkpoints:
        base = base.replace(save_checkpoints=False)
    return base


def _print_report(rep: H.SweepReport) -> None:
    sys.stdout.write(rep.to_csv())
    for c in rep.cells:
        for r in c.failures:
            print(f"FAILED {c.method} {rep.axis}={c.value} task={r.task} seed={r.config.seed}: {r.error}")


def cmd_train(args) -> int:
    cfg = _base_config(args)
    out = Path(args.out) if args.out else None
    for o in H.run(cfg, out, H.runs_root(args.root)):
        print(f"{o.run_dir}\tbest_epoch={o.best_epoch}\tval_accuracy={o.best_metric:.4f}")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    rec = H.evaluate_run(args.run_dir, args.split, baked=args.baked, root=H.runs_root(args.root))
    print(rec.to_json())
    return EXIT_OK


def cmd_bake(args) -> int:
    print(H.bake_run(args.run_dir, H.runs_root(args.root)))
    return EXIT_OK


def cmd_sweep_lr(args) -> int:
    rep = H.sweep_lr(_sweep_base(args), args.grid, args.seeds, root=H.runs_root(args.root), workers=args.workers)
    _print_report(rep)
    for m in rep.methods():
        print(f"lr-variance {m} {rep.grid_variance(m):.6g}")
    return EXIT_OK


def cmd_ablate_width(args) -> int:
    base = _sweep_base(args)
    if base.method != "res-pt":
        base = base.replace(method="res-pt")
    _print_report(H.ablate_width(base, args.widths, args.seeds, root=H.runs_root(args.root), workers=args.workers))
    return EXIT_OK


def cmd_ablate_sharing(args) -> int:
    base = _sweep_base(args)
    if base.method != "res-pt":
        base = base.replace(method="res-pt")
    _print_report(H.ablate_sharing(base, args.sizes, args.seeds, root=H.runs_root(args.root), workers=args.workers))
    return EXIT_OK


def cmd_ablate_prompt_len(args) -> int:
    _print_report(H.ablate_prompt_len(_sweep_base(args), args.lengths, args.seeds, root=H.runs_root(args.root),
                                      workers=args.workers))
    return EXIT_OK


def cmd_fewshot(args) -> int:
    _print_report(H.fewshot(_sweep_base(args), args.ks, args.seeds, root=H.runs_root(args.root),
                            workers=args.workers))
    return EXIT_OK


def cmd_report(args) -> int:
    out = H.report(args.paths, args.out)
    print(Path(out["out_dir"]) / "summary.csv")
    print(Path(out["out_dir"]) / "convergence.csv")
    for p in out["problems"]:
        print(f"skipped {p}", file=sys.stderr)
    return EXIT_OK


def cmd_pretrain(args) -> int:
    cfg = _base_config(args)
    steps = cfg.pretrain_steps if args.steps is None else args.steps
    bb, result = pretrain_backbone(cfg.backbone_config(), steps=steps, seed=cfg.pretrain_seed,
                                   log_every=args.log_every)
    if args.out:
        path = Path(args.out)
    else:
        path = H.backbone_cache_path(cfg.replace(pretrain_steps=steps), H.runs_root(args.root))
    path.parent.mkdir(parents=True, exist_ok=True)
    bb.save(path)
    print(path)
    print(json.dumps({"steps": result.steps, "final_loss": result.final_loss,
                      "token_accuracy": result.token_accuracy, "tagged_accuracy": result.tagged_accuracy,
                      "chance": result.chance}, sort_keys=True))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="rpt", description="Prompt tuning lab on a tiny frozen transformer.")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train one config (one run directory per task)")
    _add_config_args(p)
    p.add_argument("--out", help="run directory (single task only; default: <root>/<run-id>)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="score a finished run's best checkpoint")
    p.add_argument("run_dir")
    p.add_argument("--split", default="val", choices=["train", "val"])
    p.add_argument("--baked", action="store_true", help="use baked.prompt instead of the live network")
    p.add_argument("--root")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("bake", help="write baked.prompt from a run's best checkpoint")
    p.add_argument("run_dir")
    p.add_argument("--root")
    p.set_defaults(func=cmd_bake)

    p = sub.add_parser("sweep-lr", help="pt vs res-pt across a learning-rate grid")
    _add_sweep_args(p)
    p.add_argument("--grid", type=_floats, default=list(H.LR_GRID))
    p.set_defaults(func=cmd_sweep_lr)

    p = sub.add_parser("ablate-width", help="res-pt across bottleneck widths")
    _add_sweep_args(p)
    p.add_argument("--widths", type=_ints, default=list(H.WIDTH_GRID))
    p.set_defaults(func=cmd_ablate_width)

    p = sub.add_parser("ablate-sharing", help="shared vs separate reparameterization networks")
    _add_sweep_args(p)
    p.add_argument("--sizes", type=_ints, default=[200, 400], help="train-split sizes")
    p.set_defaults(func=cmd_ablate_sharing)

    p = sub.add_parser("ablate-prompt-len", help="pt vs res-pt across prompt lengths")
    _add_sweep_args(p)
    p.add_argument("--lengths", type=_ints, default=list(H.PROMPT_LENGTHS))
    p.set_defaults(func=cmd_ablate_prompt_len)

    p = sub.add_parser("fewshot", help="pt vs res-pt with k examples per class")
    _add_sweep_args(p)
    p.add_argument("--ks", type=_ints, default=list(H.FEWSHOT_KS))
    p.set_defaults(func=cmd_fewshot)

    p = sub.add_parser("report", help="aggregate run directories into CSV summaries")
    p.add_argument("paths", nargs="*", help="run directories or roots to search")
    p.add_argument("--out", default="report")
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("pretrain-backbone", help="pretrain and store a backbone")
    _add_config_args(p)
    p.add_argument("--steps", type=int)
    p.add_argument("--out", help="checkpoint path (default: the cache path runs use)")
    p.add_argument("--log-every", type=int, default=0)
    p.set_defaults(func=cmd_pretrain)
    return ap


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (NumericError, FloatingPointError) as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
