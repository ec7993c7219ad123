"""Command line entry point: ``momploc {simulate,train,evaluate,report}``."""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys

from . import classifier as clf
from .errors import ConfigError
from .harness import CampaignConfig, apply_overrides, campaign_outputs, load_config, run_campaign, train_command
from .harness import write_outputs
from .scene import dump_jsonl, generate_scene, trace_paths

EXIT_CONFIG = 2
EXIT_IO = 3


def _config(args) -> CampaignConfig:
    cfg = load_config(args.config) if args.config else CampaignConfig()
    return apply_overrides(cfg, args.set or [])


def _add_common(p: argparse.ArgumentParser, out_required: bool = True) -> None:
    p.add_argument("--config", help="campaign config JSON file")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config entry (dotted keys, JSON values)")
    p.add_argument("--out", required=out_required, help="output directory")


def cmd_simulate(args) -> int:
    cfg = _config(args)
    os.makedirs(args.out, exist_ok=True)
    with open(os.path.join(args.out, "scenes.jsonl"), "w") as fp:
        for seed in cfg.seeds:
            scene = generate_scene(cfg.scene, seed)
            dump_jsonl(fp, scene, trace_paths(scene, cfg.scene.double_reflections))
    write_outputs(args.out, {"config.json": json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n"})
    print(f"wrote {cfg.n_trials} scenes to {args.out}")
    return 0


def cmd_train(args) -> int:
    cfg = _config(args)
    tc = clf.TrainConfig()
    if args.epochs is not None:
        tc = dataclasses.replace(tc, max_epochs=args.epochs)
    _, report, _ = train_command(cfg, args.out, n_samples=args.samples, train_cfg=tc, seed=args.seed)
    write_outputs(args.out, {"config.json": json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n"})
    acc = ", ".join(f"{a:.4f}" for a in report.val_class_accuracy)
    print(f"validation accuracy {report.val_accuracy:.4f} (per class {acc}); best epoch {report.best_epoch}")
    return 0


def cmd_evaluate(args) -> int:
    cfg = _config(args)
    if args.model:
        cfg = dataclasses.replace(cfg, model_path=args.model)
    results, rows = run_campaign(cfg)
    write_outputs(args.out, campaign_outputs(cfg, results))
    from .report import format_table

    print(format_table(rows))
    if all(r["n_ok"] == 0 for r in rows):
        print("warning: no trial produced a position estimate", file=sys.stderr)
    return 0


def cmd_report(args) -> int:
    from .report import report_directory

    print(report_directory(args.run_dir, args.png, args.max_error))
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="momploc", description=__doc__)
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="generate scenes and ground-truth paths")
    _add_common(p)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("train", help="simulate a labeled dataset and train the path classifier")
    _add_common(p)
    p.add_argument("--samples", type=int, default=10_000, help="minimum number of labeled paths")
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="run a localization campaign")
    _add_common(p)
    p.add_argument("--model", help="trained classifier (model.json)")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("report", help="print the percentile table and render the CDF figure")
    p.add_argument("run_dir")
    p.add_argument("--png", help="figure path (default RUN_DIR/cdf.png)")
    p.add_argument("--max-error", type=float, default=None)
    p.set_defaults(func=cmd_report)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
