"""Command-line driver: gen-data, train, ablate, evaluate."""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import shutil
import sys
from pathlib import Path

from hffed.config import ConfigError, ExperimentConfig
from hffed.experiment import (
    check_data,
    generate_data,
    load_clients,
    load_federation,
    run_ablation,
    run_experiment,
    save_federation,
    summarize,
    write_json,
)
from hffed.federation import StrategyConfig, TrainingDiverged
from hffed.networks import CheckpointError
from hffed.phantom import DatasetFormatError
from hffed.tensor import ShapeError, TensorFormatError

log = logging.getLogger("hffed")

EXIT_USAGE = 2
EXIT_DIVERGED = 3


def _load_config(args) -> ExperimentConfig:
    return ExperimentConfig.load(args.config) if args.config else ExperimentConfig()


def cmd_gen_data(args) -> int:
    cfg = _load_config(args)
    out = Path(args.out)
    if out.exists() and any(out.iterdir()):
        if not args.force:
            print(f"error: {out} is not empty (use --force to overwrite)", file=sys.stderr)
            return EXIT_USAGE
        shutil.rmtree(out)
    datasets, ranges = generate_data(cfg)
    save_federation(datasets, ranges, out)
    print(f"wrote {len(datasets)} hospitals x {len(datasets[0].samples)} samples to {out}")
    return 0


def _with_strategy_overrides(cfg: ExperimentConfig, args) -> ExperimentConfig:
    if args.strategy is None and args.mu is None:
        return cfg
    kind = args.strategy or cfg.strategy.kind
    kw = {"kind": kind, "mu": args.mu if args.mu is not None else cfg.strategy.mu}
    if kind == cfg.strategy.kind:
        kw = {**dataclasses.asdict(cfg.strategy), **kw}
    return dataclasses.replace(cfg, strategy=StrategyConfig(**kw))


def cmd_train(args) -> int:
    cfg = _with_strategy_overrides(_load_config(args), args)
    datasets, ranges = load_federation(args.data)
    check_data(cfg, datasets)
    try:
        res = run_experiment(cfg, args.out, datasets, ranges)
    except TrainingDiverged as exc:
        print(f"error: training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    _print_summary(res.summary)
    return 0


def cmd_ablate(args) -> int:
    cfg = _load_config(args)
    datasets, ranges = load_federation(args.data)
    check_data(cfg, datasets)
    try:
        rows = run_ablation(cfg, args.out, datasets, ranges)
    except TrainingDiverged as exc:
        print(f"error: training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    if len({r["init_hash"] for r in rows}) != 1:
        print("error: variants did not share initial weights", file=sys.stderr)
        return 1
    print(f"initial weights {rows[0]['init_hash']} shared by all {len(rows)} variants")
    for r in rows:
        print(f"{r['variant']:<20} psnr {r['psnr']:8.4f}  ssim {r['ssim']:.5f}")
    return 0


def cmd_evaluate(args) -> int:
    datasets, ranges = load_federation(args.data)
    clients = load_clients(args.checkpoints, datasets, ranges)
    summary = summarize(clients, args.split, None)
    meta_hash = None
    server_manifest = Path(args.checkpoints) / "server" / "manifest.json"
    if server_manifest.exists():
        meta_hash = json.loads(server_manifest.read_text()).get("meta", {}).get("config_hash")
    if meta_hash is not None:
        summary["config_hash"] = meta_hash
    out = Path(args.out) if args.out else Path(args.checkpoints) / "evaluation.json"
    write_json(out, summary)
    _print_summary(summary)
    return 0


def _print_summary(summary: dict) -> None:
    print(f"{'hospital':>8} {'mse':>10} {'psnr':>8} {'ssim':>8} {'cc':>8}")
    for h in summary["hospitals"]:
        print(f"{h['id']:>8} {h['mse']:>10.6f} {h['psnr']:>8.3f} {h['ssim']:>8.4f} {h['cc']:>8.4f}")
    for key in ("mean", "std"):
        m = summary[key]
        print(f"{key:>8} {m['mse']:>10.6f} {m['psnr']:>8.3f} {m['ssim']:>8.4f} {m['cc']:>8.4f}")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="hffed", description="Federated imaging with protocol hypernetworks")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress per round")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate synthetic hospital datasets")
    g.add_argument("--config", help="experiment config (JSON); defaults if omitted")
    g.add_argument("--out", required=True)
    g.add_argument("--force", action="store_true", help="overwrite a non-empty output directory")
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="run one federated experiment")
    t.add_argument("--config")
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--strategy", choices=["local", "fedavg", "fedprox", "fedbn", "hffed"])
    t.add_argument("--mu", type=float, help="FedProx penalty")
    t.set_defaults(func=cmd_train)

    a = sub.add_parser("ablate", help="run the seven-variant ablation grid")
    a.add_argument("--config")
    a.add_argument("--data", required=True)
    a.add_argument("--out", required=True)
    a.set_defaults(func=cmd_ablate)

    e = sub.add_parser("evaluate", help="evaluate saved checkpoints without training")
    e.add_argument("--checkpoints", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--split", default="test", choices=["train", "val", "test"])
    e.add_argument("--out", help="metrics JSON path (default: <checkpoints>/evaluation.json)")
    e.set_defaults(func=cmd_evaluate)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, DatasetFormatError, CheckpointError, TensorFormatError, ShapeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
