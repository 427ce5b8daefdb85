"""End-to-end experiment runs: data, rounds, reports and checkpoints."""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from hffed.config import ConfigError, ExperimentConfig
from hffed.federation import (
    ClientState,
    RoundReport,
    ClientRound,
    StrategyConfig,
    build_clients,
    evaluate,
    run_round,
)
from hffed.networks import (
    HyperConfig,
    HyperNetwork,
    ImagingConfig,
    ImagingNetwork,
    NormState,
    ProtocolRanges,
    load_checkpoint,
    save_checkpoint,
)
from hffed.phantom import HospitalDataset, load_dataset, make_federation, save_dataset

log = logging.getLogger(__name__)

CSV_COLUMNS = ("round", "client", "train_loss", "val_mse", "val_psnr", "val_ssim", "val_cc")
METRIC_KEYS = ("mse", "psnr", "ssim", "cc")
RANGES_FILE = "ranges.json"


@dataclass
class ExperimentResult:
    reports: list[RoundReport]
    summary: dict
    init_hash: str


# ---------------------------------------------------------------------------
# data directories


def hospital_dir(root, k: int) -> Path:
    return Path(root) / f"hospital-{k}"


def generate_data(cfg: ExperimentConfig) -> tuple[list[HospitalDataset], ProtocolRanges]:
    return make_federation(cfg.protocols, cfg.n_train, cfg.n_val, cfg.n_test,
                           size=cfg.image_size, seed=cfg.seed)


def save_federation(datasets: Sequence[HospitalDataset], ranges: ProtocolRanges, root) -> None:
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    for ds in datasets:
        save_dataset(ds, hospital_dir(root, ds.hospital_id))
    (root / RANGES_FILE).write_text(json.dumps(ranges.to_dict(), indent=2, sort_keys=True) + "\n")


def load_federation(root) -> tuple[list[HospitalDataset], ProtocolRanges]:
    root = Path(root)
    rpath = root / RANGES_FILE
    try:
        ranges = ProtocolRanges.from_dict(json.loads(rpath.read_text()))
    except (OSError, ValueError, KeyError, TypeError) as exc:
        raise ConfigError(f"{rpath}: cannot read protocol ranges ({exc})") from exc
    dirs = sorted(root.glob("hospital-*"), key=lambda p: int(p.name.split("-", 1)[1]))
    if not dirs:
        raise ConfigError(f"{root}: no hospital-<k> directories")
    return [load_dataset(d) for d in dirs], ranges


def check_data(cfg: ExperimentConfig, datasets: Sequence[HospitalDataset]) -> None:
    """Reject config/data mismatches before any training happens."""
    if len(datasets) != cfg.hospitals:
        raise ConfigError(f"config expects {cfg.hospitals} hospitals, data has {len(datasets)}")
    want = (1, cfg.image_size, cfg.image_size)
    for ds in datasets:
        if tuple(ds.image_shape) != want:
            raise ConfigError(
                f"hospital {ds.hospital_id}: image shape {list(ds.image_shape)} does not match {list(want)}"
            )
        for split in ("train", "val", "test"):
            if not ds.splits.get(split):
                raise ConfigError(f"hospital {ds.hospital_id}: empty {split} split")


# ---------------------------------------------------------------------------
# networks


def imaging_config_for(cfg: ExperimentConfig, strategy: StrategyConfig) -> ImagingConfig:
    return dataclasses.replace(cfg.imaging, batch_norm=strategy.kind == "fedbn")


def init_networks(cfg: ExperimentConfig, strategy: StrategyConfig) -> tuple[ImagingNetwork, HyperNetwork]:
    imaging = ImagingNetwork.initialize(imaging_config_for(cfg, strategy), cfg.seed)
    hyper = HyperNetwork.initialize(HyperConfig(channels=cfg.imaging.channels), cfg.seed)
    return imaging, hyper


def init_hash(imaging: ImagingNetwork) -> str:
    """Digest of the conv weights every variant starts from."""
    h = hashlib.sha256()
    for name in sorted(imaging.params):
        if ".bn." in name:
            continue
        h.update(name.encode())
        h.update(np.ascontiguousarray(imaging.params[name], dtype="<f8").tobytes())
    return h.hexdigest()[:16]


# ---------------------------------------------------------------------------
# reporting


def _fmt(x) -> str:
    return "" if x is None else repr(float(x))


def _csv_rows(report: RoundReport):
    for c in report.clients:
        val = c.val.as_dict() if c.val is not None else {}
        yield [str(report.round), str(c.client), _fmt(c.train_loss),
               *(_fmt(val.get(k)) for k in METRIC_KEYS)]


def summarize(clients: Sequence[ClientState], split: str, config_hash: str | None) -> dict:
    rows = []
    for c in clients:
        m = evaluate(c, split).as_dict()
        rows.append({"id": c.hospital_id, **m})
    table = np.array([[r[k] for k in METRIC_KEYS] for r in rows])
    out = {
        "hospitals": rows,
        "mean": dict(zip(METRIC_KEYS, map(float, table.mean(axis=0)))),
        "std": dict(zip(METRIC_KEYS, map(float, table.std(axis=0)))),
    }
    if config_hash is not None:
        out["config_hash"] = config_hash
    return out


def write_json(path, obj) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# checkpoints


def save_clients(root, server, clients: Sequence[ClientState], strategy: StrategyConfig,
                 config_hash: str) -> None:
    root = Path(root)
    base_meta = {"strategy": dataclasses.asdict(strategy), "config_hash": config_hash}
    save_checkpoint(root / "server", server.global_params, {**base_meta, "round": server.round})
    for c in clients:
        params = dict(c.imaging.params)
        if c.hyper is not None:
            params.update(c.hyper.params)
        if c.norm is not None:
            for prefix in c.norm.mean:
                params[f"{prefix}.bn.running_mean"] = c.norm.mean[prefix]
                params[f"{prefix}.bn.running_var"] = c.norm.var[prefix]
        meta = {
            **base_meta,
            "hospital_id": c.hospital_id,
            "imaging": dataclasses.asdict(c.imaging.config),
            "hyper_channels": c.hyper.config.channels if c.hyper is not None else None,
            "scope": c.scope,
        }
        save_checkpoint(root / f"client-{c.hospital_id}", params, meta)


def load_clients(root, datasets: Sequence[HospitalDataset], ranges: ProtocolRanges) -> list[ClientState]:
    """Rebuild evaluation-ready clients from per-client checkpoint directories."""
    root = Path(root)
    clients = []
    for ds in datasets:
        d = root / f"client-{ds.hospital_id}"
        if not (d / "manifest.json").exists():
            raise ConfigError(f"{d}: missing client checkpoint")
        params, meta = load_checkpoint(d)
        icfg = ImagingConfig(**meta["imaging"])
        imaging = ImagingNetwork(icfg, {k: params.pop(k) for k in list(params)
                                        if not k.startswith("hyper.") and "running_" not in k})
        expected = ImagingNetwork.initialize(icfg, 0).params
        if set(imaging.params) != set(expected):
            diff = sorted(set(imaging.params) ^ set(expected))
            raise ConfigError(f"{d}: parameter names do not match the imaging config: {diff}")
        hyper = None
        if meta.get("hyper_channels") is not None:
            hyper = HyperNetwork(HyperConfig(channels=meta["hyper_channels"]),
                                 {k: params.pop(k) for k in list(params) if k.startswith("hyper.")})
        norm = None
        if icfg.batch_norm:
            norm = NormState()
            for k in [k for k in params if k.endswith((".bn.running_mean", ".bn.running_var"))]:
                prefix, stat = k.rsplit(".bn.running_", 1)
                (norm.mean if stat == "mean" else norm.var)[prefix] = params.pop(k)
        if params:
            raise ConfigError(f"{d}: unexpected parameters {sorted(params)}")
        clients.append(ClientState(ds.hospital_id, ds, ranges, imaging, hyper, meta["scope"], norm=norm))
    return clients


# ---------------------------------------------------------------------------
# the run


def run_experiment(
    cfg: ExperimentConfig,
    out_dir,
    datasets: Sequence[HospitalDataset] | None = None,
    ranges: ProtocolRanges | None = None,
    strategy: StrategyConfig | None = None,
) -> ExperimentResult:
    """Train, validate every ``val_every`` rounds, test at the end.

    Writes config.json, rounds.csv (flushed each round), summary.json and
    checkpoints/ into ``out_dir``. A diverging run leaves the rows written
    so far on disk and re-raises.
    """
    strategy = strategy or cfg.strategy
    if strategy != cfg.strategy:
        cfg = dataclasses.replace(cfg, strategy=strategy)
    if datasets is None:
        datasets, ranges = generate_data(cfg)
    elif ranges is None:
        raise ValueError("ranges are required with explicit datasets")
    check_data(cfg, datasets)

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    cfg.dump(out / "config.json")
    chash = cfg.config_hash()

    imaging, hyper = init_networks(cfg, strategy)
    ihash = init_hash(imaging)
    log.info("%s: initial weights %s", strategy.label(), ihash)
    server, clients = build_clients(datasets, ranges, imaging, hyper, strategy)

    reports = []
    with open(out / "rounds.csv", "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(CSV_COLUMNS)
        initial = RoundReport(0, [ClientRound(c.hospital_id, None, evaluate(c, "val")) for c in clients])
        reports.append(initial)
        writer.writerows(_csv_rows(initial))
        fh.flush()
        for r in range(1, cfg.rounds + 1):
            validate = r % cfg.val_every == 0 or r == cfg.rounds
            report = run_round(
                server, clients, strategy, cfg.local_epochs, cfg.lr, cfg.seed,
                batch_size=cfg.batch_size, parallel=cfg.parallel,
                eval_split="val" if validate else None,
            )
            reports.append(report)
            writer.writerows(_csv_rows(report))
            fh.flush()
            log.info("round %d/%d done in %.1fs", r, cfg.rounds, report.wall_time)

    summary = summarize(clients, "test", chash)
    write_json(out / "summary.json", summary)
    save_clients(out / "checkpoints", server, clients, strategy, chash)
    return ExperimentResult(reports, summary, ihash)


# the ablation grid: (variant id, strategy)
ABLATION_VARIANTS = (
    ("local", StrategyConfig("local")),
    ("fedavg", StrategyConfig("fedavg")),
    ("local_hyper", StrategyConfig("local", hypernetwork=True)),
    ("hffed", StrategyConfig("hffed")),
    ("hffed_hyper_only", StrategyConfig("hffed", aggregate_target="hyper_only")),
    ("hffed_encoder_only", StrategyConfig("hffed", modulation_scope="encoder_only")),
    ("hffed_decoder_only", StrategyConfig("hffed", modulation_scope="decoder_only")),
)


def run_ablation(cfg: ExperimentConfig, out_dir, datasets, ranges) -> list[dict]:
    """Every variant on the same data and initial weights; writes ablation.csv."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for vid, strat in ABLATION_VARIANTS:
        res = run_experiment(cfg, out / vid, datasets, ranges, strategy=strat)
        rows.append({
            "variant": vid,
            "label": strat.label(),
            "psnr": res.summary["mean"]["psnr"],
            "ssim": res.summary["mean"]["ssim"],
            "init_hash": res.init_hash,
        })
    with open(out / "ablation.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["variant", "label", "psnr", "ssim", "init_hash"])
        for r in rows:
            w.writerow([r["variant"], r["label"], _fmt(r["psnr"]), _fmt(r["ssim"]), r["init_hash"]])
    return rows
