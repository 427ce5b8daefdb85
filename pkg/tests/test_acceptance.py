"""Acceptance criteria, one test each. Every test prints a single PASS/FAIL line.

Criterion 5 runs at full default scale only with HFFED_FULL=1. Otherwise it
measures the per-step cost and reports the projected runtime against the
30 minute budget (see README, "Acceptance").
"""

import contextlib
import json
import os
import shutil
import struct
import time
from pathlib import Path

import numpy as np
import pytest

import refmodel
from conftest import ACCEPTANCE, rel_err
from hffed import federation as F
from hffed import metrics as M
from hffed import tensor as T
from hffed.cli import main
from hffed.config import ExperimentConfig
from hffed.experiment import generate_data, init_networks, run_experiment
from hffed.federation import StrategyConfig, aggregate, build_clients, local_train, predict, run_round
from hffed.networks import (
    PROTOCOL_FIELDS,
    HyperConfig,
    HyperNetwork,
    ImagingConfig,
    ImagingNetwork,
    ProtocolRanges,
    ScanProtocol,
    bind,
    client_forward,
    imaging_forward,
    load_checkpoint,
    normalize_protocol,
    save_checkpoint,
)
from hffed.phantom import load_dataset, make_federation, save_dataset
from hffed.tensor import Tape

FULL = os.environ.get("HFFED_FULL") == "1"
BUDGET_S = 30 * 60


@contextlib.contextmanager
def criterion(n: int, title: str):
    detail = {}
    try:
        yield detail
    except BaseException as exc:
        line = f"criterion {n} FAIL  {title}: {type(exc).__name__}: {str(exc).splitlines()[0] if str(exc) else ''}"
        ACCEPTANCE[n] = line
        print(line)
        raise
    line = f"criterion {n} PASS  {title}" + (f" ({detail['note']})" if "note" in detail else "")
    ACCEPTANCE[n] = line
    print(line)


# ---------------------------------------------------------------------------
# 1


def _fd_check(build, arrays, tol=1e-4, skip=None):
    tape = Tape()
    ts = [tape.watch(a) for a in arrays]
    tape.backward(build(*ts))
    worst = 0.0
    for i, a in enumerate(arrays):
        def f(x, i=i):
            args = list(arrays)
            args[i] = x
            return build(*[T.Tensor(v) for v in args]).item()

        err = rel_err(tape.grad(ts[i]), T.finite_diff_grad(f, a))
        if skip is not None and i == 0:
            err = err[~skip]
        worst = max(worst, float(err.max()))
    assert worst < tol, f"relative error {worst:.2e}"
    return worst


def test_criterion1_gradient_oracle_suite():
    with criterion(1, "every op and the client_forward∘mse composite match central differences") as d:
        start = time.perf_counter()
        r = np.random.default_rng(0)
        u = lambda *s: r.uniform(-1, 1, s)
        x3, c = u(3, 4, 4), u(3)
        w3 = u(3, 4, 4)
        worst = 0.0
        for op in (T.add, T.sub, T.mul):
            worst = max(worst, _fd_check(lambda a, b: T.total(T.mul(op(a, b), w3)), [x3, u(3, 4, 4)]))
            worst = max(worst, _fd_check(lambda a, b: T.total(T.mul(op(a, b), w3)), [x3, c]))
            worst = max(worst, _fd_check(lambda a, b: T.total(T.mul(op(a, b), w3)), [x3, c.reshape(3, 1, 1)]))
        worst = max(worst, _fd_check(lambda a, b: T.total(T.matmul(a, b)), [u(3, 4), u(4, 5)], tol=1e-6))
        wc = u(2, 5, 5)
        worst = max(worst, _fd_check(lambda x, k, b: T.total(T.mul(T.conv2d(x, k, b), wc)),
                                     [u(2, 5, 5), u(2, 2, 3, 3), u(2)], tol=1e-6))
        xr, wr = u(40), u(40)
        worst = max(worst, _fd_check(lambda a: T.total(T.mul(T.relu(a), wr)), [xr], skip=np.abs(xr) < 1e-4))
        worst = max(worst, _fd_check(T.mse_loss, [u(2, 3), u(2, 3)]))
        worst = max(worst, _fd_check(lambda a: T.scale(T.total(T.mul(a, a)), 0.7), [u(2, 3)]))
        ws = u(3)
        worst = max(worst, _fd_check(lambda a: T.total(T.mul(T.slice1d(T.reshape(a, (6,)), 1, 4), ws)), [u(2, 3)]))
        worst = max(worst, _fd_check(lambda a: T.total(T.mul(T.channel_norm(a)[0], w3)), [u(3, 4, 4)]))

        protos = [ScanProtocol(720, 1024, 1e6, 120, 60, 0.5, 1.0), ScanProtocol(60, 384, 1e4, 80, 300, 0.9, 3.0)]
        ranges = ProtocolRanges.from_protocols(protos)
        net = ImagingNetwork.initialize(ImagingConfig(encoder_layers=2, decoder_layers=2, channels=4, kernel=3), 3)
        hyp = HyperNetwork.initialize(HyperConfig(channels=4), 3)
        rp = np.random.default_rng(103)
        hyp.params["hyper.2.weight"] = rp.uniform(-0.05, 0.05, hyp.params["hyper.2.weight"].shape)
        hyp.params["hyper.2.bias"] = rp.uniform(-0.2, 0.2, 16)
        rb = np.random.default_rng(5)
        b, a = rb.uniform(0, 1, (1, 8, 8)), rb.uniform(0, 1, (1, 8, 8))
        tape = Tape()
        w = {**bind(net.params, tape), **bind(hyp.params, tape)}
        tape.backward(T.mse_loss(client_forward(net, hyp, b, protos[1], ranges, "all", w), a))
        z = refmodel.norm_protocol(protos[1].as_dict(), ranges.bounds)
        fd, _ = refmodel.composite_fd(net.params, hyp.params, 2, b[0], a[0], z)
        assert set(fd) == set(w)
        n_params = 0
        for name, num in fd.items():
            err = float(rel_err(tape.grad(w[name]), num).max())
            assert err < 1e-4, f"{name}: relative error {err:.2e}"
            worst = max(worst, err)
            n_params += num.size
        elapsed = time.perf_counter() - start
        assert elapsed < 30, f"took {elapsed:.1f}s"
        d["note"] = f"{n_params} composite parameters, worst rel. err {worst:.1e}, {elapsed:.1f}s"


# ---------------------------------------------------------------------------
# 2


def test_criterion2_aggregation_oracle():
    with criterion(2, "aggregate equals a looped weighted mean on 100 cases and is permutation-invariant") as d:
        r = np.random.default_rng(2)
        worst = 0.0
        for _ in range(100):
            k = int(r.integers(1, 8))
            w = r.dirichlet(np.ones(k))
            w[-1] = 1.0 - w[:-1].sum()
            shapes = {"enc.0.kernel": (2, 1, 3, 3), "enc.0.bias": (2,)}
            ups = [({n: r.standard_normal(s) for n, s in shapes.items()}, float(x)) for x in w]
            got = aggregate(ups)
            for name, shape in shapes.items():
                ref = np.zeros(shape)
                for idx in np.ndindex(shape):
                    acc = 0.0
                    for p, wi in ups:
                        acc += wi * p[name][idx]
                    ref[idx] = acc
                worst = max(worst, float(np.abs(got[name] - ref).max()))
            for _ in range(3):
                perm = aggregate([ups[i] for i in r.permutation(k)])
                assert all(np.array_equal(perm[n], got[n]) for n in shapes)
        assert worst <= 1e-12, f"max deviation {worst:.2e}"
        d["note"] = f"max deviation {worst:.1e}"


# ---------------------------------------------------------------------------
# 3


def _tiny_run(kind, k=2, rounds=2, **strategy):
    protos = [ScanProtocol(720, 1024, 1e6, 120, 60, 0.5, 1.0), ScanProtocol(60, 384, 1e4, 80, 300, 0.9, 3.0)][:k]
    ds, ranges = make_federation(protos, 3, 1, 1, size=16, seed=4)
    strat = StrategyConfig(kind=kind, **strategy)
    net = ImagingNetwork.initialize(ImagingConfig(encoder_layers=2, decoder_layers=2, channels=4, kernel=3), 4)
    hyp = HyperNetwork.initialize(HyperConfig(channels=4), 4)
    server, clients = build_clients(ds, ranges, net, hyp, strat)
    reports = [run_round(server, clients, strat, 1, 1e-3, 4) for _ in range(rounds)]
    return server, clients, reports


def _same(a, b):
    return list(a) == list(b) and all(np.array_equal(a[k], b[k]) for k in a)


def test_criterion3_degeneracy_equivalences():
    with criterion(3, "FedProx(0)=FedAvg, K=1 federated=LocalOnly, zero-init HF-Fed=plain backbone (bitwise)"):
        sa, ca, ra = _tiny_run("fedavg")
        sb, cb, rb = _tiny_run("fedprox", mu=0.0)
        assert _same(sa.global_params, sb.global_params)
        assert all(_same(x.imaging.params, y.imaging.params) for x, y in zip(ca, cb))
        assert [(c.train_loss, c.val) for r in ra for c in r.clients] == \
               [(c.train_loss, c.val) for r in rb for c in r.clients]

        sf, cf, rf = _tiny_run("fedavg", k=1)
        _, cl, rl = _tiny_run("local", k=1)
        assert _same(cf[0].imaging.params, cl[0].imaging.params)
        assert _same(sf.global_params, cf[0].imaging.params)
        assert [(c.train_loss, c.val) for r in rf for c in r.clients] == \
               [(c.train_loss, c.val) for r in rl for c in r.clients]

        cfg = ExperimentConfig(image_size=16, hospitals=2, n_train=2, n_val=1, n_test=1,
                               imaging=ImagingConfig(channels=8))
        ds, ranges = generate_data(cfg)
        net, hyp = init_networks(cfg, StrategyConfig("hffed"))
        _, hf = build_clients(ds, ranges, net, hyp, StrategyConfig("hffed"))
        for c in hf:
            for s in c.dataset.samples:
                assert np.array_equal(predict(c, s.degraded).data, imaging_forward(net, s.degraded).data)


# ---------------------------------------------------------------------------
# 4


def test_criterion4_privacy_invariant(tmp_path, monkeypatch):
    with criterion(4, "HF-Fed(imaging_only) never serializes hyper.* or image tensors toward the server") as d:
        sent = []
        real_encode = F.encode_update

        def spy(update):
            blob = real_encode(update)
            sent.append((set(update.params), {a.shape for a in update.params.values()}, blob))
            return blob

        monkeypatch.setattr(F, "encode_update", spy)
        cfg = ExperimentConfig(image_size=16, hospitals=2, n_train=2, n_val=1, n_test=1, rounds=2,
                               local_epochs=1, lr=1e-3,
                               imaging=ImagingConfig(encoder_layers=2, decoder_layers=2, channels=4, kernel=3))
        ds, ranges = generate_data(cfg)
        run_experiment(cfg, tmp_path / "run", ds, ranges)
        assert len(sent) == cfg.rounds * cfg.hospitals
        names = set().union(*(n for n, _, _ in sent))
        shapes = set().union(*(s for _, s, _ in sent))
        assert names and not any(n.startswith("hyper.") for n in names), sorted(names)
        assert not shapes & {(1, 16, 16), (16, 16)}
        images = [arr for h in ds for s in h.samples for arr in (s.clean, s.degraded)]
        for _, _, blob in sent:
            for img in images:
                assert img.astype("<f8").tobytes() not in blob
        server = json.loads((tmp_path / "run" / "checkpoints" / "server" / "manifest.json").read_text())
        assert not any(p["name"].startswith("hyper.") for p in server["parameters"])
        d["note"] = f"{len(sent)} messages, {len(names)} distinct names"


# ---------------------------------------------------------------------------
# 5

VARIANTS = {
    "local": StrategyConfig("local"),
    "local_hyper": StrategyConfig("local", hypernetwork=True),
    "fedavg": StrategyConfig("fedavg"),
    "hffed": StrategyConfig("hffed"),
}
SEEDS = (0, 1, 2, 3, 4)


def _projected_runtime(cfg: ExperimentConfig) -> tuple[float, dict]:
    """Seconds for the full grid, from timed steps at the default scale."""
    ds, ranges = generate_data(ExperimentConfig(hospitals=1, n_train=3, n_val=1, n_test=1))
    per_step = {}
    for name, strat in VARIANTS.items():
        net, hyp = init_networks(cfg, strat)
        _, (client,) = build_clients(ds, ranges, net, hyp, strat)
        local_train(client, None, StrategyConfig("local"), 1, 1e-4, np.random.default_rng(0))  # warm-up
        t0 = time.perf_counter()
        local_train(client, None, StrategyConfig("local"), 2, 1e-4, np.random.default_rng(0))
        per_step[name] = (time.perf_counter() - t0) / 6
    steps = cfg.hospitals * cfg.n_train * cfg.local_epochs * cfg.rounds
    return len(SEEDS) * steps * sum(per_step.values()), per_step


def _full_grid(out: Path) -> dict:
    results = {}
    for seed in SEEDS:
        cfg = ExperimentConfig(seed=seed)
        ds, ranges = generate_data(cfg)
        for name, strat in VARIANTS.items():
            res = run_experiment(cfg, out / f"seed-{seed}" / name, ds, ranges, strategy=strat)
            results[f"{seed}/{name}"] = res.summary["mean"]
            (out / "criterion5.json").write_text(json.dumps(results, indent=2, sort_keys=True))
    return results


@pytest.mark.slow
@pytest.mark.xfail(not FULL, reason="the default-scale grid needs hours on one core; see README", strict=True)
def test_criterion5_directional_claims(tmp_path):
    title = "HF-Fed SSIM >= FedAvg and hypernetwork PSNR >= no-hypernetwork, 4/5 seeds, < 30 min"
    with criterion(5, title) as d:
        cfg = ExperimentConfig()
        if not FULL:
            total, per_step = _projected_runtime(cfg)
            steps = ", ".join(f"{k} {v * 1e3:.0f} ms" for k, v in per_step.items())
            assert total < BUDGET_S, (
                f"projected {total / 3600:.1f} h for {len(SEEDS)} seeds x {len(VARIANTS)} variants "
                f"at default scale (per step: {steps}); budget 30 min"
            )
        out = Path(os.environ.get("HFFED_FULL_OUT", tmp_path))
        start = time.perf_counter()
        res = _full_grid(out)
        elapsed = time.perf_counter() - start
        wins = {
            "ssim hffed>=fedavg": sum(res[f"{s}/hffed"]["ssim"] >= res[f"{s}/fedavg"]["ssim"] for s in SEEDS),
            "psnr hffed>=fedavg": sum(res[f"{s}/hffed"]["psnr"] >= res[f"{s}/fedavg"]["psnr"] for s in SEEDS),
            "psnr local_hyper>=local": sum(res[f"{s}/local_hyper"]["psnr"] >= res[f"{s}/local"]["psnr"] for s in SEEDS),
        }
        summary = ", ".join(f"{k} {v}/5" for k, v in wins.items())
        print(f"criterion 5 detail: {summary}; {elapsed / 60:.1f} min")
        assert all(v >= 4 for v in wins.values()), summary
        assert elapsed < BUDGET_S, f"{summary}; took {elapsed / 60:.1f} min"
        d["note"] = f"{summary}; {elapsed / 60:.1f} min"


# ---------------------------------------------------------------------------
# 6


def test_criterion6_metric_unit_truths():
    with criterion(6, "psnr 20 dB at mse 0.01, ssim(x,x)=1, cc affine-invariant, ssim symmetric on 50 pairs"):
        assert M.psnr(np.full((8, 8), 0.1), np.zeros((8, 8)), 1.0) == pytest.approx(20.0, abs=1e-12)
        r = np.random.default_rng(6)
        x = r.uniform(0, 1, (32, 32))
        assert M.ssim(x, x) == 1.0
        y = r.uniform(0, 1, (32, 32))
        for a, b in ((2.0, 0.5), (0.1, -3.0), (7.0, 0.0)):
            assert M.pearson_cc(a * x + b, y) == pytest.approx(M.pearson_cc(x, y), abs=1e-12)
            assert M.pearson_cc(x, a * x + b) == pytest.approx(1.0, abs=1e-12)
        for _ in range(50):
            p, q = r.uniform(0, 1, (24, 24)), r.uniform(0, 1, (24, 24))
            assert M.ssim(p, q) == M.ssim(q, p)


# ---------------------------------------------------------------------------
# 7


def test_criterion7_determinism(tmp_path):
    with criterion(7, "two train runs give identical rounds.csv; parallel and serial reports identical"):
        base = {"seed": 7, "image_size": 16, "hospitals": 3, "n_train": 3, "n_val": 2, "n_test": 2,
                "rounds": 3, "local_epochs": 1, "lr": 1e-3, "val_every": 1,
                "imaging": {"encoder_layers": 2, "decoder_layers": 2, "channels": 4, "kernel": 3}}
        cfg = tmp_path / "cfg.json"
        cfg.write_text(json.dumps(base))
        assert main(["gen-data", "--config", str(cfg), "--out", str(tmp_path / "data")]) == 0
        for run in ("a", "b"):
            assert main(["train", "--config", str(cfg), "--data", str(tmp_path / "data"),
                         "--out", str(tmp_path / run)]) == 0
        assert (tmp_path / "a" / "rounds.csv").read_bytes() == (tmp_path / "b" / "rounds.csv").read_bytes()
        assert (tmp_path / "a" / "summary.json").read_bytes() == (tmp_path / "b" / "summary.json").read_bytes()
        par = tmp_path / "par.json"
        par.write_text(json.dumps({**base, "parallel": True}))
        assert main(["train", "--config", str(par), "--data", str(tmp_path / "data"),
                     "--out", str(tmp_path / "p")]) == 0
        assert (tmp_path / "p" / "rounds.csv").read_bytes() == (tmp_path / "a" / "rounds.csv").read_bytes()
        assert (tmp_path / "p" / "summary.json").read_bytes() == (tmp_path / "a" / "summary.json").read_bytes()


# ---------------------------------------------------------------------------
# 8


def test_criterion8_normalization_contract():
    with criterion(8, "normalize_protocol: exact 0/1 endpoints, monotone, log10 on exactly the flagged entries"):
        bounds = {"views": (60.0, 720.0), "detector_bins": (384.0, 1024.0), "photon_count": (1e4, 1e6),
                  "tube_voltage": (80.0, 120.0), "tube_current": (60.0, 300.0),
                  "pixel_spacing": (0.5, 0.9), "slice_thickness": (1.0, 3.0)}
        r = ProtocolRanges(bounds)
        lo = ScanProtocol(**{k: v[0] for k, v in bounds.items()})
        hi = ScanProtocol(**{k: v[1] for k, v in bounds.items()})
        assert normalize_protocol(lo, r).data.tolist() == [0.0] * 7
        assert normalize_protocol(hi, r).data.tolist() == [1.0] * 7
        mid = {k: 10 ** ((np.log10(a) + np.log10(b)) / 2) for k, (a, b) in bounds.items()}
        mid.update(photon_count=1e5, tube_voltage=100.0)
        z = dict(zip(PROTOCOL_FIELDS, normalize_protocol(ScanProtocol(**mid), r).data))
        assert z["photon_count"] == pytest.approx(0.5, abs=1e-15)
        assert z["tube_voltage"] == 0.5
        for name, (a, b) in bounds.items():
            geo = mid[name] if name != "tube_voltage" else np.sqrt(a * b)
            p = ScanProtocol(**{**mid, name: geo})
            lin = (geo - a) / (b - a)
            logv = (np.log10(geo) - np.log10(a)) / (np.log10(b) - np.log10(a))
            got = dict(zip(PROTOCOL_FIELDS, normalize_protocol(p, r).data))[name]
            flagged = name in ("views", "detector_bins", "photon_count")
            assert got == pytest.approx(logv if flagged else lin, abs=1e-12), name
            assert abs(logv - lin) > 1e-3  # the two maps are distinguishable here
            vals = np.linspace(a, b, 25)
            seq = [dict(zip(PROTOCOL_FIELDS, normalize_protocol(ScanProtocol(**{**mid, name: v}), r).data))[name]
                   for v in vals]
            assert all(s < t for s, t in zip(seq, seq[1:])), name


# ---------------------------------------------------------------------------
# 9


def test_criterion9_format_round_trips(tmp_path):
    with criterion(9, "dataset and checkpoint save/load identity; hand-authored directory loads"):
        ds, _ = make_federation([ScanProtocol(240, 640, 1e5, 100, 120, 0.7, 2.0)], 3, 2, 1, size=16, seed=9)
        save_dataset(ds[0], tmp_path / "ds")
        back = load_dataset(tmp_path / "ds")
        assert back.protocol == ds[0].protocol and back.splits == ds[0].splits
        assert back.hospital_id == ds[0].hospital_id
        assert all(np.array_equal(s.clean, t.clean) and np.array_equal(s.degraded, t.degraded)
                   for s, t in zip(ds[0].samples, back.samples))

        net = ImagingNetwork.initialize(ImagingConfig(), 9)
        hyp = HyperNetwork.initialize(HyperConfig(), 9)
        params = {**net.params, **hyp.params}
        save_checkpoint(tmp_path / "ck", params, {"k": 1})
        loaded, meta = load_checkpoint(tmp_path / "ck")
        assert list(loaded) == list(params) and meta == {"k": 1}
        assert all(np.array_equal(loaded[k], params[k]) for k in params)

        fx = tmp_path / "fixture"
        fx.mkdir()
        (fx / "meta.json").write_text(json.dumps({
            "format_version": "1", "hospital_id": 4,
            "protocol": {n: {"value": v, "unit": u} for n, v, u in (
                ("views", 90, "count"), ("detector_bins", 400, "count"), ("photon_count", 20000, "photons"),
                ("tube_voltage", 90, "kVp"), ("tube_current", 100, "mA"), ("pixel_spacing", 0.8, "mm"),
                ("slice_thickness", 2.5, "mm"))},
            "image_shape": [1, 2, 2], "sample_count": 3,
            "splits": {"train": [2, 0], "val": [1], "test": []},
        }))
        for i in range(3):
            for kind in ("clean", "degraded"):
                vals = [i + 0.25 * j for j in range(4)]
                (fx / f"{kind}_{i}.hft").write_bytes(
                    b"HFT1" + bytes([3]) + struct.pack("<3I", 1, 2, 2) + struct.pack("<4d", *vals))
        got = load_dataset(fx)
        assert got.hospital_id == 4 and got.splits["train"] == [2, 0] and got.splits["test"] == []
        assert got.split("train")[0].clean[0, 1, 1] == 2.75
        assert got.protocol.photon_count == 20000
