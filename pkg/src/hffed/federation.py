"""Round-based federated training: clients, server, strategies and exchange.

Every strategy shares one loop: broadcast the global parameters, train each
client locally, ship the strategy's uplink parameters to the server as a
serialized message, and average them with data-proportional weights.
HF-Fed ships only the imaging network; each hospital keeps its hypernetwork.
"""

from __future__ import annotations

import json
import logging
import math
import struct
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from hffed import metrics
from hffed import tensor as T
from hffed.networks import (
    SCOPES,
    HyperNetwork,
    ImagingNetwork,
    NormState,
    ProtocolRanges,
    bind,
    client_forward,
    imaging_forward,
)
from hffed.phantom import HospitalDataset
from hffed.seeding import substream
from hffed.tensor import AdamState, Tape, adam_step

log = logging.getLogger(__name__)

STRATEGY_KINDS = ("local", "fedavg", "fedprox", "fedbn", "hffed")
AGGREGATE_TARGETS = ("imaging_only", "hyper_only")


class TrainingDiverged(RuntimeError):
    pass


@dataclass(frozen=True)
class StrategyConfig:
    """Which parameters are trained, shared and averaged.

    ``hypernetwork`` only matters for ``local``: it enables the
    protocol-conditioned model without any federation (an ablation arm).
    """

    kind: str = "hffed"
    mu: float = 1e-4
    modulation_scope: str = "all"
    aggregate_target: str = "imaging_only"
    hypernetwork: bool = False

    def __post_init__(self):
        if self.kind not in STRATEGY_KINDS:
            raise ValueError(f"unknown strategy {self.kind!r}; expected one of {STRATEGY_KINDS}")
        if self.mu < 0:
            raise ValueError("FedProx mu must be non-negative")
        if self.modulation_scope not in SCOPES or self.modulation_scope == "none":
            raise ValueError(f"bad modulation scope {self.modulation_scope!r}")
        if self.aggregate_target not in AGGREGATE_TARGETS:
            raise ValueError(f"bad aggregate target {self.aggregate_target!r}")
        if self.kind != "hffed" and (
            self.modulation_scope != "all" or self.aggregate_target != "imaging_only"
        ):
            raise ValueError("modulation scope and aggregate target only apply to hffed")
        if self.hypernetwork and self.kind not in ("local", "hffed"):
            raise ValueError(f"hypernetwork flag is not supported for {self.kind}")

    @property
    def uses_hyper(self) -> bool:
        return self.kind == "hffed" or self.hypernetwork

    @property
    def scope(self) -> str:
        return self.modulation_scope if self.uses_hyper else "none"

    @property
    def federated(self) -> bool:
        return self.kind != "local"

    @property
    def prox_mu(self) -> float:
        return self.mu if self.kind == "fedprox" else 0.0

    def label(self) -> str:
        if self.kind == "hffed":
            return f"hffed[{self.modulation_scope},{self.aggregate_target}]"
        if self.kind == "fedprox":
            return f"fedprox[mu={self.mu:g}]"
        return f"{self.kind}+hyper" if self.hypernetwork else self.kind


@dataclass
class ClientState:
    hospital_id: int
    dataset: HospitalDataset
    ranges: ProtocolRanges
    imaging: ImagingNetwork
    hyper: HyperNetwork | None = None
    scope: str = "none"
    adam_imaging: AdamState = field(default_factory=AdamState)
    adam_hyper: AdamState | None = None
    norm: NormState | None = None

    @property
    def n_train(self) -> int:
        return len(self.dataset.splits["train"])

    def trainable(self) -> dict[str, np.ndarray]:
        out = dict(self.imaging.params)
        if self.hyper is not None:
            out.update(self.hyper.params)
        return out


@dataclass
class ServerState:
    global_params: dict[str, np.ndarray]
    round: int = 0
    weights: dict[int, float] = field(default_factory=dict)
    # audit log of everything that crossed the uplink
    seen_names: set[str] = field(default_factory=set)
    seen_shapes: set[tuple[int, ...]] = field(default_factory=set)

    def receive(self, blob: bytes) -> ClientUpdate:
        update = decode_update(blob)
        for name, arr in update.params.items():
            self.seen_names.add(name)
            self.seen_shapes.add(arr.shape)
        return update


@dataclass(frozen=True)
class Metrics:
    mse: float
    psnr: float
    ssim: float
    cc: float

    def as_dict(self) -> dict[str, float]:
        return {"mse": self.mse, "psnr": self.psnr, "ssim": self.ssim, "cc": self.cc}


@dataclass
class ClientRound:
    client: int
    train_loss: float | None
    val: Metrics | None


@dataclass
class RoundReport:
    round: int
    clients: list[ClientRound]
    wall_time: float = 0.0


# ---------------------------------------------------------------------------
# messages


@dataclass(frozen=True)
class ClientUpdate:
    hospital_id: int
    n_samples: int
    params: dict[str, np.ndarray]


def encode_update(update: ClientUpdate) -> bytes:
    """Length-prefixed JSON header followed by one HFT1 blob per parameter."""
    blobs = [T.encode_tensor(a) for a in update.params.values()]
    header = {
        "hospital_id": update.hospital_id,
        "n_samples": update.n_samples,
        "params": [[n, len(b)] for n, b in zip(update.params, blobs)],
    }
    head = json.dumps(header).encode()
    return struct.pack("<I", len(head)) + head + b"".join(blobs)


def decode_update(buf: bytes) -> ClientUpdate:
    (hlen,) = struct.unpack_from("<I", buf, 0)
    header = json.loads(buf[4 : 4 + hlen])
    pos = 4 + hlen
    params = {}
    for name, size in header["params"]:
        params[name] = T.decode_tensor(buf[pos : pos + size], source=f"update/{name}")
        pos += size
    if pos != len(buf):
        raise ValueError("trailing bytes in client update")
    return ClientUpdate(header["hospital_id"], header["n_samples"], params)


# ---------------------------------------------------------------------------
# parameter routing


def uplink_params(client: ClientState, strategy: StrategyConfig) -> dict[str, np.ndarray]:
    """The parameters this strategy sends to the server."""
    if strategy.kind == "hffed" and strategy.aggregate_target == "hyper_only":
        return dict(client.hyper.params)
    if strategy.kind == "fedbn":
        return {k: v for k, v in client.imaging.params.items() if ".bn." not in k}
    return dict(client.imaging.params)


def _check_compatible(local: Mapping[str, np.ndarray], incoming: Mapping[str, np.ndarray], who: str):
    for name, arr in incoming.items():
        if name not in local:
            raise T.ShapeError(f"{who}: unknown parameter {name} in global model")
        if local[name].shape != arr.shape:
            raise T.ShapeError(
                f"{who}: {name} has shape {list(local[name].shape)}, global {list(arr.shape)}"
            )


def sync_down(client: ClientState, global_params, strategy: StrategyConfig) -> None:
    """Overwrite the client's shared parameters with the global ones."""
    if not strategy.federated or global_params is None:
        return
    who = f"client {client.hospital_id}"
    if strategy.kind == "hffed" and strategy.aggregate_target == "hyper_only":
        _check_compatible(client.hyper.params, global_params, who)
        client.hyper.params.update({k: v.copy() for k, v in global_params.items()})
        return
    _check_compatible(client.imaging.params, global_params, who)
    expected = uplink_params(client, strategy).keys()
    if set(global_params) != set(expected):
        raise T.ShapeError(f"{who}: global parameter names do not match the shared set")
    client.imaging.params.update({k: v.copy() for k, v in global_params.items()})


# ---------------------------------------------------------------------------
# local training


def predict(client: ClientState, image, weights=None, training: bool = False) -> T.Tensor:
    if client.hyper is not None:
        return client_forward(
            client.imaging, client.hyper, image, client.dataset.protocol, client.ranges,
            client.scope, weights,
        )
    return imaging_forward(
        client.imaging, image, weights=weights, norm=client.norm, training=training
    )


def local_train(
    client: ClientState,
    global_params,
    strategy: StrategyConfig,
    epochs: int,
    lr: float,
    rng: np.random.Generator,
    batch_size: int = 1,
    round_idx: int | None = None,
) -> tuple[ClientState, float]:
    """Sync down, then ``epochs`` passes of Adam over the client's train split.

    Returns the (mutated) client and its mean training loss. With zero
    epochs the loss comes from a forward-only pass and nothing changes.
    """
    sync_down(client, global_params, strategy)
    train = client.dataset.split("train")
    if not train:
        raise ValueError(f"client {client.hospital_id} has an empty train split")
    if epochs == 0:
        losses = [T.mse_loss(predict(client, s.degraded), s.clean).item() for s in train]
        return client, float(np.mean(losses))

    mu = strategy.prox_mu
    anchor = {k: v.copy() for k, v in global_params.items()} if mu > 0 else None
    client.adam_imaging.lr = lr
    if client.adam_hyper is not None:
        client.adam_hyper.lr = lr
    losses = []
    for _ in range(epochs):
        order = rng.permutation(len(train))
        for start in range(0, len(order), batch_size):
            batch = [train[i] for i in order[start : start + batch_size]]
            tape = Tape()
            w_img = bind(client.imaging.params, tape)
            w_hyp = bind(client.hyper.params, tape) if client.hyper is not None else {}
            weights = {**w_img, **w_hyp}
            loss = None
            for s in batch:
                term = T.mse_loss(predict(client, s.degraded, weights, training=True), s.clean)
                loss = term if loss is None else T.add(loss, term)
            if len(batch) > 1:
                loss = T.scale(loss, 1.0 / len(batch))
            if anchor is not None:
                prox = None
                for name, ref in anchor.items():
                    d = T.sub(w_img[name], ref)
                    sq = T.total(T.mul(d, d))
                    prox = sq if prox is None else T.add(prox, sq)
                loss = T.add(loss, T.scale(prox, mu / 2.0))
            value = loss.item()
            if not math.isfinite(value):
                raise TrainingDiverged(
                    f"non-finite loss at round {round_idx}, client {client.hospital_id}"
                )
            tape.backward(loss)
            client.imaging.params = adam_step(
                client.imaging.params,
                {k: tape.grad(t) for k, t in w_img.items()},
                client.adam_imaging,
            )
            if client.hyper is not None:
                client.hyper.params = adam_step(
                    client.hyper.params,
                    {k: tape.grad(t) for k, t in w_hyp.items()},
                    client.adam_hyper,
                )
            losses.append(value)
    return client, float(np.mean(losses))


# ---------------------------------------------------------------------------
# server side


def aggregate(updates: Sequence[tuple[Mapping[str, np.ndarray], float]]) -> dict[str, np.ndarray]:
    """Weighted mean of parameter sets.

    Per element, the weighted terms are sorted before summation, so the
    result does not depend on the order of ``updates``.
    """
    if not updates:
        raise ValueError("nothing to aggregate")
    weights = [float(w) for _, w in updates]
    if any(w < 0 for w in weights) or abs(math.fsum(weights) - 1.0) > 1e-9:
        raise ValueError(f"aggregation weights must be non-negative and sum to 1, got {weights}")
    first = updates[0][0]
    for params, _ in updates[1:]:
        if set(params) != set(first):
            raise T.ShapeError(f"parameter names differ: {sorted(set(params) ^ set(first))}")
        for name, arr in params.items():
            if arr.shape != first[name].shape:
                raise T.ShapeError(
                    f"{name}: shape {list(arr.shape)} differs from {list(first[name].shape)}"
                )
    out = {}
    for name in first:
        terms = np.stack([w * np.asarray(p[name], dtype=np.float64) for p, w in updates])
        terms.sort(axis=0)
        out[name] = terms.sum(axis=0)
    return out


def data_weights(clients: Sequence[ClientState]) -> dict[int, float]:
    total = sum(c.n_train for c in clients)
    return {c.hospital_id: c.n_train / total for c in clients}


def evaluate(client: ClientState, split: str) -> Metrics:
    samples = client.dataset.split(split)
    if not samples:
        raise ValueError(f"client {client.hospital_id}: {split} split is empty")
    rows = []
    for s in samples:
        pred = predict(client, s.degraded).data
        rows.append(
            (
                metrics.mse(pred, s.clean),
                metrics.psnr(pred, s.clean),
                metrics.ssim(pred, s.clean),
                metrics.pearson_cc(pred, s.clean),
            )
        )
    m = np.mean(np.array(rows), axis=0)
    return Metrics(*(float(x) for x in m))


def run_round(
    server: ServerState,
    clients: Sequence[ClientState],
    strategy: StrategyConfig,
    epochs: int,
    lr: float,
    seed: int,
    batch_size: int = 1,
    parallel: bool = False,
    eval_split: str | None = "val",
) -> RoundReport:
    """One broadcast -> local training -> aggregation cycle."""
    start = time.perf_counter()
    r = server.round + 1
    global_params = server.global_params if strategy.federated else None

    def work(c: ClientState) -> float:
        rng = substream(seed, "shuffle", f"round-{r}", f"client-{c.hospital_id}")
        _, loss = local_train(c, global_params, strategy, epochs, lr, rng, batch_size, r)
        return loss

    if parallel and len(clients) > 1:
        with ThreadPoolExecutor(max_workers=len(clients)) as pool:
            losses = list(pool.map(work, clients))
    else:
        losses = [work(c) for c in clients]

    if strategy.federated:
        server.weights = data_weights(clients)
        updates = []
        for c in clients:
            msg = ClientUpdate(c.hospital_id, c.n_train, uplink_params(c, strategy))
            updates.append(server.receive(encode_update(msg)))
        server.global_params = aggregate([(u.params, server.weights[u.hospital_id]) for u in updates])
        for c in clients:
            sync_down(c, server.global_params, strategy)
    server.round = r

    entries = []
    for c, loss in zip(clients, losses):
        val = evaluate(c, eval_split) if eval_split else None
        entries.append(ClientRound(c.hospital_id, loss, val))
    return RoundReport(r, entries, time.perf_counter() - start)


def build_clients(
    datasets: Sequence[HospitalDataset],
    ranges: ProtocolRanges,
    imaging: ImagingNetwork,
    hyper: HyperNetwork | None,
    strategy: StrategyConfig,
) -> tuple[ServerState, list[ClientState]]:
    """Clients all start from copies of the same initial networks."""
    clients = []
    for ds in datasets:
        use_hyper = strategy.uses_hyper
        clients.append(
            ClientState(
                hospital_id=ds.hospital_id,
                dataset=ds,
                ranges=ranges,
                imaging=imaging.copy(),
                hyper=hyper.copy() if use_hyper else None,
                scope=strategy.scope,
                adam_hyper=AdamState() if use_hyper else None,
                norm=NormState() if imaging.config.batch_norm else None,
            )
        )
    server = ServerState(global_params={})
    if strategy.federated:
        server.global_params = {k: v.copy() for k, v in uplink_params(clients[0], strategy).items()}
        server.weights = data_weights(clients)
    return server, clients
