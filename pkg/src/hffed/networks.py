"""Imaging network, hospital hypernetwork and protocol-conditioned modulation.

The imaging network is a small RED-CNN-style encoder/decoder of
same-padded convolutions. The hypernetwork maps a normalized scanning
protocol to two groups of per-channel scale/bias factors, one shared by
every encoder layer and one shared by the decoder layers.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Mapping

import numpy as np

from hffed import tensor as T
from hffed.seeding import substream
from hffed.tensor import Tape, Tensor

SCOPES = ("none", "encoder_only", "decoder_only", "all")


# ---------------------------------------------------------------------------
# scanning protocol


@dataclass(frozen=True)
class ScanProtocol:
    views: float
    detector_bins: float
    photon_count: float
    tube_voltage: float
    tube_current: float
    pixel_spacing: float
    slice_thickness: float

    def __post_init__(self):
        for name, value in self.as_dict().items():
            if not value > 0 or not math.isfinite(value):
                raise ValueError(f"protocol entry {name} must be positive and finite, got {value}")

    def as_dict(self) -> dict[str, float]:
        return {f.name: float(getattr(self, f.name)) for f in fields(self)}

    @classmethod
    def from_dict(cls, d: Mapping[str, float]) -> ScanProtocol:
        names = [f.name for f in fields(cls)]
        unknown = set(d) - set(names)
        if unknown:
            raise ValueError(f"unknown protocol entries: {sorted(unknown)}")
        missing = [n for n in names if n not in d]
        if missing:
            raise ValueError(f"missing protocol entries: {missing}")
        return cls(**{n: float(d[n]) for n in names})


PROTOCOL_FIELDS = tuple(f.name for f in fields(ScanProtocol))
# large-magnitude entries, logarithmized (base 10) before min-max scaling
LOG_FIELDS = frozenset({"views", "detector_bins", "photon_count"})
PROTOCOL_UNITS = {
    "views": "count",
    "detector_bins": "count",
    "photon_count": "photons",
    "tube_voltage": "kVp",
    "tube_current": "mA",
    "pixel_spacing": "mm",
    "slice_thickness": "mm",
}


def _to_scale(name: str, value: float) -> float:
    return math.log10(value) if name in LOG_FIELDS else float(value)


def _from_scale(name: str, value: float) -> float:
    return 10.0**value if name in LOG_FIELDS else float(value)


@dataclass(frozen=True)
class ProtocolRanges:
    """Per-entry (min, max) bounds in raw units."""

    bounds: dict[str, tuple[float, float]]

    def __post_init__(self):
        if set(self.bounds) != set(PROTOCOL_FIELDS):
            raise ValueError(f"ranges must cover exactly {list(PROTOCOL_FIELDS)}")
        for name, (lo, hi) in self.bounds.items():
            if not lo < hi:
                raise ValueError(f"degenerate range for {name}: min {lo} is not below max {hi}")
            if name in LOG_FIELDS and lo <= 0:
                raise ValueError(f"range for logarithmized entry {name} must be positive")

    @classmethod
    def from_protocols(cls, protocols, margin: float = 0.05) -> ProtocolRanges:
        """Elementwise min/max over ``protocols``, widened by ``margin`` of the span.

        Widening happens on the log scale for logarithmized entries. An entry
        shared by every protocol is widened by ``margin`` of its magnitude.
        """
        if not protocols:
            raise ValueError("need at least one protocol")
        bounds = {}
        for name in PROTOCOL_FIELDS:
            vals = [_to_scale(name, getattr(p, name)) for p in protocols]
            lo, hi = min(vals), max(vals)
            span = hi - lo
            pad = margin * span if span > 0 else margin * max(abs(hi), 1.0)
            bounds[name] = (_from_scale(name, lo - pad), _from_scale(name, hi + pad))
        return cls(bounds)

    def to_dict(self) -> dict:
        return {n: {"min": lo, "max": hi} for n, (lo, hi) in self.bounds.items()}

    @classmethod
    def from_dict(cls, d: Mapping) -> ProtocolRanges:
        return cls({n: (float(v["min"]), float(v["max"])) for n, v in d.items()})


def normalize_protocol(n: ScanProtocol, ranges: ProtocolRanges) -> Tensor:
    """Map each protocol entry to [0, 1] by min-max scaling within ``ranges``.

    Views, detector bins and photon count are log10-transformed first, and so
    are their range endpoints.
    """
    out = np.empty(len(PROTOCOL_FIELDS))
    for j, name in enumerate(PROTOCOL_FIELDS):
        raw = getattr(n, name)
        lo_raw, hi_raw = ranges.bounds[name]
        if not lo_raw <= raw <= hi_raw:
            raise ValueError(f"protocol entry {name}={raw} lies outside [{lo_raw}, {hi_raw}]")
        v, lo, hi = (_to_scale(name, x) for x in (raw, lo_raw, hi_raw))
        out[j] = (v - lo) / (hi - lo)
    return Tensor(out)


# ---------------------------------------------------------------------------
# parameter containers


def _uniform_init(seed: int, name: str, shape: tuple[int, ...], fan_in: int) -> np.ndarray:
    s = math.sqrt(1.0 / fan_in)
    return substream(seed, "init", name).uniform(-s, s, size=shape)


@dataclass(frozen=True)
class ImagingConfig:
    encoder_layers: int = 3
    decoder_layers: int = 3
    channels: int = 16
    kernel: int = 5
    residual_global: bool = True
    batch_norm: bool = False  # FedBN baseline backbone only

    def __post_init__(self):
        if self.encoder_layers != self.decoder_layers:
            raise ValueError("encoder_layers must equal decoder_layers")
        if self.encoder_layers < 1 or self.channels < 1:
            raise ValueError("need at least one layer and one channel")
        if self.kernel % 2 == 0 or self.kernel < 1:
            raise ValueError(f"kernel size must be odd, got {self.kernel}")

    def layers(self) -> list[tuple[str, int, int]]:
        """(name prefix, in channels, out channels) for every conv, input to output."""
        f = self.channels
        out = [(f"enc.{i}", 1 if i == 0 else f, f) for i in range(self.encoder_layers)]
        last = self.decoder_layers - 1
        out += [(f"dec.{i}", f, 1 if i == last else f) for i in range(self.decoder_layers)]
        return out


@dataclass
class ImagingNetwork:
    config: ImagingConfig
    params: dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def initialize(cls, config: ImagingConfig, seed: int) -> ImagingNetwork:
        k = config.kernel
        params: dict[str, np.ndarray] = {}
        layers = config.layers()
        for idx, (prefix, cin, cout) in enumerate(layers):
            fan_in = cin * k * k
            params[f"{prefix}.kernel"] = _uniform_init(seed, f"{prefix}.kernel", (cout, cin, k, k), fan_in)
            params[f"{prefix}.bias"] = _uniform_init(seed, f"{prefix}.bias", (cout,), fan_in)
            if config.batch_norm and idx < len(layers) - 1:
                params[f"{prefix}.bn.scale"] = np.ones(cout)
                params[f"{prefix}.bn.shift"] = np.zeros(cout)
        return cls(config, params)

    def copy(self) -> ImagingNetwork:
        return ImagingNetwork(self.config, {k: v.copy() for k, v in self.params.items()})


@dataclass(frozen=True)
class HyperConfig:
    inputs: int = len(PROTOCOL_FIELDS)
    hidden: tuple[int, int] = (256, 512)
    channels: int = 16
    groups: int = 2

    @property
    def output_width(self) -> int:
        return 2 * self.groups * self.channels

    def dims(self) -> list[int]:
        return [self.inputs, *self.hidden, self.output_width]


@dataclass
class HyperNetwork:
    config: HyperConfig
    params: dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def initialize(cls, config: HyperConfig, seed: int) -> HyperNetwork:
        dims = config.dims()
        params: dict[str, np.ndarray] = {}
        last = len(dims) - 2
        for i, (din, dout) in enumerate(zip(dims[:-1], dims[1:])):
            if i == last:
                # identity modulation at the start of training
                params[f"hyper.{i}.weight"] = np.zeros((din, dout))
                params[f"hyper.{i}.bias"] = np.zeros(dout)
            else:
                params[f"hyper.{i}.weight"] = _uniform_init(seed, f"hyper.{i}.weight", (din, dout), din)
                params[f"hyper.{i}.bias"] = _uniform_init(seed, f"hyper.{i}.bias", (dout,), din)
        return cls(config, params)

    def copy(self) -> HyperNetwork:
        return HyperNetwork(self.config, {k: v.copy() for k, v in self.params.items()})

    def parameter_count(self) -> int:
        return sum(p.size for p in self.params.values())


def bind(params: Mapping[str, np.ndarray], tape: Tape | None = None) -> dict[str, Tensor]:
    """Wrap parameter arrays as tensors, watched on ``tape`` when given."""
    if tape is None:
        return {k: Tensor(v) for k, v in params.items()}
    return {k: tape.watch(v) for k, v in params.items()}


# ---------------------------------------------------------------------------
# forward passes


@dataclass
class ModulationFactors:
    gamma_enc: Tensor
    gamma_dec: Tensor
    beta_enc: Tensor
    beta_dec: Tensor

    def group(self, name: str) -> tuple[Tensor, Tensor]:
        if name == "enc":
            return self.gamma_enc, self.beta_enc
        return self.gamma_dec, self.beta_dec

    @classmethod
    def identity(cls, channels: int) -> ModulationFactors:
        one, zero = np.ones(channels), np.zeros(channels)
        return cls(Tensor(one), Tensor(one), Tensor(zero), Tensor(zero))


def hyper_forward(
    net: HyperNetwork, n_normalized, weights: Mapping[str, Tensor] | None = None
) -> ModulationFactors:
    """Protocol vector -> [gamma_enc | gamma_dec | beta_enc | beta_dec].

    The gamma halves are emitted as ``1 + raw`` so a zeroed last layer gives
    identity modulation.
    """
    w = weights if weights is not None else bind(net.params)
    x = T.as_tensor(n_normalized)
    if x.shape != (net.config.inputs,):
        raise T.ShapeError(f"hypernetwork expects [{net.config.inputs}] input, got {list(x.shape)}")
    h = T.reshape(x, (1, -1))
    n_layers = len(net.config.dims()) - 1
    for i in range(n_layers):
        bias = T.reshape(w[f"hyper.{i}.bias"], (1, -1))
        h = T.add(T.matmul(h, w[f"hyper.{i}.weight"]), bias)
        if i < n_layers - 1:
            h = T.relu(h)
    out = T.reshape(h, (-1,))
    f = net.config.channels
    one = np.ones(f)
    return ModulationFactors(
        gamma_enc=T.add(T.slice1d(out, 0, f), one),
        gamma_dec=T.add(T.slice1d(out, f, 2 * f), one),
        beta_enc=T.slice1d(out, 2 * f, 3 * f),
        beta_dec=T.slice1d(out, 3 * f, 4 * f),
    )


@dataclass
class NormState:
    """Running per-channel statistics for the FedBN backbone."""

    mean: dict[str, np.ndarray] = field(default_factory=dict)
    var: dict[str, np.ndarray] = field(default_factory=dict)
    momentum: float = 0.1
    eps: float = 1e-5

    def update(self, prefix: str, mean: np.ndarray, var: np.ndarray) -> None:
        if prefix not in self.mean:
            self.mean[prefix] = mean.copy()
            self.var[prefix] = var.copy()
            return
        m = self.momentum
        self.mean[prefix] = (1 - m) * self.mean[prefix] + m * mean
        self.var[prefix] = (1 - m) * self.var[prefix] + m * var


def _normalize_features(feat: Tensor, prefix: str, w, norm: NormState, training: bool) -> Tensor:
    if training:
        feat, mean, var = T.channel_norm(feat, norm.eps)
        norm.update(prefix, mean, var)
    else:
        # before any training step the running stats are the unit defaults
        c = feat.shape[0]
        mean = norm.mean.get(prefix, np.zeros(c))
        inv = 1.0 / np.sqrt(norm.var.get(prefix, np.ones(c)) + norm.eps)
        feat = T.mul(T.sub(feat, mean), inv)
    return T.add(T.mul(feat, w[f"{prefix}.bn.scale"]), w[f"{prefix}.bn.shift"])


def imaging_forward(
    net: ImagingNetwork,
    b,
    mods: ModulationFactors | None = None,
    scope: str = "none",
    weights: Mapping[str, Tensor] | None = None,
    norm: NormState | None = None,
    training: bool = False,
) -> Tensor:
    """Run the encoder/decoder on a [1, H, W] image.

    Inside a modulated group every layer's post-activation features are
    transformed per channel as ``gamma * feat + beta``. The final 1-channel
    output layer is never modulated.
    """
    if scope not in SCOPES:
        raise ValueError(f"unknown modulation scope {scope!r}")
    if (mods is None) != (scope == "none"):
        raise ValueError("modulation factors must be given exactly when scope != 'none'")
    cfg = net.config
    if mods is not None:
        for t in (mods.gamma_enc, mods.gamma_dec, mods.beta_enc, mods.beta_dec):
            if t.shape != (cfg.channels,):
                raise T.ShapeError(
                    f"modulation width {list(t.shape)} does not match {cfg.channels} channels"
                )
    if cfg.batch_norm and norm is None:
        raise ValueError("batch-norm backbone needs a NormState")
    w = weights if weights is not None else bind(net.params)
    x = T.as_tensor(b)
    if x.data.ndim != 3 or x.shape[0] != 1:
        raise T.ShapeError(f"imaging network expects [1,H,W], got {list(x.shape)}")
    modulated = {
        "none": (),
        "encoder_only": ("enc",),
        "decoder_only": ("dec",),
        "all": ("enc", "dec"),
    }[scope]
    layers = cfg.layers()
    feat = x
    for idx, (prefix, _, _) in enumerate(layers):
        feat = T.conv2d(feat, w[f"{prefix}.kernel"], w[f"{prefix}.bias"])
        if idx == len(layers) - 1:
            break
        if cfg.batch_norm:
            feat = _normalize_features(feat, prefix, w, norm, training)
        feat = T.relu(feat)
        group = prefix.split(".")[0]
        if group in modulated:
            gamma, beta = mods.group(group)
            feat = T.add(T.mul(feat, gamma), beta)
    if cfg.residual_global:
        feat = T.add(x, feat)
    return feat


def client_forward(
    imaging: ImagingNetwork,
    hyper: HyperNetwork,
    b,
    n: ScanProtocol,
    ranges: ProtocolRanges,
    scope: str = "all",
    weights: Mapping[str, Tensor] | None = None,
) -> Tensor:
    """Protocol-conditioned forward pass; one graph reaching both networks."""
    n_norm = normalize_protocol(n, ranges)
    mods = hyper_forward(hyper, n_norm, weights)
    if scope == "none":
        mods = None
    return imaging_forward(imaging, b, mods, scope, weights)


# ---------------------------------------------------------------------------
# checkpoints


class CheckpointError(ValueError):
    pass


MANIFEST = "manifest.json"


def save_checkpoint(directory, params: Mapping[str, np.ndarray], meta: Mapping | None = None) -> None:
    """Write a manifest plus one HFT1 blob per parameter, in order."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    entries = []
    for name, arr in params.items():
        fname = f"{name}.hft"
        T.save_tensor(d / fname, arr)
        entries.append({"name": name, "shape": list(np.shape(arr)), "file": fname})
    manifest = {"format_version": "1", "meta": dict(meta or {}), "parameters": entries}
    (d / MANIFEST).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def load_checkpoint(directory) -> tuple[dict[str, np.ndarray], dict]:
    d = Path(directory)
    mpath = d / MANIFEST
    try:
        manifest = json.loads(mpath.read_text())
        entries = manifest["parameters"]
    except (OSError, ValueError, KeyError, TypeError) as exc:
        raise CheckpointError(f"{mpath}: missing or corrupt manifest ({exc})") from exc
    params: dict[str, np.ndarray] = {}
    for e in entries:
        path = d / e["file"]
        try:
            arr = T.load_tensor(path)
        except T.TensorFormatError as exc:
            raise CheckpointError(str(exc)) from exc
        if list(arr.shape) != list(e["shape"]):
            raise CheckpointError(
                f"{path}: shape {list(arr.shape)} does not match manifest {e['shape']} for {e['name']}"
            )
        params[e["name"]] = arr
    return params, manifest.get("meta", {})


def imaging_config_dict(cfg: ImagingConfig) -> dict:
    return asdict(cfg)
