"""Declarative experiment configuration (JSON), with strict key checking."""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

from hffed.federation import StrategyConfig
from hffed.networks import ImagingConfig, ScanProtocol


class ConfigError(ValueError):
    pass


# photon counts span 1e4-1e6; views and tube current are deliberately not
# ordered with dose so the protocol vector carries more than one axis
DEFAULT_PROTOCOLS = (
    ScanProtocol(720, 1024, 1e6, 120, 60, 0.5, 1.0),
    ScanProtocol(360, 768, 1e4, 110, 300, 0.6, 1.5),
    ScanProtocol(240, 640, 1e5, 100, 120, 0.7, 2.0),
    ScanProtocol(120, 512, 3e4, 90, 240, 0.8, 2.5),
    ScanProtocol(60, 384, 3e5, 80, 180, 0.9, 3.0),
)


@dataclass
class ExperimentConfig:
    seed: int = 0
    image_size: int = 64
    hospitals: int = 5
    protocols: list[ScanProtocol] | None = None
    n_train: int = 40
    n_val: int = 10
    n_test: int = 10
    imaging: ImagingConfig = field(default_factory=ImagingConfig)
    strategy: StrategyConfig = field(default_factory=StrategyConfig)
    rounds: int = 50
    local_epochs: int = 3
    lr: float = 1e-4
    batch_size: int = 1
    val_every: int = 10
    parallel: bool = False
    out_dir: str | None = None

    def __post_init__(self):
        if self.protocols is None:
            if self.hospitals > len(DEFAULT_PROTOCOLS):
                raise ConfigError(
                    f"only {len(DEFAULT_PROTOCOLS)} default protocols; list protocols for {self.hospitals} hospitals"
                )
            self.protocols = list(DEFAULT_PROTOCOLS[: self.hospitals])
        if len(self.protocols) != self.hospitals:
            raise ConfigError(f"{len(self.protocols)} protocols given for {self.hospitals} hospitals")
        checks = {
            "hospitals": self.hospitals >= 1,
            "image_size": self.image_size >= 16,
            "n_train": self.n_train >= 1,
            "n_val": self.n_val >= 1,
            "n_test": self.n_test >= 1,
            "rounds": self.rounds >= 0,
            "local_epochs": self.local_epochs >= 0,
            "lr": self.lr > 0,
            "batch_size": self.batch_size >= 1,
            "val_every": self.val_every >= 1,
        }
        bad = [k for k, ok in checks.items() if not ok]
        if bad:
            raise ConfigError(f"invalid values for {bad}")

    # -- serialization -----------------------------------------------------

    def to_dict(self) -> dict:
        d = {f.name: getattr(self, f.name) for f in dataclasses.fields(self)}
        d["protocols"] = [p.as_dict() for p in self.protocols]
        d["imaging"] = dataclasses.asdict(self.imaging)
        d["strategy"] = dataclasses.asdict(self.strategy)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> ExperimentConfig:
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigError(f"unknown config keys: {unknown}")
        kw = dict(d)
        try:
            if kw.get("protocols") is not None:
                kw["protocols"] = [ScanProtocol.from_dict(p) for p in kw["protocols"]]
            if "imaging" in kw:
                kw["imaging"] = ImagingConfig(**_strict(kw["imaging"], ImagingConfig, "imaging"))
            if "strategy" in kw:
                kw["strategy"] = StrategyConfig(**_strict(kw["strategy"], StrategyConfig, "strategy"))
            return cls(**kw)
        except ConfigError:
            raise
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc

    @classmethod
    def load(cls, path) -> ExperimentConfig:
        try:
            raw = json.loads(Path(path).read_text())
        except (OSError, ValueError) as exc:
            raise ConfigError(f"{path}: {exc}") from exc
        if not isinstance(raw, dict):
            raise ConfigError(f"{path}: top level must be a JSON object")
        return cls.from_dict(raw)

    def dump(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")

    def config_hash(self) -> str:
        """Hash of everything that affects results (not scheduling or paths)."""
        d = self.to_dict()
        d.pop("parallel")
        d.pop("out_dir")
        blob = json.dumps(d, sort_keys=True, separators=(",", ":")).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


def _strict(d, cls, where: str) -> dict:
    if not isinstance(d, dict):
        raise ConfigError(f"{where} must be an object")
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(d) - known)
    if unknown:
        raise ConfigError(f"unknown {where} keys: {unknown}")
    return d
