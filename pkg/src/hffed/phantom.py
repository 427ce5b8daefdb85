"""Synthetic ellipse phantoms, protocol-driven low-dose degradation, and
per-hospital datasets with an on-disk layout that real data can also use.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import ndimage

from hffed import tensor as T
from hffed.networks import PROTOCOL_FIELDS, PROTOCOL_UNITS, ProtocolRanges, ScanProtocol, normalize_protocol
from hffed.seeding import substream

log = logging.getLogger(__name__)

FORMAT_VERSION = "1"
SPLITS = ("train", "val", "test")
# Poisson counts above this use the Gaussian approximation
GAUSSIAN_POISSON_THRESHOLD = 50.0


def gen_phantom(rng: np.random.Generator, size: int | tuple[int, int] = 64) -> np.ndarray:
    """Random ellipses summed over a 0.1-intensity disk, clamped to [0, 1]."""
    h, w = (size, size) if isinstance(size, int) else size
    if h < 16 or w < 16:
        raise ValueError(f"phantom must be at least 16x16, got {h}x{w}")
    yy, xx = np.meshgrid(np.linspace(-1, 1, h), np.linspace(-1, 1, w), indexing="ij")
    img = np.where(xx * xx + yy * yy <= 0.9**2, 0.1, 0.0)
    for _ in range(int(rng.integers(3, 9))):
        cx, cy = rng.uniform(-0.55, 0.55, size=2)
        a, b = rng.uniform(0.08, 0.4, size=2)
        theta = rng.uniform(0.0, math.pi)
        intensity = rng.uniform(0.1, 0.9)
        c, s = math.cos(theta), math.sin(theta)
        u = (xx - cx) * c + (yy - cy) * s
        v = -(xx - cx) * s + (yy - cy) * c
        img = img + np.where((u / a) ** 2 + (v / b) ** 2 <= 1.0, intensity, 0.0)
    return np.clip(img, 0.0, 1.0)[None]


@dataclass(frozen=True)
class DegradationParams:
    blur_sigma: float
    photon_count: float
    electronic_noise_sigma: float

    @classmethod
    def from_protocol(cls, protocol: ScanProtocol, ranges: ProtocolRanges) -> DegradationParams:
        z = dict(zip(PROTOCOL_FIELDS, normalize_protocol(protocol, ranges).data))
        return cls(
            blur_sigma=2.0 * (1.0 - z["views"]),
            photon_count=protocol.photon_count,
            electronic_noise_sigma=0.05 * (1.0 - z["tube_current"]),
        )


def gaussian_blur(img: np.ndarray, sigma: float) -> np.ndarray:
    """Zero-padded Gaussian blur truncated at two sigma."""
    if sigma <= 0:
        return img.copy()
    return ndimage.gaussian_filter(img, sigma=(0, sigma, sigma), truncate=2.0, mode="constant")


def poisson_noise(img: np.ndarray, photon_count: float, rng: np.random.Generator) -> np.ndarray:
    """Poisson(N0 * img) / N0, Gaussian-approximated where the mean count exceeds 50."""
    lam = photon_count * np.clip(img, 0.0, None)
    z = rng.standard_normal(lam.shape)
    counts = lam + np.sqrt(lam) * z
    low = lam <= GAUSSIAN_POISSON_THRESHOLD
    if low.any():
        counts[low] = rng.poisson(lam[low])
    return counts / photon_count


def degrade(clean: np.ndarray, protocol: ScanProtocol, ranges: ProtocolRanges,
            rng: np.random.Generator) -> np.ndarray:
    p = DegradationParams.from_protocol(protocol, ranges)
    return degrade_with(clean, p, rng)


def degrade_with(clean: np.ndarray, p: DegradationParams, rng: np.random.Generator) -> np.ndarray:
    blurred = gaussian_blur(np.asarray(clean, dtype=np.float64), p.blur_sigma)
    noisy = poisson_noise(blurred, p.photon_count, rng)
    if p.electronic_noise_sigma > 0:
        noisy = noisy + p.electronic_noise_sigma * rng.standard_normal(noisy.shape)
    return noisy


# ---------------------------------------------------------------------------
# datasets


@dataclass
class ImageSample:
    clean: np.ndarray
    degraded: np.ndarray
    protocol: ScanProtocol


@dataclass
class HospitalDataset:
    hospital_id: int
    protocol: ScanProtocol
    samples: list[ImageSample]
    splits: dict[str, list[int]] = field(default_factory=dict)

    def split(self, name: str) -> list[ImageSample]:
        return [self.samples[i] for i in self.splits[name]]

    @property
    def image_shape(self) -> tuple[int, ...]:
        return self.samples[0].clean.shape

    def validate(self) -> None:
        seen: set[int] = set()
        for name, idx in self.splits.items():
            for i in idx:
                if not 0 <= i < len(self.samples):
                    raise ValueError(f"hospital {self.hospital_id}: {name} index {i} out of range")
                if i in seen:
                    raise ValueError(f"hospital {self.hospital_id}: sample {i} is in two splits")
                seen.add(i)


def make_federation(
    protocols: Sequence[ScanProtocol],
    n_train: int = 40,
    n_val: int = 10,
    n_test: int = 10,
    size: int = 64,
    seed: int = 0,
    margin: float = 0.05,
) -> tuple[list[HospitalDataset], ProtocolRanges]:
    """One dataset per protocol, each drawn from its own seeded stream."""
    if not protocols:
        raise ValueError("need at least one hospital")
    for i in range(len(protocols)):
        for j in range(i):
            if protocols[i] == protocols[j]:
                log.warning("hospitals %d and %d share an identical protocol", j, i)
    ranges = ProtocolRanges.from_protocols(protocols, margin)
    n = n_train + n_val + n_test
    datasets = []
    for k, protocol in enumerate(protocols):
        rng = substream(seed, "data", f"hospital-{k}")
        params = DegradationParams.from_protocol(protocol, ranges)
        samples = []
        for _ in range(n):
            clean = gen_phantom(rng, size)
            samples.append(ImageSample(clean, degrade_with(clean, params, rng), protocol))
        splits = {
            "train": list(range(0, n_train)),
            "val": list(range(n_train, n_train + n_val)),
            "test": list(range(n_train + n_val, n)),
        }
        datasets.append(HospitalDataset(k, protocol, samples, splits))
    return datasets, ranges


class DatasetFormatError(ValueError):
    pass


def save_dataset(ds: HospitalDataset, directory) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    for i, s in enumerate(ds.samples):
        T.save_tensor(d / f"clean_{i}.hft", s.clean)
        T.save_tensor(d / f"degraded_{i}.hft", s.degraded)
    meta = {
        "format_version": FORMAT_VERSION,
        "hospital_id": ds.hospital_id,
        "protocol": {
            name: {"value": value, "unit": PROTOCOL_UNITS[name]}
            for name, value in ds.protocol.as_dict().items()
        },
        "image_shape": list(ds.image_shape),
        "sample_count": len(ds.samples),
        "splits": {name: list(ds.splits.get(name, [])) for name in SPLITS},
    }
    (d / "meta.json").write_text(json.dumps(meta, indent=2) + "\n")


def load_dataset(directory) -> HospitalDataset:
    d = Path(directory)
    mpath = d / "meta.json"
    try:
        meta = json.loads(mpath.read_text())
        version = meta["format_version"]
        count = int(meta["sample_count"])
        shape = tuple(int(x) for x in meta["image_shape"])
        protocol = ScanProtocol.from_dict({k: v["value"] for k, v in meta["protocol"].items()})
        splits = {name: [int(i) for i in meta["splits"][name]] for name in SPLITS}
        hospital_id = meta["hospital_id"]
    except (OSError, ValueError, KeyError, TypeError) as exc:
        raise DatasetFormatError(f"{mpath}: missing or corrupt manifest ({exc})") from exc
    if str(version) != FORMAT_VERSION:
        raise DatasetFormatError(f"{mpath}: unsupported format version {version!r}")
    samples = []
    for i in range(count):
        pair = []
        for kind in ("clean", "degraded"):
            path = d / f"{kind}_{i}.hft"
            try:
                arr = T.load_tensor(path)
            except T.TensorFormatError as exc:
                raise DatasetFormatError(str(exc)) from exc
            if arr.shape != shape:
                raise DatasetFormatError(
                    f"{path}: sample {i} has shape {list(arr.shape)}, manifest says {list(shape)}"
                )
            pair.append(arr)
        samples.append(ImageSample(pair[0], pair[1], protocol))
    ds = HospitalDataset(hospital_id, protocol, samples, splits)
    try:
        ds.validate()
    except ValueError as exc:
        raise DatasetFormatError(f"{mpath}: {exc}") from exc
    return ds
