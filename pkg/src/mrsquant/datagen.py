"""Labeled synthetic dataset generation and the MRSD file format.

Every sample draws from its own random stream keyed by ``(seed, index)``,
so sample ``i`` is identical whether it is generated alone, in a subset,
or by a different worker.
"""

from __future__ import annotations

import json
import math
import struct
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .basis import BasisSet
from .sigmodel import SpectralParams, add_complex_noise, evaluate_model

MAGIC = b"MRSD"
VERSION = 1
_HEADER = struct.Struct("<4sIIIQddQ32s")


class DatasetFormatError(ValueError):
    """Base class for unreadable dataset files."""


class BadMagicError(DatasetFormatError):
    pass


class VersionMismatchError(DatasetFormatError):
    pass


class TruncatedFileError(DatasetFormatError):
    pass


class MissingFingerprintError(DatasetFormatError):
    pass


@dataclass(frozen=True)
class GenConfig:
    count: int
    snr: float = math.inf
    seed: int = 0
    amp_min: float = 0.0
    amp_max: float = 1.0
    damp_max_hz: float = 10.0
    shift_max_hz: float = 10.0
    bg_scale_range: tuple[float, float] = (0.0, 1.0)

    def __post_init__(self):
        object.__setattr__(self, "bg_scale_range", tuple(float(v) for v in self.bg_scale_range))
        if self.count < 1:
            raise ValueError(f"count must be >= 1, got {self.count}")
        if self.amp_min > self.amp_max:
            raise ValueError("amp_min must not exceed amp_max")
        if self.damp_max_hz < 0 or self.shift_max_hz < 0:
            raise ValueError("damp_max_hz and shift_max_hz must be >= 0")
        lo, hi = self.bg_scale_range
        if lo < 0 or lo > hi:
            raise ValueError(f"invalid bg_scale_range {self.bg_scale_range}")
        if not (self.snr > 0):
            raise ValueError(f"snr must be > 0 or inf, got {self.snr}")
        if not 0 <= self.seed < 2**64:
            raise ValueError("seed must fit in an unsigned 64-bit integer")

    def to_json(self) -> dict:
        d = asdict(self)
        d["snr"] = "inf" if math.isinf(self.snr) else self.snr
        d["bg_scale_range"] = list(self.bg_scale_range)
        return d

    @classmethod
    def from_json(cls, d: dict) -> "GenConfig":
        d = dict(d)
        d["snr"] = float(d.get("snr", "inf"))
        if "bg_scale_range" in d:
            d["bg_scale_range"] = tuple(d["bg_scale_range"])
        return cls(**d)


def sample_stream(seed: int, index: int) -> np.random.Generator:
    """Counter-based (Philox) stream for sample ``index`` of a dataset."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, index])))


def sample_params(cfg: GenConfig, rng: np.random.Generator, m: int) -> SpectralParams:
    """Draw ground-truth parameters uniformly within the configured ranges."""
    amps = rng.uniform(cfg.amp_min, cfg.amp_max, m)
    damps = rng.uniform(-cfg.damp_max_hz, cfg.damp_max_hz, m)
    shifts = rng.uniform(-cfg.shift_max_hz, cfg.shift_max_hz, m)
    bg_scale = rng.uniform(*cfg.bg_scale_range)
    bg_damp = rng.uniform(-cfg.damp_max_hz, cfg.damp_max_hz)
    bg_shift = rng.uniform(-cfg.shift_max_hz, cfg.shift_max_hz)
    return SpectralParams(amps, damps, shifts, bg_scale, bg_damp, bg_shift)


def _quantize_labels(p: SpectralParams) -> SpectralParams:
    # labels are stored as float32; keep truth and label bit-identical
    return SpectralParams(p.amplitudes.astype(np.float32), p.dampings_hz, p.shifts_hz,
                          float(np.float32(p.bg_scale)), p.bg_damping_hz, p.bg_shift_hz)


def _draw_truth(cfg: GenConfig, index: int, m: int) -> tuple[SpectralParams, np.random.Generator]:
    rng = sample_stream(cfg.seed, index)
    return _quantize_labels(sample_params(cfg, rng, m)), rng


@dataclass(frozen=True)
class Sample:
    signal: np.ndarray
    truth: SpectralParams
    label: np.ndarray


@dataclass
class Dataset:
    """A block of consecutive samples ``first_index .. first_index + len - 1``.

    ``signals`` is ``(count, N)`` complex64, ``labels`` ``(count, M + 1)``
    float32; ``nonlinear`` holds each sample's true
    ``[dampings, bg_damping, shifts, bg_shift]``.
    """

    signals: np.ndarray
    labels: np.ndarray
    nonlinear: np.ndarray
    config: GenConfig
    basis_fingerprint: str
    metabolite_names: list[str]
    dwell_time_s: float
    first_index: int = 0
    extra: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return self.signals.shape[0]

    @property
    def n_points(self) -> int:
        return self.signals.shape[1]

    @property
    def n_metabolites(self) -> int:
        return self.labels.shape[1] - 1

    def truth(self, i: int) -> SpectralParams:
        return SpectralParams.from_vectors(self.labels[i].astype(np.float64), self.nonlinear[i])

    def __getitem__(self, i: int) -> Sample:
        if not -len(self) <= i < len(self):
            raise IndexError(i)
        i %= len(self)
        return Sample(self.signals[i], self.truth(i), self.labels[i])

    @property
    def samples(self) -> list[Sample]:
        return [self[i] for i in range(len(self))]

    def subset(self, start: int, stop: int) -> "Dataset":
        start, stop, _ = slice(start, stop).indices(len(self))
        stop = max(stop, start)
        return Dataset(self.signals[start:stop], self.labels[start:stop],
                       self.nonlinear[start:stop], self.config, self.basis_fingerprint,
                       list(self.metabolite_names), self.dwell_time_s,
                       self.first_index + start, dict(self.extra))

    def __eq__(self, other):
        if not isinstance(other, Dataset):
            return NotImplemented
        return (np.array_equal(self.signals, other.signals)
                and np.array_equal(self.labels, other.labels)
                and np.array_equal(self.nonlinear, other.nonlinear)
                and self.config == other.config
                and self.basis_fingerprint == other.basis_fingerprint
                and self.metabolite_names == other.metabolite_names
                and self.dwell_time_s == other.dwell_time_s
                and self.first_index == other.first_index)

    __hash__ = None


def _render(basis: BasisSet, cfg: GenConfig, start: int, stop: int):
    m = basis.n_metabolites
    sig = np.empty((stop - start, basis.n_points), dtype=np.complex64)
    lab = np.empty((stop - start, m + 1), dtype=np.float32)
    nl = np.empty((stop - start, 2 * (m + 1)))
    for row, i in enumerate(range(start, stop)):
        truth, rng = _draw_truth(cfg, i, m)
        clean = evaluate_model(basis, truth)
        sig[row] = add_complex_noise(clean, cfg.snr, rng)
        lab[row] = truth.linear()
        nl[row] = truth.nonlinear()
    return sig, lab, nl


def generate(basis: BasisSet, cfg: GenConfig, workers: int = 1, first_index: int = 0) -> Dataset:
    """Render ``cfg.count`` labeled signals (samples ``first_index ..``)."""
    stop = first_index + cfg.count
    if workers <= 1 or cfg.count < 2 * workers:
        parts = [_render(basis, cfg, first_index, stop)]
    else:
        edges = np.linspace(first_index, stop, workers + 1).astype(int)
        with ProcessPoolExecutor(workers) as pool:
            futs = [pool.submit(_render, basis, cfg, int(a), int(b))
                    for a, b in zip(edges[:-1], edges[1:]) if b > a]
            parts = [f.result() for f in futs]
    sig, lab, nl = (np.concatenate(x) for x in zip(*parts))
    return Dataset(sig, lab, nl, cfg, basis.fingerprint, basis.names,
                   basis.dwell_time_s, first_index)


def clean_signals(basis: BasisSet, ds: Dataset) -> np.ndarray:
    """Noiseless signals re-rendered from the stored ground truth."""
    return np.stack([evaluate_model(basis, ds.truth(i)) for i in range(len(ds))])


def split(ds: Dataset, train_fraction: float) -> tuple[Dataset, Dataset]:
    """First ``floor(fraction * count)`` samples for training, the rest for validation."""
    if not 0 < train_fraction < 1:
        raise ValueError(f"train_fraction must be in (0, 1), got {train_fraction}")
    n_train = math.floor(train_fraction * len(ds))
    return ds.subset(0, n_train), ds.subset(n_train, len(ds))


def _record_dtype(n_points: int, m: int) -> np.dtype:
    return np.dtype([("signal", "<f4", (2 * n_points,)), ("label", "<f4", (m + 1,))])


def save(ds: Dataset, path: str | Path) -> None:
    if not ds.basis_fingerprint:
        raise MissingFingerprintError("dataset has no basis fingerprint")
    m, n = ds.n_metabolites, ds.n_points
    blob = json.dumps({"config": ds.config.to_json(),
                       "metabolites": ds.metabolite_names,
                       "first_index": ds.first_index,
                       "extra": ds.extra}, sort_keys=True).encode("utf-8")
    header = _HEADER.pack(MAGIC, VERSION, m, n, len(ds), ds.dwell_time_s,
                          ds.config.snr, ds.config.seed, bytes.fromhex(ds.basis_fingerprint))
    rec = np.empty(len(ds), dtype=_record_dtype(n, m))
    inter = rec["signal"].reshape(len(ds), n, 2)
    inter[..., 0] = ds.signals.real
    inter[..., 1] = ds.signals.imag
    rec["label"] = ds.labels
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        fh.write(rec.tobytes())


def load(path: str | Path) -> Dataset:
    """Read an MRSD file; ground-truth dampings and shifts are re-derived from the seed."""
    raw = Path(path).read_bytes()
    if len(raw) < 4 or raw[:4] != MAGIC:
        raise BadMagicError(f"{path}: not a dataset file")
    if len(raw) < _HEADER.size + 4:
        raise TruncatedFileError(f"{path}: truncated header")
    _, version, m, n, count, dwell, snr, seed, fp = _HEADER.unpack_from(raw)
    if version != VERSION:
        raise VersionMismatchError(f"{path}: dataset version {version}, expected {VERSION}")
    if fp == bytes(32):
        raise MissingFingerprintError(f"{path}: basis fingerprint absent")
    off = _HEADER.size
    (blob_len,) = struct.unpack_from("<I", raw, off)
    off += 4
    if len(raw) < off + blob_len:
        raise TruncatedFileError(f"{path}: truncated metadata block")
    meta = json.loads(raw[off:off + blob_len].decode("utf-8"))
    off += blob_len
    dt = _record_dtype(n, m)
    need = count * dt.itemsize
    if len(raw) - off < need:
        raise TruncatedFileError(
            f"{path}: header declares {count} samples but payload holds "
            f"{(len(raw) - off) // dt.itemsize}")
    rec = np.frombuffer(raw, dtype=dt, count=count, offset=off)
    inter = rec["signal"].reshape(count, n, 2)
    sig = np.empty((count, n), dtype=np.complex64)
    sig.real = inter[..., 0]
    sig.imag = inter[..., 1]
    labels = rec["label"].copy()
    cfg = GenConfig.from_json(meta["config"])
    if cfg.seed != seed or not (cfg.snr == snr):
        raise DatasetFormatError(f"{path}: header and metadata disagree on seed/snr")
    first = int(meta.get("first_index", 0))
    nl = np.empty((count, 2 * (m + 1)))
    for row in range(count):
        truth, _ = _draw_truth(cfg, first + row, m)
        if not np.array_equal(truth.linear().astype(np.float32), labels[row]):
            raise DatasetFormatError(f"{path}: label of sample {first + row} does not "
                                     "match its seeded ground truth")
        nl[row] = truth.nonlinear()
    return Dataset(sig, labels, nl, cfg, fp.hex(), list(meta["metabolites"]), dwell,
                   first, dict(meta.get("extra", {})))
