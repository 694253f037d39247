"""Metabolite basis patterns built from sums of Lorentzian lines.

A basis file is a UTF-8 JSON document::

    {"dwell_time_s": 5e-4, "n_points": 2048,
     "metabolites": [{"name": "NAA", "lines": [{"f_hz": ..., "amp": ...,
                                                "damp_hz": ..., "phase_rad": ...}]}],
     "background": {"name": "MM", "lines": [...]}}

Frequencies are offsets from the carrier in Hz; ``damp_hz`` is the decay
rate of the line in 1/s.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Sequence

import numpy as np

FIXTURE_NAME = "fixture_basis.json"


class BasisError(ValueError):
    """Raised for malformed or physically invalid basis definitions."""


@dataclass(frozen=True)
class SpectralLine:
    frequency_hz: float
    amplitude: float
    damping_hz: float
    phase_rad: float = 0.0

    def __post_init__(self):
        values = (self.frequency_hz, self.amplitude, self.damping_hz, self.phase_rad)
        if not all(math.isfinite(v) for v in values):
            raise BasisError(f"non-finite line parameter in {self}")
        if self.amplitude < 0:
            raise BasisError(f"negative line amplitude in {self}")
        if self.damping_hz < 0:
            raise BasisError(f"negative line damping in {self}")
        if not -math.pi <= self.phase_rad <= math.pi:
            raise BasisError(f"phase outside [-pi, pi] in {self}")


@dataclass(frozen=True)
class MetaboliteSpec:
    name: str
    lines: tuple[SpectralLine, ...]

    def __post_init__(self):
        if not self.name:
            raise BasisError("metabolite name must be non-empty")
        if len(self.lines) == 0:
            raise BasisError(f"metabolite {self.name!r} has no lines")
        object.__setattr__(self, "lines", tuple(self.lines))


def synthesize(spec: MetaboliteSpec | Sequence[SpectralLine], n_points: int,
               dwell_time_s: float) -> np.ndarray:
    """Render the time-domain FID of a set of Lorentzian lines.

    ``s[j] = sum_k c_k exp(i phi_k) exp((2 pi i f_k - alpha_k) j dt)``.
    Lines are accumulated in order, so the result is deterministic.
    """
    lines = spec.lines if isinstance(spec, MetaboliteSpec) else tuple(spec)
    if len(lines) == 0:
        raise BasisError("cannot synthesize an empty line list")
    if n_points < 1:
        raise BasisError(f"n_points must be >= 1, got {n_points}")
    if not dwell_time_s > 0:
        raise BasisError(f"dwell_time_s must be > 0, got {dwell_time_s}")
    t = np.arange(n_points) * dwell_time_s
    out = np.zeros(n_points, dtype=np.complex128)
    for ln in lines:
        for v in (ln.frequency_hz, ln.amplitude, ln.damping_hz, ln.phase_rad):
            if not math.isfinite(v):
                raise BasisError(f"non-finite line parameter in {ln}")
        rate = complex(-ln.damping_hz, 2.0 * math.pi * ln.frequency_hz)
        out += ln.amplitude * np.exp(1j * ln.phase_rad) * np.exp(rate * t)
    return out


@dataclass(frozen=True)
class BasisSet:
    """Named metabolite patterns plus a background pattern on a fixed grid.

    ``signals`` has shape ``(M + 1, n_points)``: rows ``0..M-1`` are the
    metabolites in order, the last row is the background.
    """

    metabolites: tuple[MetaboliteSpec, ...]
    background: MetaboliteSpec
    n_points: int
    dwell_time_s: float
    signals: np.ndarray = field(repr=False, compare=False)
    fingerprint: str = ""

    @property
    def n_metabolites(self) -> int:
        return len(self.metabolites)

    @property
    def names(self) -> list[str]:
        return [m.name for m in self.metabolites]

    @property
    def time(self) -> np.ndarray:
        return np.arange(self.n_points) * self.dwell_time_s

    @property
    def bandwidth_hz(self) -> float:
        return 1.0 / self.dwell_time_s

    def metabolite_signals(self) -> np.ndarray:
        return self.signals[:-1]

    def background_signal(self) -> np.ndarray:
        return self.signals[-1]

    def __eq__(self, other):
        if not isinstance(other, BasisSet):
            return NotImplemented
        return (self.metabolites == other.metabolites
                and self.background == other.background
                and self.n_points == other.n_points
                and self.dwell_time_s == other.dwell_time_s
                and np.array_equal(self.signals, other.signals))

    __hash__ = None


def make_basis(metabolites: Sequence[MetaboliteSpec], background: MetaboliteSpec,
               n_points: int, dwell_time_s: float, fingerprint: str = "") -> BasisSet:
    """Validate a basis definition and synthesize its cached signals."""
    if len(metabolites) < 1:
        raise BasisError("basis needs at least one metabolite")
    if n_points < 1 or n_points & (n_points - 1):
        raise BasisError(f"n_points must be a power of two, got {n_points}")
    if not dwell_time_s > 0:
        raise BasisError(f"dwell_time_s must be > 0, got {dwell_time_s}")
    nyquist = 0.5 / dwell_time_s
    seen = set()
    for spec in list(metabolites) + [background]:
        if spec is not background:
            if spec.name in seen:
                raise BasisError(f"duplicate metabolite name {spec.name!r}")
            seen.add(spec.name)
        for k, ln in enumerate(spec.lines):
            if abs(ln.frequency_hz) >= nyquist:
                raise BasisError(
                    f"line {k} of {spec.name!r} at {ln.frequency_hz} Hz aliases "
                    f"(|f| must be < {nyquist} Hz)")
    signals = np.stack([synthesize(s, n_points, dwell_time_s)
                        for s in list(metabolites) + [background]])
    signals.flags.writeable = False
    return BasisSet(tuple(metabolites), background, int(n_points),
                    float(dwell_time_s), signals, fingerprint)


def _parse_metabolite(obj, where: str) -> MetaboliteSpec:
    if not isinstance(obj, dict):
        raise BasisError(f"{where}: expected an object, got {type(obj).__name__}")
    name = obj.get("name")
    lines = obj.get("lines")
    if not isinstance(name, str):
        raise BasisError(f"{where}: 'name' must be a string")
    if not isinstance(lines, list) or not lines:
        raise BasisError(f"{where} ({name!r}): 'lines' must be a non-empty list")
    parsed = []
    for k, ln in enumerate(lines):
        if not isinstance(ln, dict):
            raise BasisError(f"{where} ({name!r}) line {k}: expected an object")
        try:
            vals = [ln["f_hz"], ln["amp"], ln["damp_hz"], ln.get("phase_rad", 0.0)]
        except KeyError as exc:
            raise BasisError(f"{where} ({name!r}) line {k}: missing key {exc}") from None
        if not all(isinstance(v, (int, float)) and not isinstance(v, bool) for v in vals):
            raise BasisError(f"{where} ({name!r}) line {k}: line values must be numbers")
        try:
            parsed.append(SpectralLine(*(float(v) for v in vals)))
        except BasisError as exc:
            raise BasisError(f"{where} ({name!r}) line {k}: {exc}") from None
    return MetaboliteSpec(name, tuple(parsed))


def basis_from_bytes(raw: bytes) -> BasisSet:
    """Parse a basis JSON document; the fingerprint is the SHA-256 of ``raw``."""
    try:
        doc = json.loads(raw.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise BasisError(f"basis file is not valid UTF-8 JSON: {exc}") from None
    if not isinstance(doc, dict):
        raise BasisError("basis document must be a JSON object")
    for key in ("dwell_time_s", "n_points", "metabolites", "background"):
        if key not in doc:
            raise BasisError(f"basis document is missing {key!r}")
    n_points, dwell = doc["n_points"], doc["dwell_time_s"]
    if not isinstance(n_points, int) or isinstance(n_points, bool):
        raise BasisError("'n_points' must be an integer")
    if not isinstance(dwell, (int, float)) or isinstance(dwell, bool):
        raise BasisError("'dwell_time_s' must be a number")
    if not isinstance(doc["metabolites"], list):
        raise BasisError("'metabolites' must be a list")
    mets = [_parse_metabolite(m, f"metabolites[{i}]")
            for i, m in enumerate(doc["metabolites"])]
    bg = _parse_metabolite(doc["background"], "background")
    return make_basis(mets, bg, n_points, float(dwell),
                      hashlib.sha256(raw).hexdigest())


def build_basis(spec_file: str | Path) -> BasisSet:
    """Load and validate a basis JSON file."""
    return basis_from_bytes(Path(spec_file).read_bytes())


def basis_to_dict(basis: BasisSet) -> dict:
    def met(m: MetaboliteSpec) -> dict:
        return {"name": m.name,
                "lines": [{"f_hz": ln.frequency_hz, "amp": ln.amplitude,
                           "damp_hz": ln.damping_hz, "phase_rad": ln.phase_rad}
                          for ln in m.lines]}
    return {"dwell_time_s": basis.dwell_time_s, "n_points": basis.n_points,
            "metabolites": [met(m) for m in basis.metabolites],
            "background": met(basis.background)}


def fixture_bytes() -> bytes:
    return resources.files("mrsquant.data").joinpath(FIXTURE_NAME).read_bytes()


def default_basis() -> BasisSet:
    """The committed six-metabolite fixture basis (2048 points, 0.5 ms dwell)."""
    return basis_from_bytes(fixture_bytes())
