"""Parametric FID model, first-point noise rule, FFT and network packing.

Complex series are plain 1-D ``complex128`` numpy arrays.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .basis import BasisSet


@dataclass(frozen=True)
class SpectralParams:
    """Per-metabolite amplitude, damping and shift plus the background triple.

    Dampings and shifts are in Hz (1/s for damping) and enter the model as
    ``exp(damping * t + 2 pi i shift * t)``; a negative damping adds decay.
    """

    amplitudes: np.ndarray
    dampings_hz: np.ndarray
    shifts_hz: np.ndarray
    bg_scale: float = 0.0
    bg_damping_hz: float = 0.0
    bg_shift_hz: float = 0.0

    def __post_init__(self):
        for name in ("amplitudes", "dampings_hz", "shifts_hz"):
            arr = np.array(getattr(self, name), dtype=np.float64).reshape(-1)
            arr.flags.writeable = False
            object.__setattr__(self, name, arr)
        for name in ("bg_scale", "bg_damping_hz", "bg_shift_hz"):
            object.__setattr__(self, name, float(getattr(self, name)))
        m = len(self.amplitudes)
        if len(self.dampings_hz) != m or len(self.shifts_hz) != m:
            raise ValueError("amplitudes, dampings_hz and shifts_hz must have equal length")

    @property
    def n_metabolites(self) -> int:
        return len(self.amplitudes)

    @classmethod
    def zeros(cls, m: int) -> "SpectralParams":
        return cls(np.zeros(m), np.zeros(m), np.zeros(m))

    def linear(self) -> np.ndarray:
        """Amplitudes followed by the background scale (length M+1)."""
        return np.append(self.amplitudes, self.bg_scale)

    def nonlinear(self) -> np.ndarray:
        """``[dampings..., bg_damping, shifts..., bg_shift]`` (length 2(M+1))."""
        return np.concatenate([self.dampings_hz, [self.bg_damping_hz],
                               self.shifts_hz, [self.bg_shift_hz]])

    @classmethod
    def from_vectors(cls, linear: np.ndarray, nonlinear: np.ndarray) -> "SpectralParams":
        linear = np.asarray(linear, dtype=np.float64)
        nonlinear = np.asarray(nonlinear, dtype=np.float64)
        k = len(linear)
        if len(nonlinear) != 2 * k:
            raise ValueError("nonlinear vector must have twice the linear length")
        return cls(linear[:-1], nonlinear[:k - 1], nonlinear[k:2 * k - 1],
                   linear[-1], nonlinear[k - 1], nonlinear[2 * k - 1])

    def __eq__(self, other):
        if not isinstance(other, SpectralParams):
            return NotImplemented
        return (np.array_equal(self.linear(), other.linear())
                and np.array_equal(self.nonlinear(), other.nonlinear()))

    __hash__ = None


def modulated_components(basis: BasisSet, nonlinear: np.ndarray) -> np.ndarray:
    """Basis rows (metabolites then background) with their damping/shift applied.

    Returns an ``(M + 1, N)`` complex array; with a zero ``nonlinear`` vector
    the cached basis signals come back unchanged.
    """
    k = basis.n_metabolites + 1
    nonlinear = np.asarray(nonlinear, dtype=np.float64)
    if nonlinear.shape != (2 * k,):
        raise ValueError(f"expected {2 * k} nonlinear parameters, got {nonlinear.shape}")
    rates = nonlinear[:k] + 2j * np.pi * nonlinear[k:]
    return basis.signals * np.exp(np.outer(rates, basis.time))


def _check_dims(basis: BasisSet, params: SpectralParams):
    if params.n_metabolites != basis.n_metabolites:
        raise ValueError(f"params describe {params.n_metabolites} metabolites, "
                         f"basis has {basis.n_metabolites}")


def evaluate_model(basis: BasisSet, params: SpectralParams) -> np.ndarray:
    """Noiseless signal: amplitude-weighted, damped and shifted basis plus background."""
    _check_dims(basis, params)
    comps = modulated_components(basis, params.nonlinear())
    return params.linear() @ comps


def add_complex_noise(signal: np.ndarray, snr: float, rng: np.random.Generator) -> np.ndarray:
    """Add circular Gaussian noise with per-component std ``|signal[0]| / snr``.

    ``snr = inf`` returns an unchanged copy and consumes no random numbers.
    """
    signal = np.asarray(signal)
    if math.isinf(snr) and snr > 0:
        return signal.copy()
    if not snr > 0:
        raise ValueError(f"snr must be > 0 or inf, got {snr}")
    first = abs(signal[0])
    if first == 0:
        raise ValueError("noise level undefined: first point of the noiseless signal is zero")
    sigma = first / snr
    draws = rng.standard_normal((2, signal.shape[0]))
    return signal + sigma * (draws[0] + 1j * draws[1])


def _check_pow2(n: int):
    if n < 1 or n & (n - 1):
        raise ValueError(f"FFT length must be a power of two, got {n}")


def _bitrev(n: int) -> np.ndarray:
    bits = n.bit_length() - 1
    idx = np.arange(n)
    rev = np.zeros(n, dtype=np.int64)
    for b in range(bits):
        rev |= ((idx >> b) & 1) << (bits - 1 - b)
    return rev


def fft(signal: np.ndarray) -> np.ndarray:
    """Unnormalized forward DFT, ``X[k] = sum_j x[j] exp(-2 pi i jk/N)``.

    Iterative radix-2 decimation in time; accepts stacked signals along
    the last axis.
    """
    x = np.asarray(signal, dtype=np.complex128)
    n = x.shape[-1]
    _check_pow2(n)
    lead = x.shape[:-1]
    out = x[..., _bitrev(n)].reshape(-1, n)
    size = 2
    while size <= n:
        half = size // 2
        tw = np.exp(-2j * np.pi * np.arange(half) / size)
        blocks = out.reshape(out.shape[0], n // size, size)
        even = blocks[..., :half]
        odd = blocks[..., half:] * tw
        out = np.concatenate([even + odd, even - odd], axis=-1).reshape(-1, n)
        size *= 2
    return out.reshape(*lead, n)


def ifft(spectrum: np.ndarray) -> np.ndarray:
    """Inverse of :func:`fft` including the ``1/N`` factor."""
    spectrum = np.asarray(spectrum, dtype=np.complex128)
    return np.conj(fft(np.conj(spectrum))) / spectrum.shape[-1]


def frequency_axis(n_points: int, dwell_time_s: float) -> np.ndarray:
    """Frequencies (Hz) of the FFT bins in natural (unshifted) order."""
    k = np.arange(n_points)
    k = np.where(k < n_points // 2, k, k - n_points)
    return k / (n_points * dwell_time_s)


def flatten_for_network(signal: np.ndarray) -> np.ndarray:
    """Pack complex series into a ``(2, N)`` real array (real, imaginary); no scaling.

    Stacked input ``(B, N)`` gives ``(B, 2, N)``.
    """
    signal = np.asarray(signal)
    return np.stack([signal.real, signal.imag], axis=-2)


def unflatten(packed: np.ndarray) -> np.ndarray:
    packed = np.asarray(packed)
    ctype = np.complex64 if packed.dtype == np.float32 else np.complex128
    out = np.empty(packed.shape[:-2] + packed.shape[-1:], dtype=ctype)
    out.real = packed[..., 0, :]
    out.imag = packed[..., 1, :]
    return out
