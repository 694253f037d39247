"""VARPRO-LM baseline quantifier.

Amplitudes and the background scale enter the model linearly and are
eliminated by a nonnegative least-squares solve at every trial point;
dampings and shifts are refined by a box-projected Levenberg-Marquardt
iteration on the Golub-Pereyra projected Jacobian.
All linear algebra runs on the real stacking ``[Re; Im]`` of the complex
residual (``2N`` rows).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from .basis import BasisSet
from .sigmodel import SpectralParams, modulated_components

GRADIENT_SMALL = "gradient_small"
STEP_SMALL = "step_small"
MAX_ITER = "max_iter"


class RankDeficientError(np.linalg.LinAlgError):
    pass


class FitDivergedError(RuntimeError):
    pass


@dataclass(frozen=True)
class FitOptions:
    damp_max_hz: float = 10.0
    shift_max_hz: float = 10.0
    max_iter: int = 500
    lambda0: float = 1e-3
    lambda_factor: float = 10.0
    gtol: float = 1e-8
    xtol: float = 1e-10
    n_starts: int = 0
    seed: int = 0
    # exponential weights (Hz) of the coarse stages run before the exact fit
    continuation_hz: tuple[float, ...] = (40.0,)


@dataclass(frozen=True)
class FitResult:
    params: SpectralParams
    residual_norm: float
    iterations: int
    converged: bool
    termination: str
    history: tuple[float, ...] = ()


def _stack(z: np.ndarray) -> np.ndarray:
    return np.concatenate([z.real, z.imag], axis=-1)


def _lstsq_qr(a: np.ndarray, y: np.ndarray, rtol: float = 1e-10) -> np.ndarray:
    q, r = np.linalg.qr(a)
    d = np.abs(np.diag(r))
    if d.size and (d.min() <= rtol * max(d.max(), np.finfo(float).tiny)):
        raise RankDeficientError(
            f"design matrix is rank deficient (|R| diagonal min {d.min():.3e}, max {d.max():.3e})")
    return np.linalg.solve(r, q.T @ y)


def nnls_active_set(a: np.ndarray, y: np.ndarray, max_rounds: int | None = None) -> np.ndarray:
    """Nonnegative least squares ``min ||a x - y||`` s.t. ``x >= 0``.

    First solves unconstrained via QR, clamps negative coefficients to zero
    and re-solves on the remaining set until it is stable. Clamped
    coefficients whose gradient still points into the feasible region are
    then released one at a time (Lawson-Hanson outer loop, with its
    interpolation step) until the KKT conditions hold.
    """
    n = a.shape[1]
    max_rounds = max_rounds or 3 * n + 10
    passive = np.ones(n, dtype=bool)
    x = np.zeros(n)
    while passive.any():
        z = np.zeros(n)
        z[passive] = _lstsq_qr(a[:, passive], y)
        neg = passive & (z < 0)
        if not neg.any():
            x = z
            break
        passive &= ~neg
    tol = 10 * np.finfo(float).eps * max(np.abs(a).sum(axis=0).max(initial=0.0), 1.0) * n
    for _ in range(max_rounds):
        w = a.T @ (y - a @ x)
        cand = ~passive & (w > tol * max(np.linalg.norm(y), 1.0))
        if not cand.any():
            break
        passive[np.argmax(np.where(cand, w, -np.inf))] = True
        while True:
            z = np.zeros(n)
            z[passive] = _lstsq_qr(a[:, passive], y)
            bad = passive & (z <= 0)
            if not bad.any():
                x = z
                break
            alpha = np.min(x[bad] / (x[bad] - z[bad]))
            x = x + alpha * (z - x)
            passive &= x > 0
            x[~passive] = 0.0
            if not passive.any():
                break
    return x


def solve_amplitudes(basis: BasisSet, nonlinear: np.ndarray, signal: np.ndarray) -> np.ndarray:
    """Nonnegative amplitudes and background scale (length M+1) at fixed dampings/shifts."""
    comps = modulated_components(basis, nonlinear)
    signal = np.asarray(signal)
    if signal.shape != (basis.n_points,):
        raise ValueError(f"signal must have {basis.n_points} points, got {signal.shape}")
    return nnls_active_set(_stack(comps).T, _stack(signal))


def jacobian(basis: BasisSet, params: SpectralParams) -> np.ndarray:
    """Jacobian of the residual ``y - model`` w.r.t. ``params.nonlinear()``.

    Shape ``(2N, 2(M+1))``: damping columns first (metabolites, then
    background), then shift columns in the same order.
    """
    comps = modulated_components(basis, params.nonlinear())
    return _jacobian_from(comps, params.linear(), basis.time)


def _jacobian_from(comps: np.ndarray, lin: np.ndarray, t: np.ndarray) -> np.ndarray:
    weighted = (lin[:, None] * comps) * t
    dmodel = np.concatenate([weighted, 2j * np.pi * weighted])
    return -_stack(dmodel).T


def residual(basis: BasisSet, params: SpectralParams, signal: np.ndarray) -> np.ndarray:
    comps = modulated_components(basis, params.nonlinear())
    return _stack(np.asarray(signal) - params.linear() @ comps)


class _Problem:
    def __init__(self, basis: BasisSet, signal: np.ndarray, opts: FitOptions,
                 broaden_hz: float = 0.0):
        self.basis = basis
        signal = np.asarray(signal, dtype=np.complex128)
        self.weight = np.exp(-broaden_hz * basis.time) if broaden_hz else None
        if self.weight is not None:
            signal = signal * self.weight
        self.y = _stack(signal)
        if not np.all(np.isfinite(self.y)):
            raise ValueError("signal contains non-finite values")
        k = basis.n_metabolites + 1
        self.upper = np.concatenate([np.full(k, opts.damp_max_hz), np.full(k, opts.shift_max_hz)])
        self.lower = -self.upper

    def project(self, theta: np.ndarray) -> np.ndarray:
        return np.clip(theta, self.lower, self.upper)

    def evaluate(self, theta: np.ndarray):
        comps = modulated_components(self.basis, theta)
        if self.weight is not None:
            comps = comps * self.weight
        a = _stack(comps).T
        lin = nnls_active_set(a, self.y)
        r = self.y - a @ lin
        if not np.all(np.isfinite(r)):
            raise FitDivergedError(f"non-finite residual at nonlinear parameters {theta}")
        return comps, a, lin, r

    def projected_jacobian(self, comps, a, lin, r):
        """Golub-Pereyra Jacobian of the variable-projection residual.

        Only components with a positive coefficient take part in the
        projection; clamped components contribute nothing to first order.
        """
        t = self.basis.time  # any weight is already folded into comps
        j = _jacobian_from(comps, lin, t)
        active = np.flatnonzero(lin > 0)
        if active.size == 0:
            return j
        q, rr = np.linalg.qr(a[:, active])
        j = j - q @ (q.T @ j)
        # second term: -(A^+)^T (dA_k^T r) for the column each parameter moves
        k = len(lin)
        dcols = -_jacobian_from(comps, np.ones(k), t)
        proj = np.zeros((len(active), 2 * k))
        for pos, comp in enumerate(active):
            for col in (comp, comp + k):
                proj[pos, col] = dcols[:, col] @ r
        j -= q @ np.linalg.solve(rr.T, proj)
        return j


def _lm(prob: _Problem, theta0: np.ndarray, opts: FitOptions) -> FitResult:
    theta = prob.project(np.asarray(theta0, dtype=np.float64))
    comps, a, lin, r = prob.evaluate(theta)
    cost = float(r @ r)
    lam = opts.lambda0
    history = [math.sqrt(cost)]
    termination = MAX_ITER
    it = 0
    need_jac = True
    while it < opts.max_iter:
        if need_jac:
            j = prob.projected_jacobian(comps, a, lin, r)
            grad = j.T @ r
            jtj = j.T @ j
            # projected gradient: drop components pushing out of the box
            pg = grad.copy()
            pg[(theta >= prob.upper) & (grad < 0)] = 0.0
            pg[(theta <= prob.lower) & (grad > 0)] = 0.0
            if np.max(np.abs(pg)) < opts.gtol * (1.0 + math.sqrt(cost)):
                termination = GRADIENT_SMALL
                break
            diag = np.diag(jtj).copy()
            diag = np.maximum(diag, 1e-12 * max(diag.max(), 1e-300))
            need_jac = False
        it += 1
        # variables held at a bound by the gradient are frozen for this step
        free = pg != 0.0
        delta = np.zeros_like(theta)
        try:
            sub = np.ix_(free, free)
            delta[free] = np.linalg.solve(jtj[sub] + lam * np.diag(diag[free]), -grad[free])
        except np.linalg.LinAlgError:
            lam *= opts.lambda_factor
            continue
        trial = prob.project(theta + delta)
        step = np.linalg.norm(trial - theta)
        if step < opts.xtol:
            termination = STEP_SMALL
            break
        t_comps, t_a, t_lin, t_r = prob.evaluate(trial)
        t_cost = float(t_r @ t_r)
        if t_cost < cost:
            theta, comps, a, lin, r, cost = trial, t_comps, t_a, t_lin, t_r, t_cost
            history.append(math.sqrt(cost))
            lam = max(lam / opts.lambda_factor, 1e-15)
            need_jac = True
        else:
            lam *= opts.lambda_factor
            if lam > 1e16:
                termination = STEP_SMALL
                break
    params = SpectralParams.from_vectors(lin, theta)
    return FitResult(params, math.sqrt(cost), it, termination != MAX_ITER, termination,
                     tuple(history))


def fit(basis: BasisSet, signal: np.ndarray, init: SpectralParams | None = None,
        opts: FitOptions | None = None) -> FitResult:
    """Fit dampings/shifts (amplitudes eliminated) to ``signal``.

    ``init`` defaults to zero dampings and shifts; only its nonlinear part is
    used. With ``opts.n_starts > 0`` additional uniform random starts inside
    the box are tried and the lowest-residual result is returned.
    """
    opts = opts or FitOptions()
    if np.asarray(signal).shape != (basis.n_points,):
        raise ValueError(f"signal must have {basis.n_points} points")
    stages = [_Problem(basis, signal, opts, b) for b in opts.continuation_hz if b > 0]
    exact = _Problem(basis, signal, opts)
    k = basis.n_metabolites + 1
    theta0 = np.zeros(2 * k) if init is None else init.nonlinear()
    best = _staged(stages, exact, theta0, opts)
    if opts.n_starts > 0:
        rng = np.random.default_rng([opts.seed, 0x5eed])
        ynorm = float(np.linalg.norm(exact.y))
        for _ in range(opts.n_starts):
            # noiseless data: a start that hits float32 round-off level is final
            if best.residual_norm <= 1e-6 * ynorm:
                break
            res = _staged(stages, exact, rng.uniform(exact.lower, exact.upper), opts)
            if res.residual_norm < best.residual_norm:
                best = res
    return best


def _staged(stages: list[_Problem], exact: _Problem, theta0: np.ndarray,
            opts: FitOptions) -> FitResult:
    """Coarse-to-fine: broadened fits seed the exact fit; iterations are summed."""
    theta, its = theta0, 0
    for prob in stages:
        res = _lm(prob, theta, opts)
        theta, its = res.params.nonlinear(), its + res.iterations
    res = _lm(exact, theta, opts)
    return replace(res, iterations=res.iterations + its)


def fit_many(basis: BasisSet, signals: np.ndarray, opts: FitOptions | None = None,
             workers: int = 1) -> list[FitResult]:
    """Fit every row of ``signals``; results keep input order for any worker count."""
    signals = np.asarray(signals)
    if workers <= 1:
        return [fit(basis, s, None, opts) for s in signals]
    from concurrent.futures import ProcessPoolExecutor
    with ProcessPoolExecutor(workers) as pool:
        return list(pool.map(_fit_one, [(basis, s, opts) for s in signals], chunksize=16))


def _fit_one(args):
    basis, s, opts = args
    return fit(basis, s, None, opts)


def with_bounds(opts: FitOptions, damp_max_hz: float, shift_max_hz: float) -> FitOptions:
    return replace(opts, damp_max_hz=damp_max_hz, shift_max_hz=shift_max_hz)
