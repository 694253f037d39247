"""Aggregate SMAPE and the per-output method ranking (#wins, average rank)."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass

import numpy as np
from scipy.stats import rankdata


def smape(truth, est) -> float:
    """Aggregate SMAPE in percent: ``100 * sum|a - a_hat| / sum(a + a_hat)``.

    Sums run over the whole set before dividing. Both inputs must be
    nonnegative; ``0 / 0`` is defined as 0.
    """
    truth = np.asarray(truth, dtype=np.float64)
    est = np.asarray(est, dtype=np.float64)
    if truth.shape != est.shape:
        raise ValueError(f"shape mismatch {truth.shape} vs {est.shape}")
    if np.any(truth < 0) or np.any(est < 0):
        raise ValueError("smape needs nonnegative truth and estimates")
    num = np.abs(truth - est).sum()
    den = (truth + est).sum()
    if den == 0:
        if num == 0:
            return 0.0
        raise ZeroDivisionError("smape denominator is zero")
    return float(100.0 * num / den)


def smape_columns(truth: np.ndarray, est: np.ndarray) -> np.ndarray:
    """SMAPE of each column (one output per column) of ``(count, K)`` arrays."""
    truth = np.asarray(truth)
    est = np.asarray(est)
    return np.array([smape(truth[:, k], est[:, k]) for k in range(truth.shape[1])])


def rank_methods(per_output: dict[str, dict[str, float]]) -> tuple[dict[str, int], dict[str, float]]:
    """``per_output[method][output] = smape``  ->  (wins, average rank).

    Methods are ranked per output by ascending SMAPE with ties sharing the
    mean rank; a win is a strict minimum.
    """
    methods = list(per_output)
    if len(methods) < 2:
        raise ValueError("ranking needs at least two methods")
    outputs = list(per_output[methods[0]])
    for m in methods[1:]:
        if set(per_output[m]) != set(outputs):
            raise ValueError(f"method {m!r} reports a different set of outputs")
    wins = {m: 0 for m in methods}
    rank_sum = {m: 0.0 for m in methods}
    for out in outputs:
        vals = np.array([per_output[m][out] for m in methods])
        ranks = rankdata(vals, method="average")
        for m, r in zip(methods, ranks):
            rank_sum[m] += float(r)
        best = np.flatnonzero(vals == vals.min())
        if len(best) == 1:
            wins[methods[best[0]]] += 1
    avg_rank = {m: rank_sum[m] / len(outputs) for m in methods}
    return wins, avg_rank


@dataclass
class EvalReport:
    per_metabolite_smape: dict[str, dict[str, float]]
    wins: dict[str, int]
    avg_rank: dict[str, float]

    @classmethod
    def from_estimates(cls, names: list[str], truth: np.ndarray,
                       estimates: dict[str, np.ndarray]) -> "EvalReport":
        """Score each method's ``(count, K)`` estimates against ``truth`` column-wise."""
        per = {m: dict(zip(names, smape_columns(truth, est))) for m, est in estimates.items()}
        wins, avg = rank_methods(per)
        return cls(per, wins, avg)

    @property
    def methods(self) -> list[str]:
        return list(self.per_metabolite_smape)

    @property
    def outputs(self) -> list[str]:
        return list(self.per_metabolite_smape[self.methods[0]])

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["metabolite", *self.methods])
        for out in self.outputs:
            w.writerow([out, *(f"{self.per_metabolite_smape[m][out]:.4f}" for m in self.methods)])
        w.writerow(["wins", *(str(self.wins[m]) for m in self.methods)])
        w.writerow(["avg_rank", *(f"{self.avg_rank[m]:.4f}" for m in self.methods)])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "EvalReport":
        rows = list(csv.reader(io.StringIO(text)))
        methods = rows[0][1:]
        per = {m: {} for m in methods}
        wins, avg = {}, {}
        for row in rows[1:]:
            key, vals = row[0], row[1:]
            if key == "wins":
                wins = {m: int(v) for m, v in zip(methods, vals)}
            elif key == "avg_rank":
                avg = {m: float(v) for m, v in zip(methods, vals)}
            else:
                for m, v in zip(methods, vals):
                    per[m][key] = float(v)
        return cls(per, wins, avg)
