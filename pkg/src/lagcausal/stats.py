"""Lagged cross-correlations, AUC and paired significance tests."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.stats import rankdata

from .graph import LaggedGraph, lag_to_slice

EXACT_MAX_N = 20
MIN_PAIRS = 5


class DegenerateStatisticError(ValueError):
    """The statistic is undefined for the given input (all ties, one class...)."""


@dataclass
class CorrTensor:
    values: np.ndarray  # (V_max, V_max, max_lag)
    normalized: bool = False


def lagged_crosscorr(series: np.ndarray, max_lag: int, v_max: int | None = None) -> CorrTensor:
    """Pearson correlation of ``X^i_{1..T-tau}`` with ``X^j_{tau+1..T}``.

    ``values[j, i, max_lag - tau]`` holds the lag-``tau`` correlation from
    ``i`` to ``j``.  Slots for variables beyond the series width are 0, as
    are pairs where either segment is constant.
    """
    x = np.asarray(series, dtype=np.float64)
    length, v = x.shape
    v_max = v if v_max is None else v_max
    if v > v_max:
        raise ValueError(f"series has {v} variables, more than v_max={v_max}")
    if length <= max_lag + 2:
        raise ValueError(f"series too short: need more than {max_lag + 2} rows, got {length}")
    out = np.zeros((v_max, v_max, max_lag))
    for tau in range(1, max_lag + 1):
        src = x[:length - tau]
        dst = x[tau:]
        a = src - src.mean(axis=0)
        b = dst - dst.mean(axis=0)
        na = np.sqrt((a * a).sum(axis=0))
        nb = np.sqrt((b * b).sum(axis=0))
        cov = b.T @ a  # [j, i]
        denom = np.outer(nb, na)
        scale = np.maximum(np.abs(x).max(axis=0), 1.0) * np.sqrt(length) * 1e-12
        ok = np.outer(nb > scale, na > scale)
        r = np.where(ok, cov / np.where(ok, denom, 1.0), 0.0)
        out[:v, :v, lag_to_slice(tau, max_lag)] = np.clip(r, -1.0, 1.0)
    return CorrTensor(out, normalized=False)


def normalize_cc(cc: CorrTensor, strategy: str = "absmax") -> CorrTensor:
    """Map raw correlations into ``[0, 1]`` for use as a target / feature.

    Strategies: ``"absmax"`` (absolute value divided by the largest entry),
    ``"abs"`` (absolute value only) and ``"rank"`` (average ranks of the
    absolute values scaled to ``[0, 1]``).
    """
    a = np.abs(cc.values)
    if strategy == "abs":
        out = a
    elif strategy == "absmax":
        m = a.max() if a.size else 0.0
        out = a / m if m > 0 else a.copy()
    elif strategy == "rank":
        r = rankdata(a, method="average").reshape(a.shape)
        out = (r - 1) / (a.size - 1) if a.size > 1 else np.zeros_like(a)
    else:
        raise ValueError(f"unknown normalization strategy {strategy!r}")
    return CorrTensor(out, normalized=True)


def _truth_array(truth, shape) -> np.ndarray:
    if isinstance(truth, LaggedGraph):
        return truth.padded_adj(shape[0], shape[2])
    t = np.asarray(truth)
    if t.shape != shape:
        raise ValueError(f"truth shape {t.shape} does not match scores {shape}")
    return t


def cell_mask(var_mask: np.ndarray, max_lag: int) -> np.ndarray:
    """Expand a per-variable mask to ``(V, V, max_lag)`` cells."""
    m = np.asarray(var_mask, dtype=bool)
    return np.repeat((m[:, None] & m[None, :])[:, :, None], max_lag, axis=2)


def auc(scores, truth, mask=None) -> float:
    """ROC AUC of ``scores`` against binary ``truth`` over the masked cells.

    Equals P(score_pos > score_neg) + P(tie) / 2, computed from midranks.

    Args:
        scores: array (or object with ``.values``) of shape ``(V, V, L)``.
        truth: a :class:`LaggedGraph` (padded to the score shape) or a binary
            array of the same shape.
        mask: ``None`` (all cells), a per-variable boolean vector of length
            ``V``, or a cell mask of the score shape.

    Raises:
        DegenerateStatisticError: no positives or no negatives in the mask.
    """
    s = np.asarray(getattr(scores, "values", scores), dtype=np.float64)
    y = _truth_array(truth, s.shape).astype(bool)
    if mask is None:
        m = np.ones(s.shape, dtype=bool)
    else:
        m = np.asarray(mask, dtype=bool)
        if m.ndim == 1:
            m = cell_mask(m, s.shape[2])
    s, y = s[m], y[m]
    n_pos = int(y.sum())
    n_neg = y.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise DegenerateStatisticError(f"AUC undefined with {n_pos} positives and {n_neg} negatives")
    ranks = rankdata(s, method="average")
    u = ranks[y].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


@dataclass
class EvalReport:
    """Per-dataset AUCs for one method with their mean and sample std."""

    method: str
    per_dataset_auc: list[tuple[str, float]] = field(default_factory=list)

    @property
    def n(self) -> int:
        return len(self.per_dataset_auc)

    @property
    def mean(self) -> float:
        return float(np.mean([a for _, a in self.per_dataset_auc])) if self.n else float("nan")

    @property
    def sd(self) -> float:
        if self.n < 2:
            return 0.0
        return float(np.std([a for _, a in self.per_dataset_auc], ddof=1))

    def to_json(self) -> dict:
        return {
            "method": self.method,
            "per_dataset_auc": [[i, a] for i, a in self.per_dataset_auc],
            "mean": None if self.n == 0 else self.mean,
            "sd": self.sd,
            "n": self.n,
        }

    @classmethod
    def from_json(cls, d: dict) -> "EvalReport":
        return cls(str(d["method"]), [(str(i), float(a)) for i, a in d["per_dataset_auc"]])

    def save(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_json(), fh, indent=2)
            fh.write("\n")

    @classmethod
    def load(cls, path) -> "EvalReport":
        with open(path) as fh:
            return cls.from_json(json.load(fh))


def format_table(reports: Sequence[EvalReport]) -> str:
    """Fixed-width ``mean ± sd`` table, one row per method."""
    lines = [f"{'method':<20} {'AUC':>15} {'n':>6}"]
    for r in reports:
        cell = "--" if r.n == 0 else f"{r.mean:.3f} ± {r.sd:.3f}"
        lines.append(f"{r.method:<20} {cell:>15} {r.n:>6}")
    return "\n".join(lines)


@dataclass
class WilcoxonResult:
    statistic: float
    p_value: float
    n_effective: int
    method: str  # "exact" or "normal"
    significant_at: float | None = None

    @property
    def significant(self) -> bool | None:
        return None if self.significant_at is None else self.p_value < self.significant_at

    def to_json(self) -> dict:
        return {
            "statistic": self.statistic,
            "p_value": self.p_value,
            "n_effective": self.n_effective,
            "method": self.method,
            "significant_at": self.significant_at,
            "significant": self.significant,
        }


def signed_rank_counts(doubled_ranks: Sequence[int]) -> np.ndarray:
    """Null distribution of ``2 * T+`` as sign-pattern counts.

    ``counts[s]`` is the number of the ``2^n`` sign assignments whose
    positive doubled ranks sum to ``s``.  Doubling keeps midranks integral.
    """
    total = int(sum(doubled_ranks))
    counts = np.zeros(total + 1, dtype=np.int64)
    counts[0] = 1
    for r in doubled_ranks:
        r = int(r)
        if r:
            counts[r:] = counts[r:] + counts[:-r].copy()
        else:
            counts *= 2
    return counts


def wilcoxon_signed_rank(a: Sequence[float], b: Sequence[float], exact_max_n: int = EXACT_MAX_N,
                         correction: bool = True) -> WilcoxonResult:
    """Two-sided Wilcoxon signed-rank test on paired samples.

    Zero differences are dropped and tied ``|d|`` share average ranks.  Up to
    ``exact_max_n`` nonzero pairs the p-value comes from the exact sign
    enumeration of the observed ranks; above that a normal approximation
    with tie-corrected variance (and continuity correction) is used.

    The reported statistic is ``min(T+, T-)``.

    Raises:
        ValueError: ``a`` and ``b`` differ in length.
        DegenerateStatisticError: fewer than 5 nonzero differences.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise ValueError(f"paired samples must be 1-D and equal length, got {a.shape} and {b.shape}")
    d = a - b
    d = d[d != 0]
    n = d.size
    if n < MIN_PAIRS:
        raise DegenerateStatisticError(f"need at least {MIN_PAIRS} nonzero differences, got {n}")
    ranks = rankdata(np.abs(d), method="average")
    t_plus = float(ranks[d > 0].sum())
    t_minus = float(ranks[d < 0].sum())
    stat = min(t_plus, t_minus)
    if n <= exact_max_n:
        doubled = np.rint(2 * ranks).astype(np.int64)
        counts = signed_rank_counts(doubled)
        k = int(round(2 * t_plus))
        le = int(counts[:k + 1].sum())
        ge = int(counts[k:].sum())
        p = min(1.0, 2 * min(le, ge) / 2.0 ** n)
        return WilcoxonResult(stat, p, n, "exact")
    mean = n * (n + 1) / 4.0
    _, tie_counts = np.unique(ranks, return_counts=True)
    var = n * (n + 1) * (2 * n + 1) / 24.0 - float((tie_counts ** 3 - tie_counts).sum()) / 48.0
    diff = abs(t_plus - mean)
    if correction:
        diff = max(diff - 0.5, 0.0)
    z = diff / math.sqrt(var) if var > 0 else 0.0
    p = min(1.0, math.erfc(z / math.sqrt(2.0)))
    return WilcoxonResult(stat, p, n, "normal")


def bonferroni(p_values: Sequence[float], alpha: float = 0.05) -> list[bool]:
    """``p_i < alpha / k`` for each of the ``k`` p-values."""
    k = len(p_values)
    if k < 1:
        raise ValueError("need at least one p-value")
    return [float(p) < alpha / k for p in p_values]
