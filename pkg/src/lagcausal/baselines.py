"""Classical edge scorers and bootstrap edge probabilities.

Scorers take a ``(L, V)`` series (or a :class:`SeriesInstance`) and return a
:class:`ScoreTensor` in the lagged-adjacency layout
``values[j, i, max_lag - lag]``.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from enum import Enum
from functools import partial
from typing import Callable

import numpy as np

from . import container
from .rng import derive_seed, make_rng
from .stats import lagged_crosscorr, normalize_cc

log = logging.getLogger(__name__)

SCORE_SUFFIX = ".tcs"


class ScoreKind(str, Enum):
    PROBABILITY = "Probability"
    CONFIDENCE = "Confidence"
    COEFFICIENT = "Coefficient"


class BaselineError(RuntimeError):
    pass


@dataclass
class ScoreTensor:
    values: np.ndarray
    kind: ScoreKind = ScoreKind.CONFIDENCE

    def __post_init__(self):
        self.kind = ScoreKind(self.kind)
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 3 or self.values.shape[0] != self.values.shape[1]:
            raise ValueError(f"score tensor must have shape (V, V, L), got {self.values.shape}")
        if self.kind is ScoreKind.PROBABILITY and ((self.values < 0) | (self.values > 1)).any():
            raise ValueError("probability scores must lie in [0, 1]")

    def padded(self, v_max: int) -> "ScoreTensor":
        v = self.values.shape[0]
        if v == v_max:
            return self
        out = np.zeros((v_max, v_max, self.values.shape[2]))
        out[:v, :v] = self.values
        return ScoreTensor(out, self.kind)


def write_scores(scores: ScoreTensor, path, instance_id: str = "", meta: dict | None = None) -> None:
    m = {"id": instance_id, "kind": scores.kind.value, "shape": list(scores.values.shape)}
    if meta:
        m.update(meta)
    container.write_file(path, container.KIND_SCORES, m, scores.values)


def read_scores(path) -> tuple[ScoreTensor, dict]:
    meta, payload = container.read_file(path, container.KIND_SCORES)
    shape = tuple(int(s) for s in meta["shape"])
    if int(np.prod(shape)) != payload.size:
        raise container.ContainerError("payload", f"payload has {payload.size} values, shape says {shape}")
    return ScoreTensor(payload.reshape(shape).astype(np.float64), meta["kind"]), meta


def _series(inst) -> np.ndarray:
    return np.asarray(getattr(inst, "series", inst), dtype=np.float64)


def corr_scorer(inst, max_lag: int) -> ScoreTensor:
    """Normalized absolute lagged cross-correlation as edge confidence."""
    return ScoreTensor(normalize_cc(lagged_crosscorr(_series(inst), max_lag)).values, ScoreKind.CONFIDENCE)


def lagged_design(x: np.ndarray, max_lag: int) -> tuple[np.ndarray, np.ndarray]:
    """Intercept column plus lags ``1..max_lag`` of every variable.

    Column ``1 + (lag - 1) * V + i`` holds ``X^i_{t-lag}``.
    """
    length, v = x.shape
    n = length - max_lag
    z = np.empty((n, 1 + v * max_lag))
    z[:, 0] = 1.0
    for lag in range(1, max_lag + 1):
        z[:, 1 + (lag - 1) * v:1 + lag * v] = x[max_lag - lag:length - lag]
    return z, x[max_lag:]


def var_granger_scorer(inst, max_lag: int, ridge: float = 1e-3) -> ScoreTensor:
    """|t|-statistics of ridge VAR(max_lag) coefficients.

    Every target is regressed on all variables at lags ``1..max_lag`` plus an
    intercept.  The ridge penalty is ``ridge * trace(Z'Z) / p`` on the lag
    columns (the intercept is not penalized); ``ridge=0`` is plain OLS.

    Raises:
        ValueError: fewer than ``V * max_lag + 10`` rows.
        BaselineError: the (regularized) normal equations are singular.
    """
    x = _series(inst)
    length, v = x.shape
    if length <= v * max_lag + 10:
        raise ValueError(f"series too short for VAR({max_lag}) on {v} variables: {length} rows")
    z, y = lagged_design(x, max_lag)
    n, p = z.shape
    gram = z.T @ z
    pen = np.zeros(p)
    if ridge > 0:
        pen[1:] = ridge * np.trace(gram[1:, 1:]) / (p - 1)
    a = gram + np.diag(pen)
    try:
        inv = np.linalg.inv(a)
    except np.linalg.LinAlgError as exc:
        raise BaselineError(f"singular VAR design: {exc}") from exc
    if not np.isfinite(inv).all() or np.linalg.cond(a) > 1e14:
        raise BaselineError("VAR design is numerically singular")
    beta = inv @ z.T @ y  # (p, V)
    resid = y - z @ beta
    dof = max(n - p, 1)
    sigma2 = (resid * resid).sum(axis=0) / dof  # per target
    diag = np.diag(inv)
    se = np.sqrt(np.maximum(np.outer(diag, sigma2), 1e-300))
    t = np.abs(beta / se)
    out = np.zeros((v, v, max_lag))
    for lag in range(1, max_lag + 1):
        block = t[1 + (lag - 1) * v:1 + lag * v]  # [i, j]
        out[:, :, max_lag - lag] = block.T
    return ScoreTensor(out, ScoreKind.CONFIDENCE)


@dataclass(frozen=True)
class BootstrapConfig:
    """Resampling settings for :func:`bootstrap_probabilities`.

    ``mode="block"`` draws a moving-block bootstrap (blocks of ``block_len``
    consecutive rows); ``mode="row"`` resamples individual rows with
    replacement.  Binarization marks cells above ``threshold`` when it is
    set, otherwise the top ``top_q`` fraction of cells.
    """

    n: int = 10
    block_len: int = 25
    threshold: float | None = None
    top_q: float = 0.15
    mode: str = "block"
    seed: int = 0

    def validate(self, max_lag: int) -> None:
        if self.n < 1:
            raise ValueError("bootstrap n must be >= 1")
        if self.mode not in ("block", "row"):
            raise ValueError(f"unknown bootstrap mode {self.mode!r}")
        if self.mode == "block" and self.block_len < max_lag + 1:
            raise ValueError(f"block_len={self.block_len} must be >= max_lag + 1 = {max_lag + 1}")
        if not 0 < self.top_q <= 1:
            raise ValueError("top_q must lie in (0, 1]")


def block_resample(x: np.ndarray, block_len: int, rng: np.random.Generator) -> np.ndarray:
    length = x.shape[0]
    block_len = min(block_len, length)
    n_blocks = math.ceil(length / block_len)
    starts = rng.integers(0, length - block_len + 1, size=n_blocks)
    idx = (starts[:, None] + np.arange(block_len)[None, :]).ravel()[:length]
    return x[idx]


def binarize(values: np.ndarray, threshold: float | None = None, top_q: float = 0.15) -> np.ndarray:
    if threshold is not None:
        return (values > threshold).astype(np.float64)
    cut = np.quantile(values, 1.0 - top_q)
    # cells tied with the minimum are never edges, so constant scores give none
    return ((values >= cut) & (values > values.min())).astype(np.float64)


def bootstrap_probabilities(inst, scorer: Callable[[np.ndarray], ScoreTensor], cfg: BootstrapConfig,
                            max_lag: int) -> ScoreTensor:
    """Fraction of resamples in which each edge is detected.

    Failing resamples are skipped and the accumulated indicators are divided
    by the number of successful runs.

    Raises:
        BaselineError: the scorer failed on at least half of the resamples.
    """
    cfg.validate(max_lag)
    x = _series(inst)
    rng = make_rng(derive_seed(cfg.seed, "bootstrap"))
    acc = None
    errors = []
    for b in range(cfg.n):
        if cfg.mode == "block":
            xb = block_resample(x, cfg.block_len, rng)
        else:
            xb = x[rng.integers(0, x.shape[0], size=x.shape[0])]
        try:
            s = scorer(xb)
        except Exception as exc:  # noqa: BLE001 - diagnostics are collected and reported
            errors.append(f"resample {b}: {type(exc).__name__}: {exc}")
            continue
        ind = binarize(np.asarray(s.values), cfg.threshold, cfg.top_q)
        acc = ind if acc is None else acc + ind
    if 2 * len(errors) >= cfg.n:
        raise BaselineError(f"scorer failed on {len(errors)} of {cfg.n} resamples:\n" + "\n".join(errors))
    for e in errors:
        log.warning("bootstrap %s", e)
    return ScoreTensor(acc / (cfg.n - len(errors)), ScoreKind.PROBABILITY)


SCORERS: dict[str, Callable] = {
    "corr": corr_scorer,
    "var": var_granger_scorer,
}


def get_scorer(name: str, max_lag: int, **kw) -> Callable[[np.ndarray], ScoreTensor]:
    if name not in SCORERS:
        raise KeyError(f"unknown method {name!r}; choose from {sorted(SCORERS)}")
    fn = SCORERS[name]
    return partial(fn, max_lag=max_lag, **kw)
