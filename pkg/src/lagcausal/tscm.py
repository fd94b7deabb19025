"""Temporal structural causal models and ancestral simulation.

Each variable ``j`` gets one :class:`Mechanism` applied to its lagged
parents (ordered as :func:`~lagcausal.graph.parents_of` returns them) and
additive Gaussian noise:

    X^j_t = wrap( sum_k w_k * g(x_k) + b ) + eps^j_t

where ``g`` depends on the mechanism kind.  ``MultiplicativePair`` uses
``w_0 * x_0 * x_1`` for the first two parents and linear terms for the rest.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum
from typing import Mapping, Sequence

import numpy as np

from .graph import LaggedGraph, parents_of
from .rng import derive_seed, make_rng


class Kind(str, Enum):
    LINEAR = "Linear"
    POLYNOMIAL = "Polynomial"
    EXPONENTIAL = "Exponential"
    SINUSOID = "Sinusoid"
    MULTIPLICATIVE_PAIR = "MultiplicativePair"
    LOG_ABS = "LogAbs"
    TANH = "Tanh"
    SIGMOID = "Sigmoid"


class Wrap(str, Enum):
    NONE = "None"
    TANH = "Tanh"
    SIGMOID = "Sigmoid"


UNBOUNDED_KINDS = (Kind.EXPONENTIAL, Kind.POLYNOMIAL, Kind.MULTIPLICATIVE_PAIR)


class TscmError(ValueError):
    pass


class SimulationError(RuntimeError):
    """A simulated value became NaN even after clamping."""


def _sigmoid(x: float) -> float:
    if x >= 0:
        return 1.0 / (1.0 + math.exp(-x))
    z = math.exp(x)
    return z / (1.0 + z)


def _exp(x: float) -> float:
    return math.exp(min(x, 700.0))


def _horner(coefs: Sequence[float], x: float) -> float:
    acc = 0.0
    for c in coefs:
        acc = acc * x + c
    return acc


_TRANSFORMS = {
    Kind.LINEAR: lambda x: x,
    Kind.EXPONENTIAL: _exp,
    Kind.SINUSOID: math.sin,
    Kind.LOG_ABS: lambda x: math.log1p(abs(x)),
    Kind.TANH: math.tanh,
    Kind.SIGMOID: _sigmoid,
}


def n_terms(kind: Kind, n_parents: int) -> int:
    """Number of weights a mechanism of ``kind`` needs for ``n_parents``."""
    if kind is Kind.MULTIPLICATIVE_PAIR and n_parents >= 2:
        return n_parents - 1
    return n_parents


@dataclass(frozen=True)
class Mechanism:
    """Functional dependency of one variable on its lagged parents.

    ``poly`` holds polynomial coefficients highest degree first and is only
    used by ``Polynomial``.  ``wrap_scale`` is the amplitude ``c`` of the
    bounded wrap, so a ``Tanh``-wrapped contribution lies in ``[-c, c]``.
    """

    kind: Kind = Kind.LINEAR
    weights: tuple[float, ...] = ()
    intercept: float = 0.0
    poly: tuple[float, ...] = ()
    wrap: Wrap = Wrap.NONE
    wrap_scale: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "kind", Kind(self.kind))
        object.__setattr__(self, "wrap", Wrap(self.wrap))
        object.__setattr__(self, "weights", tuple(float(w) for w in self.weights))
        object.__setattr__(self, "poly", tuple(float(c) for c in self.poly))
        if self.kind is Kind.POLYNOMIAL and self.weights and len(self.poly) < 2:
            raise TscmError("polynomial mechanisms need degree >= 1")
        if self.wrap_scale <= 0:
            raise TscmError("wrap_scale must be positive")

    def contribution(self, xs: Sequence[float]) -> float:
        """Noise-free value for parent values ``xs``."""
        w = self.weights
        if not w:
            agg = self.intercept
        elif self.kind is Kind.MULTIPLICATIVE_PAIR and len(xs) >= 2:
            agg = w[0] * xs[0] * xs[1] + self.intercept
            for wk, xk in zip(w[1:], xs[2:]):
                agg += wk * xk
        elif self.kind is Kind.MULTIPLICATIVE_PAIR or self.kind is Kind.LINEAR:
            agg = self.intercept
            for wk, xk in zip(w, xs):
                agg += wk * xk
        elif self.kind is Kind.POLYNOMIAL:
            agg = self.intercept
            for wk, xk in zip(w, xs):
                agg += wk * _horner(self.poly, xk)
        else:
            g = _TRANSFORMS[self.kind]
            agg = self.intercept
            for wk, xk in zip(w, xs):
                agg += wk * g(xk)
        if self.wrap is Wrap.TANH:
            return self.wrap_scale * math.tanh(agg)
        if self.wrap is Wrap.SIGMOID:
            return self.wrap_scale * _sigmoid(agg)
        return agg

    def to_json(self) -> dict:
        return {
            "kind": self.kind.value,
            "weights": list(self.weights),
            "intercept": self.intercept,
            "poly": list(self.poly),
            "wrap": self.wrap.value,
            "wrap_scale": self.wrap_scale,
        }

    @classmethod
    def from_json(cls, d: dict) -> "Mechanism":
        return cls(Kind(d["kind"]), tuple(d["weights"]), float(d["intercept"]),
                   tuple(d.get("poly", ())), Wrap(d["wrap"]), float(d.get("wrap_scale", 1.0)))


@dataclass(frozen=True)
class NoiseSpec:
    kind: str = "Gaussian"
    mean: float = 0.0
    std: float = 1.0

    def __post_init__(self):
        if self.kind != "Gaussian":
            raise TscmError(f"unsupported noise kind {self.kind!r}")
        if not self.std > 0:
            raise TscmError(f"noise std must be > 0, got {self.std}")

    def to_json(self) -> dict:
        return {"kind": self.kind, "mean": self.mean, "std": self.std}


@dataclass(frozen=True)
class Tscm:
    graph: LaggedGraph
    mechanisms: tuple[Mechanism, ...]
    noises: tuple[NoiseSpec, ...]
    seed: int = 0

    def __post_init__(self):
        v = self.graph.num_vars
        if len(self.mechanisms) != v or len(self.noises) != v:
            raise TscmError(
                f"need {v} mechanisms and noises, got {len(self.mechanisms)} and {len(self.noises)}")
        for j, m in enumerate(self.mechanisms):
            k = len(parents_of(self.graph, j))
            if len(m.weights) != n_terms(m.kind, k):
                raise TscmError(f"variable {j}: {m.kind.value} with {k} parents "
                                f"needs {n_terms(m.kind, k)} weights, got {len(m.weights)}")

    def to_json(self) -> dict:
        return {
            "graph": self.graph.to_json(),
            "mechanisms": [m.to_json() for m in self.mechanisms],
            "noises": [n.to_json() for n in self.noises],
            "seed": self.seed,
        }

    @classmethod
    def from_json(cls, d: dict) -> "Tscm":
        return cls(LaggedGraph.from_json(d["graph"]),
                   tuple(Mechanism.from_json(m) for m in d["mechanisms"]),
                   tuple(NoiseSpec(n["kind"], float(n["mean"]), float(n["std"])) for n in d["noises"]),
                   int(d["seed"]))


@dataclass(frozen=True)
class MechanismPolicy:
    """How :func:`sample_tscm` draws mechanisms.

    Args:
        kinds: enabled mechanism kinds, drawn with equal probability.
        weight_range: magnitude range for weights; signs are uniform.
        intercept_range: uniform range for the intercept.
        poly_degrees: allowed polynomial degrees.
        poly_coef_range: uniform range for polynomial coefficients.
        wrap_kinds: kinds whose aggregate is passed through a bounded wrap.
        wraps: bounded functions to choose from (uniformly) when wrapping.
        noise_std: standard deviation of the additive Gaussian noise.
        edge_weights: ``(i, j, lag) -> weight`` overrides for fixed designs.
    """

    kinds: tuple[Kind, ...] = tuple(Kind)
    weight_range: tuple[float, float] = (0.5, 2.0)
    intercept_range: tuple[float, float] = (-0.5, 0.5)
    poly_degrees: tuple[int, ...] = (2, 3)
    poly_coef_range: tuple[float, float] = (-1.0, 1.0)
    wrap_kinds: tuple[Kind, ...] = UNBOUNDED_KINDS
    wraps: tuple[Wrap, ...] = (Wrap.TANH, Wrap.SIGMOID)
    noise_std: float = 1.0
    edge_weights: Mapping[tuple[int, int, int], float] | None = None

    def __post_init__(self):
        object.__setattr__(self, "kinds", tuple(Kind(k) for k in self.kinds))
        object.__setattr__(self, "wrap_kinds", tuple(Kind(k) for k in self.wrap_kinds))
        object.__setattr__(self, "wraps", tuple(Wrap(w) for w in self.wraps))

    def to_json(self) -> dict:
        d = {
            "kinds": [k.value for k in self.kinds],
            "weight_range": list(self.weight_range),
            "intercept_range": list(self.intercept_range),
            "poly_degrees": list(self.poly_degrees),
            "poly_coef_range": list(self.poly_coef_range),
            "wrap_kinds": [k.value for k in self.wrap_kinds],
            "wraps": [w.value for w in self.wraps],
            "noise_std": self.noise_std,
        }
        if self.edge_weights:
            d["edge_weights"] = [[*k, w] for k, w in sorted(self.edge_weights.items())]
        return d

    @classmethod
    def from_json(cls, d: dict) -> "MechanismPolicy":
        d = dict(d)
        ew = d.pop("edge_weights", None)
        kw = {k: tuple(v) if isinstance(v, list) else v for k, v in d.items()}
        if ew:
            kw["edge_weights"] = {(int(i), int(j), int(lag)): float(w) for i, j, lag, w in ew}
        return cls(**kw)


def sample_tscm(g: LaggedGraph, policy: MechanismPolicy, seed: int) -> Tscm:
    """Attach a randomly drawn mechanism and noise spec to every variable."""
    if not policy.kinds:
        raise TscmError("mechanism policy enables no kinds")
    rng = make_rng(derive_seed(seed, "tscm"))
    lo, hi = policy.weight_range
    mechs = []
    for j in range(g.num_vars):
        parents = parents_of(g, j)
        if not parents:
            mechs.append(Mechanism())
            continue
        kind = policy.kinds[rng.integers(len(policy.kinds))]
        k = n_terms(kind, len(parents))
        signs = rng.choice((-1.0, 1.0), size=k)
        weights = signs * rng.uniform(lo, hi, size=k)
        if policy.edge_weights:
            for idx, (i, lag) in enumerate(parents[:k]):
                if (i, j, lag) in policy.edge_weights:
                    weights[idx] = policy.edge_weights[(i, j, lag)]
        intercept = float(rng.uniform(*policy.intercept_range))
        poly = ()
        if kind is Kind.POLYNOMIAL:
            deg = int(policy.poly_degrees[rng.integers(len(policy.poly_degrees))])
            poly = tuple(rng.uniform(*policy.poly_coef_range, size=deg + 1))
        wrap = Wrap.NONE
        if kind in policy.wrap_kinds and policy.wraps:
            wrap = policy.wraps[rng.integers(len(policy.wraps))]
        scale = float(np.max(np.abs(weights))) if wrap is not Wrap.NONE else 1.0
        mechs.append(Mechanism(kind, tuple(weights), intercept, poly, wrap, scale))
    noises = tuple(NoiseSpec("Gaussian", 0.0, policy.noise_std) for _ in range(g.num_vars))
    return Tscm(g, tuple(mechs), noises, int(seed))


def linear_tscm(g: LaggedGraph, weights: Mapping[tuple[int, int, int], float],
                noise_std: float = 1.0, seed: int = 0) -> Tscm:
    """Linear model with the given edge weights and zero intercepts."""
    policy = MechanismPolicy(kinds=(Kind.LINEAR,), intercept_range=(0.0, 0.0),
                             wrap_kinds=(), noise_std=noise_std, edge_weights=dict(weights))
    return sample_tscm(g, policy, seed)


@dataclass(frozen=True)
class SimConfig:
    num_steps: int = 500
    warmup: int = 100
    clamp_abs: float = 1e6

    def validate(self, max_lag: int) -> None:
        if self.num_steps < 1:
            raise TscmError(f"num_steps must be >= 1, got {self.num_steps}")
        if self.warmup < max_lag:
            raise TscmError(f"warmup={self.warmup} must be >= max_lag={max_lag}")
        if not self.clamp_abs > 0:
            raise TscmError("clamp_abs must be positive")


def _linear_matrix(m: Tscm) -> np.ndarray | None:
    """``(V, V * max_lag)`` coefficient matrix if every mechanism is plain linear."""
    g = m.graph
    if any(mech.kind is not Kind.LINEAR or mech.wrap is not Wrap.NONE for mech in m.mechanisms):
        return None
    coef = np.zeros((g.num_vars, g.max_lag, g.num_vars))
    for j, mech in enumerate(m.mechanisms):
        for w, (i, lag) in zip(mech.weights, parents_of(g, j)):
            coef[j, lag - 1, i] = w
    return coef.reshape(g.num_vars, -1)


def _run(m: Tscm, sc: SimConfig, stream: str, stop_on_clamp: bool = False) -> tuple[np.ndarray, bool]:
    """Full ancestral pass; returns the kept rows and whether the clamp fired.

    With ``stop_on_clamp`` the pass ends at the first clamped step and the
    returned rows are only those simulated so far.
    """
    g = m.graph
    v, lmax = g.num_vars, g.max_lag
    sc.validate(lmax)
    total = lmax + sc.warmup + sc.num_steps
    rng = make_rng(derive_seed(m.seed, stream))
    z = rng.standard_normal((total, v))
    mean = np.array([n.mean for n in m.noises])
    std = np.array([n.std for n in m.noises])
    eps = z * std + mean
    buf = np.empty((total, v))
    buf[:lmax] = z[:lmax]
    c = sc.clamp_abs
    clamped = False

    lin = _linear_matrix(m)
    if lin is not None:
        intercept = np.array([mech.intercept for mech in m.mechanisms])
        with np.errstate(over="ignore", invalid="ignore"):
            for t in range(lmax, total):
                # rows t-1, t-2, ..., t-lmax flattened lag-major
                window = buf[t - lmax:t][::-1].ravel()
                x = lin @ window + intercept + eps[t]
                if np.isnan(x).any():
                    raise SimulationError(f"NaN at step {t}")
                if (np.abs(x) > c).any():
                    clamped = True
                    x = np.clip(x, -c, c)
                    if stop_on_clamp:
                        buf[t] = x
                        return buf[:t + 1], True
                buf[t] = x
    else:
        plan = [(mech, [(i, lag) for i, lag in parents_of(g, j)]) for j, mech in enumerate(m.mechanisms)]
        rows = buf.tolist()
        noise = eps.tolist()
        for t in range(lmax, total):
            row = rows[t]
            for j, (mech, parents) in enumerate(plan):
                try:
                    x = mech.contribution([rows[t - lag][i] for i, lag in parents]) + noise[t][j]
                except OverflowError:
                    x = math.inf
                if x != x:
                    raise SimulationError(f"NaN at step {t}, variable {j}")
                if x > c or x < -c:
                    clamped = True
                    x = c if x > 0 else -c
                row[j] = x
            if clamped and stop_on_clamp:
                return np.asarray(rows[:t + 1]), True
        buf = np.asarray(rows)
    return buf[lmax + sc.warmup:], clamped


def simulate(m: Tscm, sc: SimConfig) -> np.ndarray:
    """Simulate ``sc.num_steps`` rows after discarding ``max_lag + warmup`` steps.

    The first ``max_lag`` rows are seeded with N(0, 1) noise; the warm-up rows
    are driven by the mechanisms and then dropped.

    Raises:
        SimulationError: a value became NaN (e.g. ``inf - inf`` inside a
            mechanism), which means the instance is misconfigured.
    """
    out, _ = _run(m, sc, "simulate")
    return out


@dataclass(frozen=True)
class StabilityReport:
    max_abs: float
    nonfinite: bool
    overflow: bool
    mean_drift: float
    var_drift: float
    max_drift: float = 2.0

    @property
    def stable(self) -> bool:
        return (not self.nonfinite and not self.overflow
                and self.mean_drift <= self.max_drift and self.var_drift <= self.max_drift)

    def to_json(self) -> dict:
        return {"max_abs": self.max_abs, "nonfinite": self.nonfinite, "overflow": self.overflow,
                "mean_drift": self.mean_drift, "var_drift": self.var_drift, "stable": self.stable}


def _ratio(a: np.ndarray, b: np.ndarray) -> float:
    r = np.where((a > 0) & (b > 0), a / np.where(b > 0, b, 1.0), np.where(a == b, 1.0, np.inf))
    return float(np.max(np.maximum(r, 1.0 / r))) if r.size else 1.0


def stability_screen(m: Tscm, sc: SimConfig, max_drift: float = 2.0) -> StabilityReport:
    """Probe-simulate on an independent noise stream and summarise drift.

    Drift ratios compare the two halves of the probe per variable and report
    the worst of ``r`` and ``1/r``.  The mean ratio is taken on
    ``|mean| + pooled std`` so a zero-mean process scores about 1.
    """
    try:
        x, clamped = _run(m, sc, "probe", stop_on_clamp=True)
    except SimulationError:
        return StabilityReport(math.inf, True, True, math.inf, math.inf, max_drift)
    if clamped:
        return StabilityReport(float(np.max(np.abs(x))), False, True, math.inf, math.inf, max_drift)
    half = x.shape[0] // 2
    if half < 2:
        return StabilityReport(float(np.max(np.abs(x))), False, clamped, 1.0, 1.0, max_drift)
    a, b = x[:half], x[half:]
    va, vb = a.var(axis=0), b.var(axis=0)
    pooled = np.sqrt((va + vb) / 2)
    mean_drift = _ratio(np.abs(b.mean(axis=0)) + pooled, np.abs(a.mean(axis=0)) + pooled)
    var_drift = _ratio(vb, va)
    return StabilityReport(float(np.max(np.abs(x))), False, clamped, mean_drift, var_drift, max_drift)


# three-variable linear example: 0 -> 1 at lag 1, 1 -> 2 at lag 2, 0 -> 2 at lag 3
EXAMPLE_WEIGHTS = {(0, 1, 1): 3.0, (1, 2, 2): 1.0, (0, 2, 3): 5.0}


def example_tscm(seed: int = 0) -> Tscm:
    """Fixed 3-variable linear model with unit Gaussian noise and ``max_lag=3``."""
    g = LaggedGraph(3, 3, tuple(EXAMPLE_WEIGHTS))
    return linear_tscm(g, EXAMPLE_WEIGHTS, 1.0, seed)
