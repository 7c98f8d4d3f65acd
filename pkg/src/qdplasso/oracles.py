"""Classical simulation of the noisy gradient oracle and quantum minimum finding.

The oracles are modeled at the level of their input/output contracts:

* the estimated gradient oracle returns each ``alpha_s`` within ``varsigma``
  and fails with probability ``2b`` per preparation;
* minimum finding returns the argmin with probability 1/2 per run and is
  boosted by repetition.

A :class:`QueryLedger` counts logical oracle calls and accumulates the
theoretical cost each call would have on quantum hardware.
"""

from __future__ import annotations

import csv
import enum
import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from qdplasso._rng import stream
from qdplasso.dataset import Dataset
from qdplasso.fw import (
    DEFAULT_REF_ITERS,
    AlphaVector,
    FitReport,
    build_report,
    frank_wolfe,
    gradient_slice,
)

ORACLE_KINDS = ("Ox", "Oy", "OAlpha", "MinFindRuns")


@dataclass(frozen=True)
class OracleConfig:
    """Error model of the estimated gradient oracle.

    Attributes:
        varsigma: Additive error bound on every returned value.
        b: Half the failure probability of a single preparation.
        seed: Seed of the frozen noise and of the failure draws.
    """

    varsigma: float
    b: float
    seed: int = 0

    def __post_init__(self):
        if not self.varsigma >= 0 or math.isinf(self.varsigma):
            raise ValueError(f"varsigma must be finite and >= 0, got {self.varsigma}")
        if not 0 < self.b < 0.5:
            raise ValueError(f"b must lie in (0, 1/2), got {self.b}")
        if self.seed < 0:
            raise ValueError(f"seed must be non-negative, got {self.seed}")


class QueryLedger:
    """Counts oracle calls and the theoretical cost they would incur.

    ``charged`` holds the accumulated cost per oracle kind; all cost is
    booked on ``OAlpha`` since the data oracles are only called from inside
    its preparation.
    """

    def __init__(self):
        self.counts = {k: 0 for k in ORACLE_KINDS}
        self.charged = {k: 0.0 for k in ORACLE_KINDS}

    @property
    def charged_budget(self) -> float:
        return math.fsum(self.charged.values())

    def record(self, kind: str, count: int = 1, cost: float = 0.0) -> None:
        if kind not in self.counts:
            raise KeyError(f"unknown oracle kind {kind!r}")
        if count < 0 or cost < 0:
            raise ValueError("ledger entries must be non-negative")
        self.counts[kind] += int(count)
        self.charged[kind] += cost

    def record_preparations(self, count: int, unit_cost: float) -> None:
        """Book ``count`` preparations of the gradient oracle."""
        self.record("OAlpha", count, count * unit_cost if count else 0.0)
        self.record("Ox", count)
        self.record("Oy", count)

    def merge(self, other: "QueryLedger") -> "QueryLedger":
        out = QueryLedger()
        for k in ORACLE_KINDS:
            out.counts[k] = self.counts[k] + other.counts[k]
            out.charged[k] = self.charged[k] + other.charged[k]
        return out

    def rows(self) -> list[tuple[str, int, float]]:
        return [(k, self.counts[k], self.charged[k]) for k in ORACLE_KINDS]

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["oracle_kind", "count", "charged_budget"])
            for kind, count, charged in self.rows():
                w.writerow([kind, count, repr(float(charged))])

    def __repr__(self) -> str:
        return f"QueryLedger(counts={self.counts}, charged_budget={self.charged_budget:.6g})"


def preparation_cost(t: int, n: int, varsigma: float) -> float:
    """Cost of one oracle preparation at iteration ``t``: ``ceil(t^2 sqrt(N) / varsigma)``."""
    if varsigma == 0:
        return math.inf
    return float(math.ceil(t * t * math.sqrt(n) / varsigma))


def frozen_noise(cfg: OracleConfig, t: int, d: int) -> np.ndarray:
    """Noise added to ``alpha_1..alpha_d`` during iteration ``t``.

    Uniform on ``[-varsigma, varsigma]`` and a pure function of
    ``(seed, t)``, so every query within an iteration sees the same estimate.
    """
    if cfg.varsigma == 0:
        return np.zeros(d)
    return stream(cfg.seed, "oracle_noise", t).uniform(-cfg.varsigma, cfg.varsigma, d)


class AlphaOracle:
    """Estimated gradient oracle for one iteration.

    Args:
        alpha: Exact gradient over the vertices (an :class:`AlphaVector` or
            its length-d base).
        t: Iteration index; selects the frozen noise and the cost.
        n: Number of samples, used by the cost model.
        cfg: Error model.
        ledger: Ledger charged by :meth:`prepare`.
        rng: Source of failure draws; defaults to a stream keyed on
            ``(seed, t)``.
    """

    def __init__(
        self,
        alpha,
        t: int,
        n: int,
        cfg: OracleConfig,
        ledger: Optional[QueryLedger] = None,
        rng: Optional[np.random.Generator] = None,
    ):
        base = alpha.base if isinstance(alpha, AlphaVector) else np.asarray(alpha, dtype=float)
        self.exact = AlphaVector(base)
        self.t, self.n, self.cfg = t, n, cfg
        self.d = base.size
        self.ledger = ledger
        self.rng = rng if rng is not None else stream(cfg.seed, "oracle_failure", t)
        self._values = AlphaVector(base + frozen_noise(cfg, t, self.d))

    @property
    def unit_cost(self) -> float:
        return preparation_cost(self.t, self.n, self.cfg.varsigma)

    @property
    def fail_prob(self) -> float:
        return 2.0 * self.cfg.b

    def values(self) -> AlphaVector:
        """The frozen estimate for this iteration (no cost is charged)."""
        return self._values

    def prepare(self, s: int) -> tuple[float, bool]:
        """One logical preparation of index ``s``; returns ``(value, ok)``.

        A failed preparation returns a value at distance exactly
        ``2 * varsigma`` from the true ``alpha_s``.
        """
        value = self._values[s]
        if self.ledger is not None:
            self.ledger.record_preparations(1, self.unit_cost)
        if self.rng.random() < self.fail_prob:
            sign = 1.0 if self.rng.random() < 0.5 else -1.0
            return self.exact[s] + sign * 2.0 * self.cfg.varsigma, False
        return value, True


def noisy_alpha(
    ds: Dataset,
    theta,
    t: int,
    s: int,
    cfg: OracleConfig,
    rng: Optional[np.random.Generator] = None,
    ledger: Optional[QueryLedger] = None,
) -> tuple[float, bool]:
    """Single query of the estimated gradient oracle at ``theta``.

    Pass a shared ``rng`` when issuing repeated queries, otherwise every call
    with the same ``(seed, t, s)`` replays the same failure draw.
    """
    if rng is None:
        rng = stream(cfg.seed, "oracle_failure", t, s)
    oracle = AlphaOracle(gradient_slice(ds, theta), t, ds.n, cfg, ledger, rng)
    return oracle.prepare(s)


# --- minimum finding -------------------------------------------------------


class MinFindMode(str, enum.Enum):
    STOCHASTIC = "stochastic"
    CLASSICAL_ANALOG = "classical"


@dataclass(frozen=True)
class MinFindConfig:
    """Repetitions ``c`` and the run model of minimum finding."""

    repetitions: int = 1
    mode: MinFindMode = MinFindMode.STOCHASTIC

    def __post_init__(self):
        if self.repetitions < 1:
            raise ValueError(f"repetitions must be >= 1, got {self.repetitions}")
        object.__setattr__(self, "mode", MinFindMode(self.mode))

    @classmethod
    def for_failure(cls, b: float, mode=MinFindMode.STOCHASTIC) -> "MinFindConfig":
        return cls(repetitions_for(b), mode)


def repetitions_for(b: float) -> int:
    """``c = ceil(log2(1 / 2b))``, at least 1."""
    if not 0 < b < 0.5:
        raise ValueError(f"b must lie in (0, 1/2), got {b}")
    return max(1, math.ceil(math.log2(1.0 / (2.0 * b)) - 1e-12))


def minfind_budget(d: int) -> float:
    """Query budget of one minimum-finding run over ``2d`` items."""
    m = 2 * d
    return 22.5 * math.sqrt(m) + 1.4 * math.log2(m) ** 2


def _as_values(alpha) -> np.ndarray:
    if isinstance(alpha, AlphaOracle):
        return alpha.values().full()
    if isinstance(alpha, AlphaVector):
        return alpha.full()
    return np.asarray(alpha, dtype=float)


def _stochastic_run(values: np.ndarray, best: int, rng: np.random.Generator, fail_prob: float) -> int:
    m = values.size
    if fail_prob > 0 and rng.random() < fail_prob:
        return int(rng.integers(m))
    if m == 1 or rng.random() < 0.5:
        return best
    other = int(rng.integers(m - 1))
    return other + (other >= best)


def _classical_analog_run(values: np.ndarray, rng: np.random.Generator, budget: float, fail_prob: float) -> int:
    m = values.size
    if fail_prob > 0 and rng.random() < fail_prob:
        return int(rng.integers(m))
    k = int(rng.integers(m))
    spent = 0.0
    while True:
        marked = np.flatnonzero(values <= values[k])
        spent += (math.pi / 4) * math.sqrt(m / marked.size)
        if spent > budget:
            return k
        k = int(marked[rng.integers(marked.size)])


def min_find(
    alpha,
    d: int,
    cfg: MinFindConfig,
    ledger: Optional[QueryLedger] = None,
    rng: Optional[np.random.Generator] = None,
    prep_cost: float = 1.0,
    fail_prob: float = 0.0,
) -> int:
    """Boosted minimum finding over the ``2d`` vertex values.

    Each of ``cfg.repetitions`` runs yields a candidate; the candidate with
    the smallest value wins (ties to the lower index).

    Args:
        alpha: Values to minimize: an :class:`AlphaOracle`, an
            :class:`AlphaVector` or an array of length ``2d``.
        d: Half the number of items.
        cfg: Repetitions and run model.
        ledger: Charged ``minfind_budget(d)`` preparations per run.
        rng: Randomness of the runs.
        prep_cost: Cost of one preparation.
        fail_prob: Probability that a run's oracle preparation fails, in
            which case the run returns a uniform index.
    """
    if d < 1:
        raise ValueError(f"d must be >= 1, got {d}")
    values = _as_values(alpha)
    if values.size != 2 * d:
        raise ValueError(f"expected {2 * d} values, got {values.size}")
    rng = rng if rng is not None else np.random.default_rng()
    budget = minfind_budget(d)
    best = int(np.argmin(values))
    winner = -1
    for _ in range(cfg.repetitions):
        if cfg.mode is MinFindMode.STOCHASTIC:
            k = _stochastic_run(values, best, rng, fail_prob)
        else:
            k = _classical_analog_run(values, rng, budget, fail_prob)
        if winner < 0 or values[k] < values[winner] or (values[k] == values[winner] and k < winner):
            winner = k
        if ledger is not None:
            ledger.record("MinFindRuns", 1)
            n_prep = math.ceil(budget)
            ledger.record("OAlpha", n_prep, budget * prep_cost)
            ledger.record("Ox", n_prep)
            ledger.record("Oy", n_prep)
    return winner


# --- quantum non-private Lasso ---------------------------------------------


def fit_quantum_sim(
    ds: Dataset,
    T: int,
    cfg: OracleConfig,
    mf: Optional[MinFindConfig] = None,
    seed: int = 0,
    ref_iters: Optional[int] = DEFAULT_REF_ITERS,
    keep_iterates: bool = False,
) -> FitReport:
    """Frank-Wolfe with the estimated oracle and boosted minimum finding.

    Args:
        ds: Dataset to fit.
        T: Number of iterates.
        cfg: Oracle error model.
        mf: Minimum-finding settings; by default ``c = ceil(log2(1/2b))``
            stochastic runs.
        seed: Seed of the start vertex and of the minimum-finding runs.
        ref_iters: Length of the reference run for ``excess_risk``.
        keep_iterates: Keep every iterate in the report.

    Returns:
        A :class:`FitReport` whose ``ledger`` holds the query counts.
    """
    mf = mf if mf is not None else MinFindConfig.for_failure(cfg.b)
    ledger = QueryLedger()

    def select(state, t):
        oracle = AlphaOracle(state.alpha_base(), t, ds.n, cfg)
        return min_find(
            oracle,
            ds.d,
            mf,
            ledger,
            rng=stream(seed, "minfind", t),
            prep_cost=oracle.unit_cost,
            fail_prob=oracle.fail_prob,
        )

    state, chosen, losses, iterates = frank_wolfe(ds, T, seed, select, keep_iterates)
    return build_report(ds, state, chosen, losses, iterates, ref_iters, ledger)


@dataclass(frozen=True)
class CostTable:
    """Reference runtime shapes (constants 1, no log factors)."""

    opt_c: float
    cdp: float
    opt_q: float
    qnp: float
    qdp: float

    def as_dict(self) -> dict[str, float]:
        return {"opt_c": self.opt_c, "cdp": self.cdp, "opt_q": self.opt_q, "qnp": self.qnp, "qdp": self.qdp}


def theoretical_costs(n: float, d: float, T: float, varsigma: float, epsilon: float, delta: float = 0.5) -> CostTable:
    """Runtime shapes of the classical, private and quantum Lasso solvers.

    ``delta`` does not enter any of the shapes; it is accepted so the call
    mirrors the full parameter set of an experiment.
    """
    if min(n, d, T, varsigma, epsilon, delta) <= 0:
        raise ValueError("all arguments must be positive")
    return CostTable(
        opt_c=n + d,
        cdp=n * d * d,
        opt_q=math.sqrt(n) + math.sqrt(d),
        qnp=T**3 * math.sqrt(n * d) / varsigma,
        qdp=n**2.5 * epsilon**2 / varsigma,
    )
