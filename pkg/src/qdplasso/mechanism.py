"""Private Frank-Wolfe Lasso with a gated exponential-weight index sampler.

Each iteration draws a vertex index with probability proportional to
``exp(-|alpha_s + 2 L1| / lambda)``. The draw is simulated the way it would
be measured: propose a uniform index, keep it with the acceptance
probability, and give up after ``M`` proposals.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from qdplasso._rng import stream
from qdplasso.dataset import Dataset, NormMode
from qdplasso.errors import GateAbort, MechanismFailure
from qdplasso.fw import (
    DEFAULT_REF_ITERS,
    AlphaVector,
    FitReport,
    build_report,
    curvature_bound,
    frank_wolfe,
    lipschitz_bound,
)
from qdplasso.oracles import AlphaOracle, OracleConfig, QueryLedger

DEFAULT_CURVATURE = 1.0


def choose_T(epsilon: float, delta: float, n: int, cf: float) -> int:
    """Iteration count ``max(1, round(cf^(2/3) (N eps)^(2/3) / ln(1/delta)^(1/3)))``."""
    if not epsilon > 0:
        raise ValueError(f"epsilon must be > 0, got {epsilon}")
    if not 0 < delta < 1:
        raise ValueError(f"delta must lie in (0, 1), got {delta}")
    if n < 1 or not cf > 0:
        raise ValueError("n must be >= 1 and cf > 0")
    value = cf ** (2 / 3) * (n * epsilon) ** (2 / 3) / math.log(1 / delta) ** (1 / 3)
    return max(1, round(value))


def calibrate_lambda(epsilon: float, delta: float, T: int, n: int) -> float:
    """Sampling temperature ``sqrt(2T ln(1/delta)) * 8 / (eps N)``."""
    if not epsilon > 0 or T < 1 or n < 1:
        raise ValueError("epsilon, T and n must be positive")
    if not 0 < delta < 1:
        raise ValueError(f"delta must lie in (0, 1), got {delta}")
    return math.sqrt(2 * T * math.log(1 / delta)) * 8 / (epsilon * n)


def examination_gate(l1: float, lam: float, varsigma: float) -> bool:
    """True when sampling may proceed; False (abort) iff ``L1/lambda >= ln(1/varsigma)``."""
    if not 0 < varsigma < 1:
        raise ValueError(f"the gate needs varsigma in (0, 1), got {varsigma}")
    if not lam > 0:
        raise ValueError(f"lambda must be > 0, got {lam}")
    if l1 < 0:
        raise ValueError(f"L1 must be >= 0, got {l1}")
    return l1 / lam < -math.log(varsigma)


def require_gate(l1: float, lam: float, varsigma: float) -> None:
    """Raise :class:`GateAbort` when :func:`examination_gate` aborts."""
    if not examination_gate(l1, lam, varsigma):
        raise GateAbort(l1, lam, varsigma)


def acceptance_probability(alpha_tilde, l1: float, lam: float):
    """``exp(-|alpha + 2 L1| / lambda)``; works elementwise on arrays."""
    if not lam > 0:
        raise ValueError(f"lambda must be > 0, got {lam}")
    out = np.exp(-np.abs(np.asarray(alpha_tilde, dtype=float) + 2.0 * l1) / lam)
    return float(out) if out.ndim == 0 else out


def default_m_cap(varsigma: float, b: float) -> int:
    """Proposal cap ``ceil(ln(1/b) / (4 varsigma^4))``."""
    if not varsigma > 0 or not 0 < b < 1:
        raise ValueError("need varsigma > 0 and b in (0, 1)")
    return max(1, math.ceil(math.log(1 / b) / (4 * varsigma**4)))


@dataclass(frozen=True)
class PrivacyParams:
    """Calibrated privacy parameters of one private fit."""

    epsilon: float
    delta: float
    t_total: int
    lam: float
    l1_const: float
    eps_step: float
    m_cap: int

    def __post_init__(self):
        if self.m_cap < 1:
            raise ValueError(f"m_cap must be >= 1, got {self.m_cap}")

    @classmethod
    def calibrate(
        cls,
        epsilon: float,
        delta: float,
        T: int,
        n: int,
        l1: float,
        varsigma: float,
        b: float,
        m_cap: Optional[int] = None,
    ) -> "PrivacyParams":
        lam = calibrate_lambda(epsilon, delta, T, n)
        m = default_m_cap(varsigma, b) if m_cap is None else int(m_cap)
        return cls(epsilon, delta, T, lam, l1, 8.0 / (lam * n), m)


@dataclass(frozen=True)
class TraceRow:
    t: int
    proposals_used: int
    accepted_index: int
    acceptance_prob: float
    acceptance_probs_checksum: float


@dataclass
class MechanismTrace:
    """Per-iteration record of the index sampler."""

    rows: list[TraceRow] = field(default_factory=list)

    @property
    def proposals_total(self) -> int:
        return sum(r.proposals_used for r in self.rows)

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["t", "proposals_used", "accepted_index", "acceptance_prob"])
            for r in self.rows:
                w.writerow([r.t, r.proposals_used, r.accepted_index, repr(float(r.acceptance_prob))])


def _values(alpha) -> np.ndarray:
    if isinstance(alpha, AlphaOracle):
        return alpha.values().full()
    if isinstance(alpha, AlphaVector):
        return alpha.full()
    return np.asarray(alpha, dtype=float)


def index_distribution(alpha, l1: float, lam: float) -> np.ndarray:
    """Exact law of the sampled index, computed in log space."""
    logits = -np.abs(_values(alpha) + 2.0 * l1) / lam
    logits -= logits.max()
    w = np.exp(logits)
    return w / w.sum()


def sample_index_exact(alpha, l1: float, lam: float, rng: np.random.Generator) -> int:
    """Inverse-CDF draw from :func:`index_distribution` (reference sampler)."""
    cdf = np.cumsum(index_distribution(alpha, l1, lam))
    return int(min(np.searchsorted(cdf, rng.random() * cdf[-1], side="right"), cdf.size - 1))


def sample_index(
    alpha,
    d: int,
    pp: PrivacyParams,
    cfg: Optional[OracleConfig],
    rng: np.random.Generator,
    ledger: Optional[QueryLedger] = None,
    t: int = 0,
    prep_cost: float = 1.0,
) -> tuple[int, TraceRow]:
    """Rejection-sample one vertex index.

    Proposals are uniform over ``range(2d)`` and accepted with
    :func:`acceptance_probability`; each proposal is one oracle preparation.

    Args:
        alpha: Estimated gradient values (oracle, :class:`AlphaVector` or a
            length-2d array).
        d: Half the number of vertices.
        pp: Calibrated parameters (``lam``, ``l1_const``, ``m_cap``).
        cfg: Oracle error model, used only for the cost when ``alpha`` is
            not an :class:`AlphaOracle`. May be None.
        rng: Randomness of the proposals.
        ledger: Charged one preparation per proposal.
        t: Iteration index recorded in the trace.
        prep_cost: Cost of one preparation when ``alpha`` is not an oracle.

    Raises:
        MechanismFailure: When ``pp.m_cap`` proposals are all rejected.
    """
    if isinstance(alpha, AlphaOracle):
        prep_cost = alpha.unit_cost
    values = _values(alpha)
    m = 2 * d
    if values.size != m:
        raise ValueError(f"expected {m} values, got {values.size}")
    probs = acceptance_probability(values, pp.l1_const, pp.lam)
    probs = np.atleast_1d(probs)

    used = 0
    accepted = -1
    batch = 16
    while used < pp.m_cap:
        size = min(batch, pp.m_cap - used)
        s = rng.integers(m, size=size)
        u = rng.random(size)
        hit = np.flatnonzero(u < probs[s])
        if hit.size:
            used += int(hit[0]) + 1
            accepted = int(s[hit[0]])
            break
        used += size
        batch = min(batch * 2, 1 << 16)

    if ledger is not None:
        ledger.record_preparations(used, prep_cost)
    if accepted < 0:
        raise MechanismFailure(pp.m_cap, t)
    row = TraceRow(t, used, accepted, float(probs[accepted]), float(probs.sum()))
    return accepted, row


def resolve_curvature(ds: Dataset, curvature) -> float:
    """Turn ``"upper"``, ``"exact"`` or a number into a curvature value."""
    if isinstance(curvature, str):
        return curvature_bound(ds, curvature)
    value = float(curvature)
    if not value > 0:
        raise ValueError(f"curvature must be > 0, got {value}")
    return value


def fit_qdp(
    ds: Dataset,
    epsilon: float,
    delta: float,
    cfg: OracleConfig,
    seed: int = 0,
    curvature=DEFAULT_CURVATURE,
    t_total: Optional[int] = None,
    m_cap: Optional[int] = None,
    allow_unnormalized: bool = False,
    ref_iters: Optional[int] = DEFAULT_REF_ITERS,
    keep_iterates: bool = False,
) -> tuple[FitReport, MechanismTrace, PrivacyParams]:
    """Differentially private Frank-Wolfe Lasso.

    Calibrates ``T`` and ``lambda``, runs the examination gate, then replaces
    the exact argmin of every iteration by :func:`sample_index` over the
    estimated gradient.

    Args:
        ds: Frobenius-normalized dataset.
        epsilon: Total privacy budget.
        delta: Privacy slack.
        cfg: Oracle error model; ``cfg.varsigma`` must lie in (0, 1).
        seed: Seed of the start vertex and of the sampler.
        curvature: Curvature constant used to pick ``T``: a number,
            ``"upper"`` or ``"exact"``.
        t_total: Iteration count overriding the calibrated ``T``.
        m_cap: Proposal cap overriding the default.
        allow_unnormalized: Skip the normalization check.
        ref_iters: Length of the reference run for ``excess_risk``.
        keep_iterates: Keep every iterate in the report.

    Raises:
        GateAbort: Before any sampling, when the gate rejects the setting.
        MechanismFailure: When the sampler exhausts its proposal cap.
    """
    if ds.norm_mode is not NormMode.FROBENIUS and not allow_unnormalized:
        raise ValueError(
            f"private fitting needs Frobenius-normalized data for the sensitivity bound, "
            f"got {ds.norm_mode.value}"
        )
    l1 = lipschitz_bound(ds)
    cf = resolve_curvature(ds, curvature)
    T = choose_T(epsilon, delta, ds.n, cf) if t_total is None else int(t_total)
    pp = PrivacyParams.calibrate(epsilon, delta, T, ds.n, l1, cfg.varsigma, cfg.b, m_cap)
    require_gate(pp.l1_const, pp.lam, cfg.varsigma)

    ledger = QueryLedger()
    trace = MechanismTrace()

    def select(state, t):
        oracle = AlphaOracle(state.alpha_base(), t, ds.n, cfg)
        k, row = sample_index(oracle, ds.d, pp, cfg, stream(seed, "mechanism", t), ledger, t)
        trace.rows.append(row)
        return k

    state, chosen, losses, iterates = frank_wolfe(ds, T, seed, select, keep_iterates)
    report = build_report(ds, state, chosen, losses, iterates, ref_iters, ledger)
    return report, trace, pp
