"""Privacy accounting, the Laplace report-noisy-min baseline and an exact DP auditor."""

from __future__ import annotations

import enum
import itertools
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy import integrate, optimize

from qdplasso._rng import stream
from qdplasso.dataset import Dataset, NormMode
from qdplasso.fw import DEFAULT_REF_ITERS, FitReport, build_report, frank_wolfe

# --- composition -----------------------------------------------------------


class CompositionMode(str, enum.Enum):
    FULL = "full"
    PAPER_APPROX = "paper"
    BASIC = "basic"


@dataclass(frozen=True)
class CompositionQuery:
    """``k`` adaptive steps, each ``eps_step``-DP, accounted at slack ``delta``."""

    eps_step: float
    k: int
    delta: float
    mode: CompositionMode = CompositionMode.FULL

    def __post_init__(self):
        if self.k < 0 or not self.eps_step >= 0:
            raise ValueError("k and eps_step must be non-negative")
        if not 0 < self.delta < 1:
            raise ValueError(f"delta must lie in (0, 1), got {self.delta}")
        object.__setattr__(self, "mode", CompositionMode(self.mode))


def compose(q: CompositionQuery) -> float:
    """Total epsilon of a k-fold adaptive composition.

    ``full`` is the strong composition bound
    ``sqrt(2k ln(1/delta)) e + k e (exp(e) - 1)``; ``paper`` keeps only its
    first term; ``basic`` is ``k e``.
    """
    e, k = q.eps_step, q.k
    if k == 0:
        return 0.0
    if q.mode is CompositionMode.BASIC:
        return k * e
    strong = math.sqrt(2 * k * math.log(1 / q.delta)) * e
    if q.mode is CompositionMode.PAPER_APPROX:
        return strong
    return strong + k * e * math.expm1(e)


def per_step_epsilon(lam: float, n: int) -> float:
    """Per-iteration privacy loss ``8 / (lambda N)`` of the index sampler."""
    if not lam > 0 or n < 1:
        raise ValueError("need lambda > 0 and n >= 1")
    return 8.0 / (lam * n)


def step_epsilon(epsilon: float, k: int, delta: float, mode=CompositionMode.PAPER_APPROX) -> float:
    """Largest per-step epsilon whose k-fold composition equals ``epsilon``."""
    mode = CompositionMode(mode)
    if k < 1 or not epsilon > 0:
        raise ValueError("need k >= 1 and epsilon > 0")
    if math.isinf(epsilon):
        return math.inf
    if mode is CompositionMode.BASIC:
        return epsilon / k
    first = epsilon / math.sqrt(2 * k * math.log(1 / delta))
    if mode is CompositionMode.PAPER_APPROX:
        return first

    def gap(e):
        return compose(CompositionQuery(e, k, delta, mode)) - epsilon

    return optimize.brentq(gap, 0.0, first, xtol=1e-15, rtol=1e-14)


# --- Laplace baseline ------------------------------------------------------


def laplace_sensitivity(n: int) -> float:
    """Replace-one sensitivity ``4/N`` of each gradient entry on normalized data."""
    return 4.0 / n


def laplace_scale(n: int, eps_step: float) -> float:
    """Noise scale ``2 * (4/N) / eps_step`` of report-noisy-min; 0 when ``eps_step`` is infinite."""
    if not eps_step > 0:
        raise ValueError(f"eps_step must be > 0, got {eps_step}")
    return 2.0 * laplace_sensitivity(n) / eps_step


def fit_cdp_laplace(
    ds: Dataset,
    epsilon: float,
    delta: float,
    T: int,
    seed: int = 0,
    composition=CompositionMode.PAPER_APPROX,
    allow_unnormalized: bool = False,
    ref_iters: Optional[int] = DEFAULT_REF_ITERS,
    keep_iterates: bool = False,
) -> FitReport:
    """Frank-Wolfe Lasso with report-noisy-min vertex selection.

    Every iteration perturbs ``alpha_1..alpha_d`` with i.i.d. Laplace noise of
    scale ``2 * (4/N) / eps_step`` (the other half of the vertices get the
    negated values) and steps toward the noisy argmin. ``eps_step`` is chosen
    so that ``T`` steps compose to ``epsilon``; ``epsilon = inf`` disables the
    noise.
    """
    if ds.norm_mode is not NormMode.FROBENIUS and not allow_unnormalized:
        raise ValueError(
            f"private fitting needs Frobenius-normalized data, got {ds.norm_mode.value}"
        )
    eps_step = step_epsilon(epsilon, T, delta, composition)
    scale = laplace_scale(ds.n, eps_step)

    def select(state, t):
        base = state.alpha_base()
        if scale > 0:
            base = base + stream(seed, "laplace", t).laplace(0.0, scale, ds.d)
        return int(np.argmin(np.concatenate((base, -base))))

    state, chosen, losses, iterates = frank_wolfe(ds, T, seed, select, keep_iterates)
    return build_report(ds, state, chosen, losses, iterates, ref_iters)


def laplace_min_distribution(base: np.ndarray, scale: float) -> np.ndarray:
    """Exact law of report-noisy-min over ``[v, -v]`` with ``v = base + Laplace(scale)``.

    Index ``j`` wins when ``v_j`` is negative with the largest magnitude,
    index ``j + d`` when it is positive with the largest magnitude. The
    one-dimensional integrals are evaluated with adaptive quadrature.
    """
    base = np.asarray(base, dtype=float)
    d = base.size

    def cdf(x):
        return np.where(x < 0, 0.5 * np.exp(np.minimum(x, 0) / scale), 1 - 0.5 * np.exp(-np.maximum(x, 0) / scale))

    def inside(a, others):
        # P(|V_i| < a) for every other coordinate
        return np.prod(cdf(a - others) - cdf(-a - others))

    out = np.empty(2 * d)
    reach = 60.0 * scale + float(np.max(np.abs(base)))
    for j in range(d):
        others = np.delete(base, j)

        def dens(v, j=j, others=others):
            return math.exp(-abs(v - base[j]) / scale) / (2 * scale) * inside(abs(v), others)

        pts_neg = sorted({p for p in (base[j], *(-np.abs(others))) if -reach < p < 0})
        pts_pos = sorted({p for p in (base[j], *np.abs(others)) if 0 < p < reach})
        kw = dict(limit=400, epsabs=0.0, epsrel=1e-12)
        out[j] = integrate.quad(dens, -reach, 0.0, points=pts_neg or None, **kw)[0]
        out[j + d] = integrate.quad(dens, 0.0, reach, points=pts_pos or None, **kw)[0]
    return out / out.sum()


# --- auditing --------------------------------------------------------------


@dataclass
class NeighborFamily:
    """Datasets ``xs[m], ys[m]`` and index pairs of neighbors among them."""

    xs: np.ndarray
    ys: np.ndarray
    pairs: np.ndarray
    name: str = "family"

    def __post_init__(self):
        self.xs = np.asarray(self.xs, dtype=float)
        self.ys = np.asarray(self.ys, dtype=float)
        self.pairs = np.asarray(self.pairs, dtype=np.int64).reshape(-1, 2)
        if self.pairs.shape[0] < 1:
            raise ValueError("a family needs at least one pair")
        if self.xs.ndim != 3 or self.ys.shape != self.xs.shape[:2]:
            raise ValueError("xs must be (M, N, d) and ys (M, N)")
        a, b = self.pairs[:, 0], self.pairs[:, 1]
        rows_x = np.any(self.xs[a] != self.xs[b], axis=2)
        rows = rows_x | (self.ys[a] != self.ys[b])
        if np.any(rows.sum(axis=1) > 1):
            bad = int(np.flatnonzero(rows.sum(axis=1) > 1)[0])
            raise ValueError(f"pair {bad} differs in more than one row")

    @property
    def n(self) -> int:
        return self.xs.shape[1]

    @property
    def d(self) -> int:
        return self.xs.shape[2]

    @classmethod
    def from_datasets(cls, pairs: Sequence[tuple[Dataset, Dataset]], name: str = "pairs") -> "NeighborFamily":
        xs, ys = [], []
        for a, b in pairs:
            if a.x.shape != b.x.shape:
                raise ValueError("neighbors must have the same shape")
            xs += [a.x, b.x]
            ys += [a.y, b.y]
        idx = np.arange(2 * len(pairs)).reshape(-1, 2)
        return cls(np.stack(xs), np.stack(ys), idx, name)


def toy_family(n: int = 3, d: int = 2, grid=(-0.5, 0.0, 0.5), y_grid=(-1.0, 0.0, 1.0)) -> NeighborFamily:
    """Every dataset with entries on small grids and unit-bounded norms, plus all neighbor pairs.

    A dataset is kept when ``||X||_F <= 1`` and ``||y||_2 <= 1``; two kept
    datasets are neighbors when they differ in exactly one row.
    """
    row_opts = np.array([(*xr, yv) for xr in itertools.product(grid, repeat=d) for yv in y_grid])
    combos = np.array(list(itertools.product(range(len(row_opts)), repeat=n)))
    data = row_opts[combos]  # (M, n, d + 1)
    xs, ys = data[..., :d], data[..., d]
    keep = (np.sum(xs**2, axis=(1, 2)) <= 1 + 1e-12) & (np.sum(ys**2, axis=1) <= 1 + 1e-12)
    xs, ys, combos = xs[keep], ys[keep], combos[keep]

    pairs = []
    for r in range(n):
        rest = np.delete(combos, r, axis=1)
        _, group = np.unique(rest, axis=0, return_inverse=True)
        group = group.reshape(-1)
        order = np.argsort(group, kind="stable")
        bounds = np.flatnonzero(np.diff(group[order])) + 1
        for members in np.split(order, bounds):
            if members.size > 1:
                a, b = np.triu_indices(members.size, 1)
                pairs.append(np.stack((members[a], members[b]), axis=1))
    return NeighborFamily(xs, ys, np.concatenate(pairs), "toy")


def random_family(n_pairs: int, n: int, d: int, seed: int = 0) -> NeighborFamily:
    """Random neighbor pairs with entries in [-1, 1] and ``||X||_F, ||y||_2 <= 1``."""
    rng = stream(seed, "audit", n, d)
    # scaling every entry by the worst case keeps both norms at most 1
    xs = rng.uniform(-1, 1, (n_pairs, 2, n, d)) / math.sqrt(n * d)
    ys = rng.uniform(-1, 1, (n_pairs, 2, n)) / math.sqrt(n)
    rows = rng.integers(n, size=n_pairs)
    keep = np.ones((n_pairs, n), dtype=bool)
    keep[np.arange(n_pairs), rows] = False
    xs[:, 1][keep] = xs[:, 0][keep]
    ys[:, 1][keep] = ys[:, 0][keep]
    return NeighborFamily(
        xs.reshape(-1, n, d), ys.reshape(-1, n), np.arange(2 * n_pairs).reshape(-1, 2), "random"
    )


def audit_thetas(d: int, n_interior: int = 8, seed: int = 0) -> np.ndarray:
    """Points of the l1 ball at which the per-step laws are compared.

    The origin, all ``2d`` signed vertices and ``n_interior`` random
    interior points.
    """
    eye = np.eye(d)
    rng = stream(seed, "audit", d, n_interior)
    w = rng.dirichlet(np.ones(2 * d), n_interior) * rng.uniform(0, 1, (n_interior, 1))
    interior = w[:, :d] - w[:, d:]
    return np.vstack((np.zeros(d), eye, -eye, interior))


def family_alphas(fam: NeighborFamily, theta: np.ndarray) -> np.ndarray:
    """Gradient over the ``d`` positive vertices for every dataset, shape ``(M, d)``."""
    resid = fam.ys - fam.xs @ theta
    return -np.einsum("mns,mn->ms", fam.xs, resid) / fam.n


@dataclass
class AuditReport:
    """Worst per-step probability ratio found over a neighbor family."""

    mechanism: str
    max_ratio: float
    bound: float
    pairs_checked: int
    worst_pair: int
    max_sensitivity: float
    pair_ratios: np.ndarray = field(repr=False, default_factory=lambda: np.empty(0))

    @property
    def margin(self) -> float:
        return self.bound - self.max_ratio

    @property
    def holds(self) -> bool:
        return self.margin >= -1e-9


def _softmax_log(alpha_full: np.ndarray, l1: float, lam: float) -> np.ndarray:
    logits = -np.abs(alpha_full + 2.0 * l1) / lam
    m = logits.max(axis=-1, keepdims=True)
    return logits - m - np.log(np.sum(np.exp(logits - m), axis=-1, keepdims=True))


def audit_dp(
    mechanism: str,
    family: NeighborFamily,
    lam: Optional[float] = None,
    l1: Optional[float] = None,
    eps_step: Optional[float] = None,
    thetas: Optional[np.ndarray] = None,
    max_pairs: Optional[int] = None,
    seed: int = 0,
) -> AuditReport:
    """Largest ratio ``P_D(s) / P_D'(s)`` of a one-step selector over neighbor pairs.

    Args:
        mechanism: ``"qdp"`` for the exponential-weight sampler, whose law is
            evaluated in closed form, or ``"cdp"`` for Laplace
            report-noisy-min, whose law is integrated numerically.
        family: Datasets and neighbor pairs.
        lam: Temperature of the ``qdp`` sampler.
        l1: Offset constant of the ``qdp`` sampler; defaults to the largest
            gradient bound over the family, shared by every dataset.
        eps_step: Per-step budget of the ``cdp`` selector.
        thetas: Points at which the laws are compared; see
            :func:`audit_thetas`.
        max_pairs: Audit only this many pairs (drawn with ``seed``).
        seed: Seed of the pair subsample and of the default thetas.

    Returns:
        An :class:`AuditReport`; ``bound`` is ``exp(8/(lambda N))`` for
        ``qdp`` and ``exp(eps_step)`` for ``cdp``.
    """
    pairs = family.pairs
    if max_pairs is not None and max_pairs < pairs.shape[0]:
        pick = np.sort(stream(seed, "audit", 1).choice(pairs.shape[0], max_pairs, replace=False))
        pairs = pairs[pick]
    thetas = audit_thetas(family.d, seed=seed) if thetas is None else np.atleast_2d(thetas)
    a, b = pairs[:, 0], pairs[:, 1]
    n = family.n
    used = np.unique(pairs)

    ratios = np.zeros(pairs.shape[0])
    sens = 0.0
    if mechanism == "qdp":
        if lam is None or not lam > 0:
            raise ValueError("the qdp audit needs lambda > 0")
        if l1 is None:
            fro = np.linalg.norm(family.xs[used], axis=(1, 2))
            l1 = float(np.max(fro * (fro + np.linalg.norm(family.ys[used], axis=1)))) / n
        bound = math.exp(8.0 / (lam * n))
    elif mechanism == "cdp":
        if eps_step is None or not eps_step > 0:
            raise ValueError("the cdp audit needs eps_step > 0")
        bound = math.exp(eps_step)
        scale = laplace_scale(n, eps_step)
    else:
        raise ValueError(f"unknown mechanism {mechanism!r}")

    for theta in thetas:
        alpha = family_alphas(family, theta)
        sens = max(sens, float(np.max(np.abs(alpha[a] - alpha[b]))))
        if mechanism == "qdp":
            logp = _softmax_log(np.concatenate((alpha, -alpha), axis=1), l1, lam)
            gap = np.max(np.abs(logp[a] - logp[b]), axis=1)
        else:
            logp = np.full((family.xs.shape[0], 2 * family.d), np.nan)
            for m in used:
                logp[m] = np.log(laplace_min_distribution(alpha[m], scale))
            gap = np.max(np.abs(logp[a] - logp[b]), axis=1)
        ratios = np.maximum(ratios, np.exp(gap))

    worst = int(np.argmax(ratios))
    return AuditReport(
        mechanism=mechanism,
        max_ratio=float(ratios[worst]),
        bound=bound,
        pairs_checked=int(pairs.shape[0]),
        worst_pair=worst,
        max_sensitivity=sens,
        pair_ratios=ratios,
    )
