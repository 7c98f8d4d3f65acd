"""Frank-Wolfe Lasso over the unit l1 ball, plus the loss constants.

Vertex indices are 0-based over ``range(2 * d)``: index ``k < d`` is the
basis vector ``+e_k`` and index ``k >= d`` is ``-e_(k - d)``.
"""

from __future__ import annotations

import enum
import math
import threading
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from qdplasso._rng import stream
from qdplasso.dataset import Dataset
from qdplasso.errors import CapabilityError

L1_TOL = 1e-12
DEFAULT_REF_ITERS = 100_000


def vertex(k: int, d: int) -> tuple[int, float]:
    """Map a vertex index to ``(coordinate, sign)``."""
    if not 0 <= k < 2 * d:
        raise ValueError(f"vertex index {k} outside 0..{2 * d - 1}")
    return (k, 1.0) if k < d else (k - d, -1.0)


def step_size(t: int) -> float:
    return 2.0 / (t + 2)


@dataclass(frozen=True)
class SparseIterate:
    """A point of the l1 ball stored as ``{coordinate: coefficient}``.

    ``t`` is the iteration the point belongs to; an iterate produced after
    ``t - 1`` Frank-Wolfe steps from a single vertex has at most ``t``
    nonzeros.
    """

    coeffs: dict[int, float]
    t: int
    d: int

    def __post_init__(self):
        if self.t < 1:
            raise ValueError(f"iteration counter must be >= 1, got {self.t}")
        if any(not 0 <= j < self.d for j in self.coeffs):
            raise ValueError("coefficient index outside 0..d-1")

    @classmethod
    def from_vertex(cls, k: int, d: int) -> "SparseIterate":
        j, sign = vertex(k, d)
        return cls({j: sign}, 1, d)

    @classmethod
    def from_dense(cls, theta: np.ndarray, t: int) -> "SparseIterate":
        theta = np.asarray(theta, dtype=np.float64)
        nz = np.flatnonzero(theta)
        return cls({int(j): float(theta[j]) for j in nz}, t, theta.size)

    def to_dense(self, d: int | None = None) -> np.ndarray:
        if d is not None and d != self.d:
            raise ValueError(f"dimension mismatch: iterate has d={self.d}, asked for {d}")
        out = np.zeros(self.d)
        for j, c in self.coeffs.items():
            out[j] = c
        return out

    @property
    def nnz(self) -> int:
        return sum(1 for c in self.coeffs.values() if c != 0.0)

    @property
    def l1_norm(self) -> float:
        return math.fsum(abs(c) for c in self.coeffs.values())


@dataclass(frozen=True)
class AlphaVector:
    """Projected gradient over the 2d signed vertices.

    Only the first half is stored; ``alpha[s + d] == -alpha[s]`` holds
    exactly because the second half is produced by negation.
    """

    base: np.ndarray

    def __post_init__(self):
        src = self.base.base if isinstance(self.base, AlphaVector) else self.base
        base = np.array(src, dtype=np.float64).reshape(-1)
        base.setflags(write=False)
        object.__setattr__(self, "base", base)

    @property
    def d(self) -> int:
        return self.base.size

    def __len__(self) -> int:
        return 2 * self.base.size

    def __getitem__(self, s: int) -> float:
        if not 0 <= s < 2 * self.d:
            raise IndexError(f"vertex index {s} outside 0..{2 * self.d - 1}")
        j, sign = vertex(int(s), self.d)
        return sign * float(self.base[j])

    def full(self) -> np.ndarray:
        return np.concatenate((self.base, -self.base))


@dataclass
class FitReport:
    """Outcome of one fit.

    ``losses[i]`` is the loss of iterate ``i + 1``; ``chosen_indices[i]`` is
    the vertex selected at iteration ``i + 1``. ``excess_risk`` is measured
    against a long-run Frank-Wolfe reference (NaN when it was skipped).
    """

    theta: SparseIterate
    chosen_indices: list[int]
    losses: np.ndarray
    excess_risk: float
    cf_bound: float
    l1_bound: float
    reference_loss: float = float("nan")
    initial_index: int = -1
    iterates: Optional[list[SparseIterate]] = None
    ledger: object = None

    @property
    def t_total(self) -> int:
        return self.theta.t

    @property
    def final_loss(self) -> float:
        return float(self.losses[-1])


# --- loss and gradient ----------------------------------------------------


def _theta_dense(theta, d: int) -> np.ndarray:
    if isinstance(theta, SparseIterate):
        return theta.to_dense(d)
    theta = np.asarray(theta, dtype=np.float64)
    if theta.shape != (d,):
        raise ValueError(f"theta has shape {theta.shape}, expected ({d},)")
    return theta


def loss(ds: Dataset, theta) -> float:
    """Least-squares loss ``||X theta - y||^2 / (2N)``."""
    r = ds.x @ _theta_dense(theta, ds.d) - ds.y
    return float(r @ r) / (2 * ds.n)


def gradient_slice(ds: Dataset, theta) -> AlphaVector:
    """Gradient of the loss as an :class:`AlphaVector` over the 2d vertices."""
    z = ds.y - ds.x @ _theta_dense(theta, ds.d)
    return AlphaVector(-(ds.x.T @ z) / ds.n)


def argmin_vertex(alpha) -> int:
    """Lowest vertex index attaining the minimum of ``alpha``."""
    values = alpha.full() if isinstance(alpha, AlphaVector) else np.asarray(alpha)
    return int(np.argmin(values))


def fw_step(theta: SparseIterate, k: int, t: int | None = None) -> SparseIterate:
    """Move ``theta`` toward vertex ``k`` with step ``2 / (t + 2)``."""
    t = theta.t if t is None else t
    mu = step_size(t)
    j, sign = vertex(k, theta.d)
    coeffs = {i: (1.0 - mu) * c for i, c in theta.coeffs.items()}
    coeffs[j] = coeffs.get(j, 0.0) + sign * mu
    coeffs = {i: c for i, c in coeffs.items() if c != 0.0}
    return SparseIterate(coeffs, t + 1, theta.d)


# --- constants -------------------------------------------------------------


class CurvatureMode(str, enum.Enum):
    UPPER = "upper"
    EXACT_VERTEX = "exact"


def curvature_bound(ds: Dataset, mode="upper", d_max: int = 64) -> float:
    """Curvature constant of the loss over the unit l1 ball.

    For this quadratic the constant is ``sup ||X (u - v)||^2 / N`` over
    ``u, v`` in the ball, attained at vertices. ``"upper"`` returns the cheap
    bound ``(2 max_j ||X_:j||)^2 / N``; ``"exact"`` enumerates all vertex
    pairs and is limited to ``d <= d_max``.
    """
    mode = CurvatureMode(mode)
    x = ds.x
    if mode is CurvatureMode.UPPER:
        col = float(np.max(np.linalg.norm(x, axis=0)))
        return (2.0 * col) ** 2 / ds.n
    if ds.d > d_max:
        raise CapabilityError(
            f"exact vertex enumeration needs d <= {d_max}, got d={ds.d}"
        )
    v = np.concatenate((x, -x), axis=1)
    gram = v.T @ v
    diag = np.diag(gram)
    dist2 = diag[:, None] + diag[None, :] - 2.0 * gram
    return max(float(np.max(dist2)), 0.0) / ds.n


def lipschitz_bound(ds: Dataset) -> float:
    """``||X||_F (||X||_F + ||y||_2) / N``; bounds the gradient norm on the ball."""
    fro = float(np.linalg.norm(ds.x))
    return fro * (fro + float(np.linalg.norm(ds.y))) / ds.n


# --- the iteration ---------------------------------------------------------


class FWState:
    """Mutable Frank-Wolfe state with an incrementally maintained residual.

    The residual ``z = y - X theta`` is updated in O(N) per step; the full
    gradient costs O(N d) and is only formed when asked for.
    """

    def __init__(self, ds: Dataset, k0: int):
        self.ds = ds
        self.n, self.d = ds.n, ds.d
        self._cols = np.ascontiguousarray(ds.x.T)
        j, sign = vertex(k0, self.d)
        self.theta = np.zeros(self.d)
        self.theta[j] = sign
        self.z = ds.y - sign * self._cols[j]
        self.t = 1
        self.initial_index = k0

    def alpha(self) -> AlphaVector:
        return AlphaVector(-(self._cols @ self.z) / self.n)

    def alpha_base(self) -> np.ndarray:
        return -(self._cols @ self.z) / self.n

    def loss(self) -> float:
        return float(self.z @ self.z) / (2 * self.n)

    def step(self, k: int) -> None:
        mu = step_size(self.t)
        j, sign = vertex(k, self.d)
        self.theta *= 1.0 - mu
        self.theta[j] += sign * mu
        self.z *= 1.0 - mu
        self.z += mu * (self.ds.y - sign * self._cols[j])
        self.t += 1

    def iterate(self) -> SparseIterate:
        return SparseIterate.from_dense(self.theta, self.t)


def initial_vertex(d: int, seed: int) -> int:
    """Uniformly random signed vertex used as the first iterate."""
    return int(stream(seed, "init").integers(2 * d))


Selector = Callable[[FWState, int], int]


def frank_wolfe(
    ds: Dataset,
    T: int,
    seed: int,
    select: Selector,
    keep_iterates: bool = False,
) -> tuple[FWState, list[int], np.ndarray, Optional[list[SparseIterate]]]:
    """Run iterations ``t = 1 .. T-1`` with a pluggable vertex selector.

    ``select(state, t)`` returns the vertex index for iteration ``t``.
    """
    if T < 1:
        raise ValueError(f"T must be >= 1, got {T}")
    state = FWState(ds, initial_vertex(ds.d, seed))
    losses = np.empty(T)
    losses[0] = state.loss()
    chosen: list[int] = []
    iterates = [state.iterate()] if keep_iterates else None
    for t in range(1, T):
        k = int(select(state, t))
        chosen.append(k)
        state.step(k)
        losses[t] = state.loss()
        if iterates is not None:
            iterates.append(state.iterate())
    return state, chosen, losses, iterates


def _exact_select(state: FWState, t: int) -> int:
    base = state.alpha_base()
    return int(np.argmin(np.concatenate((base, -base))))


_reference_cache: dict[tuple[str, int], float] = {}
_reference_lock = threading.Lock()


def reference_loss(ds: Dataset, iters: int = DEFAULT_REF_ITERS) -> float:
    """Best loss seen over a long exact Frank-Wolfe run (cached per dataset).

    The run is within ``2 C_f / (iters + 2)`` of the constrained optimum.
    """
    key = (ds.fingerprint(), int(iters))
    with _reference_lock:
        cached = _reference_cache.get(key)
    if cached is not None:
        return cached
    _, _, losses, _ = frank_wolfe(ds, iters, 0, _exact_select)
    value = float(np.min(losses))
    with _reference_lock:
        _reference_cache[key] = value
    return value


def build_report(
    ds: Dataset,
    state: FWState,
    chosen: list[int],
    losses: np.ndarray,
    iterates,
    ref_iters: Optional[int],
    ledger=None,
) -> FitReport:
    ref = reference_loss(ds, ref_iters) if ref_iters else float("nan")
    return FitReport(
        theta=state.iterate(),
        chosen_indices=chosen,
        losses=losses,
        excess_risk=float(losses[-1] - ref) if ref_iters else float("nan"),
        cf_bound=curvature_bound(ds, "upper"),
        l1_bound=lipschitz_bound(ds),
        reference_loss=ref,
        initial_index=state.initial_index,
        iterates=iterates,
        ledger=ledger,
    )


def fit_nonprivate(
    ds: Dataset,
    T: int,
    seed: int,
    ref_iters: Optional[int] = DEFAULT_REF_ITERS,
    keep_iterates: bool = False,
) -> FitReport:
    """Exact Frank-Wolfe Lasso: ``T - 1`` steps from a random signed vertex.

    Args:
        ds: Dataset to fit.
        T: Number of iterates (``T = 1`` returns the random start).
        seed: Seed of the starting vertex.
        ref_iters: Length of the reference run used for ``excess_risk``;
            ``None`` skips it.
        keep_iterates: Keep every iterate in the report.
    """
    state, chosen, losses, iterates = frank_wolfe(ds, T, seed, _exact_select, keep_iterates)
    return build_report(ds, state, chosen, losses, iterates, ref_iters)
