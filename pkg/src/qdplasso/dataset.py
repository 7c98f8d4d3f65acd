"""Regression data model, synthetic generation, normalization and file I/O."""

from __future__ import annotations

import enum
import hashlib
import os
from dataclasses import dataclass, field
from typing import Mapping, Union

import numpy as np

from qdplasso._rng import stream
from qdplasso.errors import DatasetParseError, DegenerateInputError

_TOL = 1e-12


class NormMode(str, enum.Enum):
    """Declared scaling of a dataset.

    ``RAW`` marks data that has not been normalized yet (the output of
    :func:`generate_synthetic`); the bound invariants are only enforced for
    the two normalized modes.
    """

    RAW = "Raw"
    INF_NORM = "InfNorm"
    FROBENIUS = "Frobenius"

    @classmethod
    def parse(cls, value: Union[str, "NormMode"]) -> "NormMode":
        if isinstance(value, NormMode):
            return value
        key = value.strip().lower().replace("_", "").replace("-", "")
        for mode in cls:
            if mode.value.lower() == key or mode.name.lower().replace("_", "") == key:
                return mode
        if key in ("inf", "infinity", "max"):
            return cls.INF_NORM
        if key in ("fro", "frob", "f"):
            return cls.FROBENIUS
        raise ValueError(f"unknown normalization mode {value!r}")


@dataclass(frozen=True, eq=False)
class Dataset:
    """Design matrix ``x`` (N x d), targets ``y`` (N) and their declared scaling.

    ``scales`` records the cumulative factors applied to ``(x, y)`` by
    :func:`normalize`, so callers can map coefficients back to raw units.
    """

    x: np.ndarray
    y: np.ndarray
    norm_mode: NormMode = NormMode.RAW
    scales: tuple[float, float] = (1.0, 1.0)

    def __post_init__(self):
        x = np.array(self.x, dtype=np.float64)
        y = np.array(self.y, dtype=np.float64)
        if x.ndim != 2:
            raise ValueError(f"x must be a 2-D matrix, got shape {x.shape}")
        if y.ndim != 1 or y.shape[0] != x.shape[0]:
            raise ValueError(f"y must have length N={x.shape[0]}, got shape {y.shape}")
        n, d = x.shape
        if n < 1 or d < 1:
            raise ValueError(f"need N >= 1 and d >= 1, got N={n}, d={d}")
        if not (np.all(np.isfinite(x)) and np.all(np.isfinite(y))):
            raise ValueError("x and y must be finite")
        mode = NormMode.parse(self.norm_mode)
        y_max = float(np.max(np.abs(y)))
        if mode is NormMode.INF_NORM:
            x_max = float(np.max(np.abs(x)))
            if x_max > 1 + _TOL or y_max > 1 + _TOL:
                raise ValueError(
                    f"InfNorm dataset violates bounds: max|X|={x_max}, max|y|={y_max}"
                )
        elif mode is NormMode.FROBENIUS:
            fro = float(np.linalg.norm(x))
            if fro > 1 + _TOL or y_max > 1 + _TOL:
                raise ValueError(
                    f"Frobenius dataset violates bounds: ||X||_F={fro}, max|y|={y_max}"
                )
        x.setflags(write=False)
        y.setflags(write=False)
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "norm_mode", mode)

    @property
    def n(self) -> int:
        return self.x.shape[0]

    @property
    def d(self) -> int:
        return self.x.shape[1]

    def fingerprint(self) -> str:
        h = hashlib.sha1()
        h.update(np.asarray(self.x.shape, dtype=np.int64).tobytes())
        h.update(self.x.tobytes())
        h.update(self.y.tobytes())
        return h.hexdigest()

    def __eq__(self, other):
        if not isinstance(other, Dataset):
            return NotImplemented
        return (
            self.norm_mode is other.norm_mode
            and self.x.shape == other.x.shape
            and np.array_equal(self.x, other.x)
            and np.array_equal(self.y, other.y)
        )

    __hash__ = None


@dataclass(frozen=True, eq=False)
class GroundTruth:
    """Sparse generating parameter ``theta_star`` with its noise level."""

    theta_star: np.ndarray
    noise_std: float = 0.0
    sparsity: int = field(default=-1)

    def __post_init__(self):
        theta = np.array(self.theta_star, dtype=np.float64)
        if theta.ndim != 1 or theta.size < 1:
            raise ValueError("theta_star must be a non-empty vector")
        nnz = int(np.count_nonzero(theta))
        s = nnz if self.sparsity < 0 else int(self.sparsity)
        if s != nnz:
            raise ValueError(f"sparsity {s} does not match {nnz} nonzeros of theta_star")
        if self.noise_std < 0:
            raise ValueError("noise_std must be non-negative")
        theta.setflags(write=False)
        object.__setattr__(self, "theta_star", theta)
        object.__setattr__(self, "sparsity", s)

    @property
    def d(self) -> int:
        return self.theta_star.size

    def __eq__(self, other):
        if not isinstance(other, GroundTruth):
            return NotImplemented
        return (
            np.array_equal(self.theta_star, other.theta_star)
            and self.noise_std == other.noise_std
        )

    __hash__ = None


def generate_synthetic(
    n: int, d: int, s_star: int, seed: int, noise_std: float = 0.0
) -> tuple[Dataset, GroundTruth]:
    """Draw a raw synthetic regression problem.

    X has i.i.d. U(-1, 1) entries; theta* has ``s_star`` i.i.d. U(0, 1)
    coefficients at uniformly chosen positions; ``y = X theta* + omega`` with
    omega ~ N(0, noise_std^2). Each ingredient has its own random stream, so
    changing ``noise_std`` leaves X and theta* untouched.

    The result is in ``NormMode.RAW``; pass it through :func:`normalize`
    before fitting.
    """
    if n < 1 or d < 1:
        raise ValueError(f"need n >= 1 and d >= 1, got n={n}, d={d}")
    if not 1 <= s_star <= d:
        raise ValueError(f"need 1 <= s_star <= d, got s_star={s_star}, d={d}")
    if noise_std < 0:
        raise ValueError(f"noise_std must be non-negative, got {noise_std}")

    x = stream(seed, "design").uniform(-1.0, 1.0, size=(n, d))
    support = np.sort(stream(seed, "support").choice(d, size=s_star, replace=False))
    values = stream(seed, "coefficients").uniform(0.0, 1.0, size=s_star)
    # U(0,1) can return exactly 0.0; keep the sparsity contract exact.
    values[values == 0.0] = np.nextafter(0.0, 1.0)
    theta = np.zeros(d)
    theta[support] = values
    y = x @ theta
    if noise_std > 0:
        y = y + stream(seed, "noise").normal(0.0, noise_std, size=n)
    return Dataset(x, y, NormMode.RAW), GroundTruth(theta, noise_std, s_star)


def normalize(
    ds: Dataset, gt: GroundTruth | None, mode: Union[NormMode, str]
) -> tuple[Dataset, GroundTruth | None]:
    """Rescale ``ds`` into ``mode`` and keep ``gt`` consistent with it.

    InfNorm divides X by max|X_ij| and y by max|y_i|, each only when it
    exceeds 1. Frobenius divides X and y by ||X||_F, then divides both again
    by max|y_i| if that still exceeds 1. ``gt.theta_star`` is rescaled by
    ``y_scale / x_scale`` so that ``y = X theta* + omega`` keeps holding.

    Raises:
        DegenerateInputError: X is identically zero.
    """
    mode = NormMode.parse(mode)
    x, y = ds.x, ds.y
    if not np.any(x):
        raise DegenerateInputError("cannot normalize an all-zero design matrix")

    if mode is NormMode.RAW:
        return ds, gt
    # Divide rather than multiply by reciprocals: |a| / max|a| <= 1 exactly.
    if mode is NormMode.INF_NORM:
        x_div = max(float(np.max(np.abs(x))), 1.0)
        y_div = max(float(np.max(np.abs(y))), 1.0)
    else:
        x_div = float(np.linalg.norm(x))
        y_div = x_div
        y_max = float(np.max(np.abs(y))) / x_div
        if y_max > 1:
            x_div *= y_max
            y_div *= y_max
    x_new = x / x_div
    y_new = y / y_div
    sx, sy = 1.0 / x_div, 1.0 / y_div

    out = Dataset(x_new, y_new, mode, (ds.scales[0] * sx, ds.scales[1] * sy))
    if gt is None:
        return out, None
    new_gt = GroundTruth(gt.theta_star * (sy / sx), gt.noise_std * sy, gt.sparsity)
    return out, new_gt


def _dense(v, d: int | None = None) -> np.ndarray:
    if isinstance(v, Mapping):
        if d is None:
            raise ValueError("dimension d is required for mapping inputs")
        out = np.zeros(d)
        for j, c in v.items():
            out[j] = c
        return out
    to_dense = getattr(v, "to_dense", None)
    if to_dense is not None:
        return to_dense(d)
    return np.asarray(v, dtype=np.float64)


def reconstruction_error(theta_p, theta_star, d: int | None = None) -> float:
    """Relative l2 error ``||theta_p - theta*||_2 / ||theta*||_2``.

    Both arguments may be dense arrays, ``{index: value}`` mappings or
    :class:`~qdplasso.fw.SparseIterate` objects.
    """
    if d is None:
        for v in (theta_star, theta_p):
            if not isinstance(v, Mapping) and getattr(v, "to_dense", None) is None:
                d = np.asarray(v).size
                break
    a = _dense(theta_p, d)
    b = _dense(theta_star, d)
    if a.shape != b.shape:
        raise ValueError(f"dimension mismatch: {a.shape} vs {b.shape}")
    denom = float(np.linalg.norm(b))
    if denom == 0.0:
        raise DegenerateInputError("theta_star is zero; relative error undefined")
    return float(np.linalg.norm(a - b)) / denom


# --- file I/O -------------------------------------------------------------


def save_dataset(ds: Dataset, path: Union[str, os.PathLike]) -> None:
    """Write ``ds`` as CSV: ``n,d,norm_mode`` line, N rows of X, one row of y.

    Floats are written with ``repr`` so a load gives back identical bits.
    """
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(f"{ds.n},{ds.d},{ds.norm_mode.value}\n")
        for row in ds.x:
            fh.write(",".join(repr(float(v)) for v in row))
            fh.write("\n")
        fh.write(",".join(repr(float(v)) for v in ds.y))
        fh.write("\n")


def _parse_floats(line: str, expected: int, what: str) -> np.ndarray:
    parts = line.strip().split(",") if line.strip() else []
    if len(parts) != expected:
        raise DatasetParseError(f"{what}: expected {expected} values, found {len(parts)}")
    try:
        return np.array([float(p) for p in parts])
    except ValueError as exc:
        raise DatasetParseError(f"{what}: {exc}") from None


def load_dataset(path: Union[str, os.PathLike]) -> Dataset:
    with open(path, encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    if not lines:
        raise DatasetParseError("empty dataset file")
    header = lines[0].split(",")
    if len(header) != 3:
        raise DatasetParseError(f"malformed header {lines[0]!r}; expected n,d,norm_mode")
    try:
        n, d = int(header[0]), int(header[1])
        mode = NormMode.parse(header[2])
    except ValueError as exc:
        raise DatasetParseError(f"malformed header {lines[0]!r}: {exc}") from None
    if n < 1 or d < 1:
        raise DatasetParseError(f"header declares N={n}, d={d}; both must be >= 1")
    body = lines[1:]
    while body and not body[-1].strip():
        body.pop()
    if len(body) != n + 1:
        missing = f"row {len(body)}" if len(body) < n + 1 else "trailing data"
        raise DatasetParseError(
            f"expected {n} X rows plus one y row, found {len(body)} lines ({missing})"
        )
    x = np.empty((n, d))
    for i in range(n):
        x[i] = _parse_floats(body[i], d, f"X row {i}")
    y = _parse_floats(body[n], n, "y row")
    try:
        return Dataset(x, y, mode)
    except ValueError as exc:
        raise DatasetParseError(str(exc)) from None


def save_ground_truth(gt: GroundTruth, path: Union[str, os.PathLike]) -> None:
    """Write ``d,s_star`` then one ``index,value`` line per nonzero (0-based)."""
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(f"{gt.d},{gt.sparsity}\n")
        for j in np.flatnonzero(gt.theta_star):
            fh.write(f"{int(j)},{float(gt.theta_star[j])!r}\n")


def load_ground_truth(path: Union[str, os.PathLike]) -> GroundTruth:
    with open(path, encoding="utf-8") as fh:
        lines = [ln for ln in fh.read().splitlines() if ln.strip()]
    if not lines:
        raise DatasetParseError("empty ground-truth file")
    try:
        d, s_star = (int(v) for v in lines[0].split(","))
    except ValueError:
        raise DatasetParseError(f"malformed header {lines[0]!r}; expected d,s_star") from None
    if d < 1 or not 0 <= s_star <= d:
        raise DatasetParseError(f"invalid header d={d}, s_star={s_star}")
    if len(lines) - 1 != s_star:
        raise DatasetParseError(f"expected {s_star} index,value lines, found {len(lines) - 1}")
    theta = np.zeros(d)
    for k, ln in enumerate(lines[1:], start=1):
        try:
            idx_s, val_s = ln.split(",")
            idx, val = int(idx_s), float(val_s)
        except ValueError:
            raise DatasetParseError(f"line {k}: malformed pair {ln!r}") from None
        if not 0 <= idx < d:
            raise DatasetParseError(f"line {k}: index {idx} out of range 0..{d - 1}")
        theta[idx] = val
    try:
        return GroundTruth(theta, 0.0, s_star)
    except ValueError as exc:
        raise DatasetParseError(str(exc)) from None
