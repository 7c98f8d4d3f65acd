"""Experiment drivers behind the command line: single fits, epsilon sweeps,
query-scaling studies and privacy audits.

Seeds fan out from one master seed. Trial ``i`` draws its dataset from
``derive_seed(seed, "data_seed", i)`` and every fit on it uses
``derive_seed(seed, "cell_seed", i)``, so all methods and budgets of a
trial see the same data and the results do not depend on scheduling.
"""

from __future__ import annotations

import csv
import math
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, fields, replace
from typing import Optional, Sequence

import numpy as np

from qdplasso._rng import derive_seed
from qdplasso.dataset import Dataset, GroundTruth, NormMode, generate_synthetic, normalize, reconstruction_error
from qdplasso.errors import GateAbort, MechanismFailure
from qdplasso.fw import fit_nonprivate, reference_loss
from qdplasso.mechanism import calibrate_lambda, choose_T, fit_qdp, resolve_curvature
from qdplasso.oracles import MinFindConfig, OracleConfig, fit_quantum_sim, repetitions_for, theoretical_costs
from qdplasso.privacy import CompositionMode, NeighborFamily, audit_dp, fit_cdp_laplace, step_epsilon, toy_family
from qdplasso.svg import line_chart

METHODS = ("fw", "qnp", "qdp", "cdp")
PRIVATE_METHODS = ("qdp", "cdp")
DEFAULT_NONPRIVATE_T = 100
THREADS_ENV = "QDPLASSO_THREADS"


@dataclass
class ExperimentConfig:
    """Settings shared by all experiment drivers."""

    method: str = "qdp"
    methods: tuple[str, ...] = PRIVATE_METHODS
    n: int = 100
    d: int = 500
    s_star: int = 10
    noise_std: float = 0.0
    epsilon: float = 1.0
    epsilon_grid: tuple[float, ...] = (0.1, 0.55, 1.0)
    delta: float = 1e-5
    varsigma: float = 0.01
    b: float = 0.01
    trials: int = 10
    seed: int = 0
    norm_mode: NormMode = NormMode.FROBENIUS
    output_dir: str = "out"
    t_total: Optional[int] = None
    curvature: object = 1.0
    ref_iters: Optional[int] = 100_000
    composition: CompositionMode = CompositionMode.PAPER_APPROX
    minfind_mode: str = "stochastic"
    timing: bool = True

    def __post_init__(self):
        self.norm_mode = NormMode.parse(self.norm_mode) if isinstance(self.norm_mode, str) else self.norm_mode
        self.composition = CompositionMode(self.composition)
        self.methods = tuple(self.methods)
        self.epsilon_grid = tuple(float(e) for e in self.epsilon_grid)
        for m in (self.method, *self.methods):
            if m not in METHODS:
                raise ValueError(f"unknown method {m!r}; choose from {', '.join(METHODS)}")
        if self.trials < 1:
            raise ValueError("trials must be >= 1")
        if not self.epsilon_grid:
            raise ValueError("the epsilon grid must not be empty")
        if min(self.n, self.d, self.s_star) < 1 or self.s_star > self.d:
            raise ValueError("need n, d >= 1 and 1 <= s_star <= d")
        if any(not e > 0 for e in (self.epsilon, *self.epsilon_grid)):
            raise ValueError("privacy budgets must be > 0")
        if not 0 < self.delta < 1:
            raise ValueError("delta must lie in (0, 1)")
        if self.t_total is not None and self.t_total < 1:
            raise ValueError("t_total must be >= 1")


@dataclass
class ResultRow:
    trial: int
    epsilon: float
    method: str
    recon_error: float
    excess_risk: float
    t_total: int
    queries_alpha: int
    proposals_total: int
    wall_ms: float
    status: str = "ok"


RESULT_COLUMNS = [f.name for f in fields(ResultRow)]


def _fmt(v) -> str:
    if isinstance(v, float):
        return "" if math.isnan(v) else repr(v)
    return str(v)


def write_rows(path, columns: Sequence[str], rows: Sequence[dict]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for r in rows:
            w.writerow([_fmt(r[c]) for c in columns])


def write_results(path, rows: Sequence[ResultRow]) -> None:
    write_rows(path, RESULT_COLUMNS, [asdict(r) for r in rows])


def read_results(path) -> list[ResultRow]:
    out = []
    with open(path, newline="") as fh:
        for r in csv.DictReader(fh):
            out.append(
                ResultRow(
                    trial=int(r["trial"]),
                    epsilon=float(r["epsilon"]) if r["epsilon"] else math.nan,
                    method=r["method"],
                    recon_error=float(r["recon_error"]) if r["recon_error"] else math.nan,
                    excess_risk=float(r["excess_risk"]) if r["excess_risk"] else math.nan,
                    t_total=int(r["t_total"]) if r["t_total"] else 0,
                    queries_alpha=int(r["queries_alpha"]) if r["queries_alpha"] else 0,
                    proposals_total=int(r["proposals_total"]) if r["proposals_total"] else 0,
                    wall_ms=float(r["wall_ms"]),
                    status=r["status"],
                )
            )
    return out


# --- single cells ----------------------------------------------------------


def trial_data(cfg: ExperimentConfig, trial: int) -> tuple[Dataset, GroundTruth]:
    ds, gt = generate_synthetic(
        cfg.n, cfg.d, cfg.s_star, derive_seed(cfg.seed, "data_seed", trial), cfg.noise_std
    )
    return normalize(ds, gt, cfg.norm_mode)


def cell_seed(cfg: ExperimentConfig, trial: int) -> int:
    return derive_seed(cfg.seed, "cell_seed", trial)


def private_T(cfg: ExperimentConfig, ds: Dataset, epsilon: float) -> int:
    if cfg.t_total is not None:
        return cfg.t_total
    return choose_T(epsilon, cfg.delta, ds.n, resolve_curvature(ds, cfg.curvature))


@dataclass
class CellOutput:
    row: ResultRow
    report: object = None
    trace: object = None
    params: object = None
    error: Optional[Exception] = None


def run_cell(
    cfg: ExperimentConfig,
    method: str,
    epsilon: float,
    trial: int,
    ds: Dataset,
    gt: Optional[GroundTruth],
    seed: Optional[int] = None,
) -> CellOutput:
    """Fit ``method`` on ``ds`` and summarize the fit as a :class:`ResultRow`.

    Gate aborts and sampler failures become rows with ``status`` set to
    ``gate_abort`` or ``mechanism_failure`` and empty metrics.
    """
    seed = cell_seed(cfg, trial) if seed is None else seed
    ocfg = OracleConfig(cfg.varsigma, cfg.b, seed)
    eps = epsilon if method in PRIVATE_METHODS else math.nan
    if cfg.ref_iters:
        reference_loss(ds, cfg.ref_iters)
    trace = params = None
    start = time.perf_counter()
    try:
        if method == "fw":
            report = fit_nonprivate(ds, cfg.t_total or DEFAULT_NONPRIVATE_T, seed, cfg.ref_iters)
        elif method == "qnp":
            mf = MinFindConfig(repetitions_for(cfg.b), cfg.minfind_mode)
            report = fit_quantum_sim(ds, cfg.t_total or DEFAULT_NONPRIVATE_T, ocfg, mf, seed, cfg.ref_iters)
        elif method == "qdp":
            report, trace, params = fit_qdp(
                ds, epsilon, cfg.delta, ocfg, seed, cfg.curvature, cfg.t_total, ref_iters=cfg.ref_iters
            )
        elif method == "cdp":
            T = private_T(cfg, ds, epsilon)
            report = fit_cdp_laplace(ds, epsilon, cfg.delta, T, seed, cfg.composition, ref_iters=cfg.ref_iters)
        else:
            raise ValueError(f"unknown method {method!r}")
    except (GateAbort, MechanismFailure) as exc:
        status = "gate_abort" if isinstance(exc, GateAbort) else "mechanism_failure"
        row = ResultRow(trial, eps, method, math.nan, math.nan, 0, 0, 0, 0.0, status)
        return CellOutput(row, error=exc)
    wall = (time.perf_counter() - start) * 1000 if cfg.timing else 0.0

    recon = reconstruction_error(report.theta, gt.theta_star) if gt is not None else math.nan
    ledger = report.ledger
    row = ResultRow(
        trial=trial,
        epsilon=eps,
        method=method,
        recon_error=float(recon),
        excess_risk=float(report.excess_risk),
        t_total=report.t_total,
        queries_alpha=ledger.counts["OAlpha"] if ledger is not None else 0,
        proposals_total=trace.proposals_total if trace is not None else 0,
        wall_ms=round(wall, 3),
    )
    return CellOutput(row, report, trace, params)


# --- sweeps ----------------------------------------------------------------


def _sweep_trial(args) -> list[ResultRow]:
    cfg, trial = args
    ds, gt = trial_data(cfg, trial)
    return [
        run_cell(cfg, method, eps, trial, ds, gt).row for method in cfg.methods for eps in cfg.epsilon_grid
    ]


def worker_count() -> int:
    raw = os.environ.get(THREADS_ENV, "").strip()
    if not raw:
        return 1
    try:
        return max(1, int(raw))
    except ValueError:
        raise ValueError(f"{THREADS_ENV} must be an integer, got {raw!r}") from None


def run_sweep(cfg: ExperimentConfig, workers: Optional[int] = None) -> list[ResultRow]:
    """All ``(method, epsilon, trial)`` cells, ordered by method, epsilon, trial."""
    for m in cfg.methods:
        if m not in PRIVATE_METHODS:
            raise ValueError(f"sweeps need private methods, got {m!r}")
    workers = worker_count() if workers is None else workers
    jobs = [(cfg, trial) for trial in range(cfg.trials)]
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=min(workers, len(jobs))) as pool:
            chunks = list(pool.map(_sweep_trial, jobs))
    else:
        chunks = [_sweep_trial(j) for j in jobs]
    rows = [r for chunk in chunks for r in chunk]
    order = {m: i for i, m in enumerate(cfg.methods)}
    rows.sort(key=lambda r: (order[r.method], r.epsilon, r.trial))
    return rows


SUMMARY_COLUMNS = [
    "method", "epsilon", "trials_ok", "trials_aborted",
    "mean_recon_error", "std_recon_error", "mean_excess_risk", "std_excess_risk", "mean_t_total",
]


def summarize(rows: Sequence[ResultRow]) -> list[dict]:
    """Mean and standard deviation per ``(method, epsilon)`` over completed trials."""
    groups: dict[tuple[str, float], list[ResultRow]] = {}
    for r in rows:
        groups.setdefault((r.method, r.epsilon), []).append(r)
    out = []
    for (method, eps), rs in groups.items():
        ok = [r for r in rs if r.status == "ok"]
        rec = np.array([r.recon_error for r in ok])
        risk = np.array([r.excess_risk for r in ok])

        def stat(a, f):
            a = a[~np.isnan(a)]
            return float(f(a)) if a.size else math.nan

        out.append({
            "method": method,
            "epsilon": eps,
            "trials_ok": len(ok),
            "trials_aborted": len(rs) - len(ok),
            "mean_recon_error": stat(rec, np.mean),
            "std_recon_error": stat(rec, np.std),
            "mean_excess_risk": stat(risk, np.mean),
            "std_excess_risk": stat(risk, np.std),
            "mean_t_total": stat(np.array([float(r.t_total) for r in ok]), np.mean),
        })
    return out


def sweep_chart(summary: Sequence[dict]) -> str:
    series: dict[str, list[tuple[float, float, float]]] = {}
    for s in summary:
        if not math.isnan(s["mean_recon_error"]):
            series.setdefault(s["method"], []).append(
                (s["epsilon"], s["mean_recon_error"], s["std_recon_error"])
            )
    return line_chart(series, "Reconstruction error vs privacy budget", "epsilon", "mean reconstruction error")


def write_sweep(cfg: ExperimentConfig, rows: Sequence[ResultRow]) -> dict[str, str]:
    os.makedirs(cfg.output_dir, exist_ok=True)
    paths = {
        "results": os.path.join(cfg.output_dir, "results.csv"),
        "summary": os.path.join(cfg.output_dir, "summary.csv"),
        "chart": os.path.join(cfg.output_dir, "recon_error.svg"),
    }
    summary = summarize(rows)
    write_results(paths["results"], rows)
    write_rows(paths["summary"], SUMMARY_COLUMNS, summary)
    with open(paths["chart"], "w") as fh:
        fh.write(sweep_chart(summary))
    return paths


def decreasing_trend(means: Sequence[float], inversions: int = 1) -> bool:
    """Last value below the first and at most ``inversions`` upward steps."""
    ups = sum(1 for a, b in zip(means, means[1:]) if b > a)
    return means[-1] < means[0] and ups <= inversions


# --- scaling ---------------------------------------------------------------

SCALING_COLUMNS = [
    "axis", "method", "size", "mean_queries_alpha", "mean_charged_budget", "measured_slope", "predicted_exponent",
]
PREDICTED_EXPONENT = {
    ("d", "qdp"): 0.0, ("d", "qnp"): 0.5, ("n", "qdp"): 2.5, ("n", "qnp"): 0.5,
    ("d", "opt_c"): 1.0, ("d", "cdp"): 2.0, ("d", "opt_q"): 0.5,
    ("n", "opt_c"): 1.0, ("n", "cdp"): 1.0, ("n", "opt_q"): 0.5,
}


def loglog_slope(sizes: Sequence[float], values: Sequence[float]) -> float:
    return float(np.polyfit(np.log(sizes), np.log(values), 1)[0])


def run_scaling(
    cfg: ExperimentConfig,
    sizes: Sequence[int],
    axis: str = "d",
    T: int = 10,
    seeds: Optional[int] = None,
) -> list[dict]:
    """Mean oracle counts of ``qdp`` and ``qnp`` as ``d`` (or ``N``) grows.

    Both methods run ``T`` iterates at every size so that only the per-step
    cost varies. Rows for the reference cost shapes are appended with their
    formula values in ``mean_charged_budget``.
    """
    if axis not in ("d", "n"):
        raise ValueError("axis must be 'd' or 'n'")
    if len(sizes) < 2:
        raise ValueError("need at least two sizes to fit a slope")
    seeds = cfg.trials if seeds is None else seeds
    rows = []
    for method in ("qdp", "qnp"):
        counts, charged = [], []
        for size in sizes:
            c_run, b_run = [], []
            sub = replace(cfg, t_total=T, ref_iters=None, **{axis: int(size)})
            sub.s_star = min(sub.s_star, sub.d)
            for trial in range(seeds):
                ds, gt = trial_data(sub, trial)
                out = run_cell(sub, method, cfg.epsilon, trial, ds, gt)
                if out.row.status != "ok":
                    raise RuntimeError(f"{method} at {axis}={size} ended with {out.row.status}: {out.error}")
                c_run.append(out.report.ledger.counts["OAlpha"])
                b_run.append(out.report.ledger.charged_budget)
            counts.append(float(np.mean(c_run)))
            charged.append(float(np.mean(b_run)))
        slope = loglog_slope(sizes, counts)
        for size, c, b in zip(sizes, counts, charged):
            rows.append({
                "axis": axis, "method": method, "size": int(size), "mean_queries_alpha": c,
                "mean_charged_budget": b, "measured_slope": slope,
                "predicted_exponent": PREDICTED_EXPONENT[(axis, method)],
            })
    for name in ("opt_c", "cdp", "opt_q"):
        vals = []
        for size in sizes:
            n, d = (cfg.n, size) if axis == "d" else (size, cfg.d)
            vals.append(theoretical_costs(n, d, T, cfg.varsigma, cfg.epsilon, cfg.delta).as_dict()[name])
        slope = loglog_slope(sizes, vals)
        for size, v in zip(sizes, vals):
            rows.append({
                "axis": axis, "method": f"ref_{name}", "size": int(size), "mean_queries_alpha": math.nan,
                "mean_charged_budget": float(v), "measured_slope": slope,
                "predicted_exponent": PREDICTED_EXPONENT[(axis, name)],
            })
    return rows


# --- audit -----------------------------------------------------------------

AUDIT_COLUMNS = ["pair_id", "max_ratio", "bound", "margin"]


def run_audit(
    cfg: ExperimentConfig,
    pairs: int = 20,
    family: Optional[NeighborFamily] = None,
) -> tuple[list[dict], dict]:
    """Per-step privacy audit of both selectors on the toy neighbor family.

    The ``qdp`` selector is checked exactly on every pair; the Laplace
    selector on ``pairs`` sampled pairs. Returns the CSV rows and the
    calibrated constants.
    """
    fam = toy_family() if family is None else family
    n = fam.n
    # data-dependent curvature modes make no sense across a whole family
    cf = float(cfg.curvature) if not isinstance(cfg.curvature, str) else 1.0
    T = cfg.t_total if cfg.t_total is not None else choose_T(cfg.epsilon, cfg.delta, n, cf)
    lam = calibrate_lambda(cfg.epsilon, cfg.delta, T, n)
    eps_step = step_epsilon(cfg.epsilon, T, cfg.delta, cfg.composition)
    ident = NeighborFamily(fam.xs, fam.ys, [[0, 0]], "identical")

    rows = []

    def add(pair_id, ratio, bound):
        rows.append({"pair_id": pair_id, "max_ratio": float(ratio), "bound": float(bound), "margin": float(bound - ratio)})

    q_all = audit_dp("qdp", fam, lam=lam, seed=cfg.seed)
    q_id = audit_dp("qdp", ident, lam=lam, seed=cfg.seed)
    add("qdp:all", q_all.max_ratio, q_all.bound)
    add("qdp:identical", q_id.max_ratio, q_id.bound)
    worst = np.argsort(-q_all.pair_ratios, kind="stable")[:pairs]
    for i in worst:
        a, b = fam.pairs[i]
        add(f"qdp:{a}-{b}", q_all.pair_ratios[i], q_all.bound)

    c_all = audit_dp("cdp", fam, eps_step=eps_step, max_pairs=pairs, seed=cfg.seed)
    c_id = audit_dp("cdp", ident, eps_step=eps_step, seed=cfg.seed)
    add("cdp:sampled", c_all.max_ratio, c_all.bound)
    add("cdp:identical", c_id.max_ratio, c_id.bound)
    info = {
        "T": T, "lambda": lam, "eps_step": eps_step, "n": n,
        "qdp_pairs": q_all.pairs_checked, "cdp_pairs": c_all.pairs_checked,
        "max_sensitivity": q_all.max_sensitivity,
    }
    return rows, info
