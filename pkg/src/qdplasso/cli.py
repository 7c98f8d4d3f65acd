"""Command line: ``qdplasso gen|fit|sweep|scaling|audit``."""

from __future__ import annotations

import argparse
import os
import sys
import time
from typing import Optional, Sequence

from qdplasso.dataset import (
    NormMode,
    generate_synthetic,
    load_dataset,
    load_ground_truth,
    normalize,
    save_dataset,
    save_ground_truth,
)
from qdplasso.errors import QDPLassoError
from qdplasso.experiments import (
    AUDIT_COLUMNS,
    METHODS,
    SCALING_COLUMNS,
    ExperimentConfig,
    run_audit,
    run_cell,
    run_scaling,
    run_sweep,
    trial_data,
    write_results,
    write_rows,
    write_sweep,
)

# flags that take no value; a config line ``allow-abort = true`` turns them on
BOOL_KEYS = {"allow-abort", "no-timing"}


def _float_list(text: str) -> list[float]:
    try:
        vals = [float(v) for v in text.replace(";", ",").split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None
    if not vals:
        raise argparse.ArgumentTypeError("empty list")
    return vals


def _int_list(text: str) -> list[int]:
    vals = _float_list(text)
    if any(v != int(v) or v < 1 for v in vals):
        raise argparse.ArgumentTypeError(f"expected positive integers, got {text!r}")
    return [int(v) for v in vals]


def _method_list(text: str) -> list[str]:
    if text in ("both", "all"):
        return ["qdp", "cdp"]
    vals = [v.strip() for v in text.split(",") if v.strip()]
    bad = [v for v in vals if v not in METHODS]
    if bad or not vals:
        raise argparse.ArgumentTypeError(f"unknown method(s) {bad or text!r}")
    return vals


def _curvature(text: str):
    if text in ("upper", "exact"):
        return text
    try:
        return float(text)
    except ValueError:
        raise argparse.ArgumentTypeError("curvature must be 'upper', 'exact' or a number") from None


def read_config(path: str) -> list[str]:
    """Turn a flat ``key = value`` file into command-line tokens."""
    tokens = []
    with open(path) as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"{path}:{lineno}: expected key = value")
            key, value = (p.strip() for p in line.split("=", 1))
            key = key.replace("_", "-").lstrip("-")
            if key == "config":
                raise ValueError(f"{path}:{lineno}: nested config files are not supported")
            if key in BOOL_KEYS:
                if value.lower() in ("1", "true", "yes", "on"):
                    tokens.append(f"--{key}")
            else:
                tokens += [f"--{key}", value]
    return tokens


def _io(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="flat key = value file; command-line flags take precedence")
    p.add_argument("--seed", type=int, default=0, help="master seed")
    p.add_argument("--out", default="out", help="output directory")


def _common(p: argparse.ArgumentParser, n: int, d: int) -> None:
    _io(p)
    p.add_argument("--n", type=int, default=n, help="number of samples")
    p.add_argument("--d", type=int, default=d, help="number of features")
    p.add_argument("--s-star", type=int, default=10, help="support size of the true coefficients")
    p.add_argument("--noise-std", type=float, default=0.0, help="label noise of generated data")
    p.add_argument("--norm", default="Frobenius", help="Raw, InfNorm or Frobenius")


def _privacy(p: argparse.ArgumentParser) -> None:
    p.add_argument("--delta", type=float, default=1e-5, help="privacy slack")
    p.add_argument("--varsigma", type=float, default=0.01, help="additive oracle error")
    p.add_argument("--b", type=float, default=0.01, help="half the oracle failure probability")
    p.add_argument("--t-total", type=int, default=None, help="fix the number of iterates")
    p.add_argument("--curvature", type=_curvature, default=1.0,
                   help="curvature used to choose T: a number, 'upper' or 'exact'")
    p.add_argument("--composition", choices=["paper", "full", "basic"], default="paper",
                   help="composition rule of the Laplace baseline")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="qdplasso", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="generate a synthetic dataset and its ground truth")
    _common(p, 400, 1000)

    p = sub.add_parser("fit", help="run one fit")
    _common(p, 100, 500)
    _privacy(p)
    p.add_argument("--method", choices=METHODS, default="qdp", help="solver to run")
    p.add_argument("--eps", type=float, default=1.0, help="privacy budget")
    p.add_argument("--data", help="dataset file written by 'gen' (otherwise data is generated)")
    p.add_argument("--truth", help="ground-truth file for the reconstruction error")
    p.add_argument("--ref-iters", type=int, default=100_000, help="reference run length, 0 to skip")
    p.add_argument("--minfind-mode", choices=["stochastic", "classical"], default="stochastic",
                   help="run model of the simulated minimum finding")
    p.add_argument("--allow-abort", action="store_true", help="exit 0 on gate aborts")
    p.add_argument("--no-timing", action="store_true", help="write wall_ms = 0")

    p = sub.add_parser("sweep", help="epsilon sweep of the private methods")
    _common(p, 100, 500)
    _privacy(p)
    p.add_argument("--method", type=_method_list, default=["qdp", "cdp"],
                   help="qdp, cdp, or a comma list (default both)")
    p.add_argument("--eps-grid", type=_float_list, default=[0.1, 0.55, 1.0], help="comma list of budgets")
    p.add_argument("--trials", type=int, default=10, help="datasets per budget")
    p.add_argument("--ref-iters", type=int, default=100_000, help="reference run length, 0 to skip")
    p.add_argument("--allow-abort", action="store_true", help="exit 0 when cells abort")
    p.add_argument("--no-timing", action="store_true", help="write wall_ms = 0 for byte-stable output")

    p = sub.add_parser("scaling", help="oracle counts of qdp and qnp versus d or N")
    _common(p, 100, 500)
    _privacy(p)
    p.add_argument("--eps", type=float, default=1.0, help="privacy budget of qdp")
    p.add_argument("--axis", choices=["d", "n"], default="d", help="dimension that grows")
    p.add_argument("--sizes", type=_int_list, default=[64, 256, 1024], help="comma list of sizes")
    p.add_argument("--trials", type=int, default=5, help="seeds averaged per size")

    p = sub.add_parser("audit", help="per-step privacy audit on a toy neighbor family")
    _io(p)
    _privacy(p)
    p.add_argument("--eps", type=float, default=1.0, help="privacy budget that sets T and lambda")
    p.add_argument("--pairs", type=int, default=20, help="pairs listed (qdp) and audited (Laplace)")
    return parser


def parse_args(argv: Optional[Sequence[str]] = None) -> argparse.Namespace:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    args = parser.parse_args(argv)
    if getattr(args, "config", None):
        # config values go first so explicit flags override them
        args = parser.parse_args([argv[0], *read_config(args.config), *argv[1:]])
    return args


def _config(args, **extra) -> ExperimentConfig:
    methods = extra.pop("methods", ("qdp", "cdp"))
    return ExperimentConfig(
        method=extra.pop("method", "qdp"),
        methods=tuple(methods),
        n=getattr(args, "n", 100),
        d=getattr(args, "d", 500),
        s_star=getattr(args, "s_star", 10),
        noise_std=getattr(args, "noise_std", 0.0),
        epsilon=getattr(args, "eps", 1.0),
        epsilon_grid=tuple(getattr(args, "eps_grid", (0.1, 0.55, 1.0))),
        delta=getattr(args, "delta", 1e-5),
        varsigma=getattr(args, "varsigma", 0.01),
        b=getattr(args, "b", 0.01),
        trials=getattr(args, "trials", 1),
        seed=args.seed,
        norm_mode=NormMode.parse(getattr(args, "norm", "Frobenius")),
        output_dir=args.out,
        t_total=getattr(args, "t_total", None),
        curvature=getattr(args, "curvature", 1.0),
        ref_iters=getattr(args, "ref_iters", None) or None,
        composition=getattr(args, "composition", "paper"),
        minfind_mode=getattr(args, "minfind_mode", "stochastic"),
        timing=not getattr(args, "no_timing", False),
        **extra,
    )


def cmd_gen(args) -> int:
    cfg = _config(args)
    ds, gt = generate_synthetic(cfg.n, cfg.d, cfg.s_star, cfg.seed, cfg.noise_std)
    ds, gt = normalize(ds, gt, cfg.norm_mode)
    os.makedirs(cfg.output_dir, exist_ok=True)
    data_path = os.path.join(cfg.output_dir, "dataset.csv")
    truth_path = os.path.join(cfg.output_dir, "truth.csv")
    save_dataset(ds, data_path)
    save_ground_truth(gt, truth_path)
    print(
        f"wrote {data_path} ({ds.n}x{ds.d}, {ds.norm_mode.value}) and {truth_path} "
        f"(s*={gt.sparsity}) fingerprint={ds.fingerprint()[:12]}"
    )
    return 0


def cmd_fit(args) -> int:
    cfg = _config(args, method=args.method, methods=(args.method,))
    if args.data:
        ds = load_dataset(args.data)
        gt = load_ground_truth(args.truth) if args.truth else None
    else:
        ds, gt = trial_data(cfg, 0)
    out = run_cell(cfg, args.method, cfg.epsilon, 0, ds, gt, seed=cfg.seed)
    os.makedirs(cfg.output_dir, exist_ok=True)
    write_results(os.path.join(cfg.output_dir, "results.csv"), [out.row])
    if out.error is not None:
        print(f"{args.method}: {out.row.status}: {out.error}", file=sys.stderr)
        return 0 if args.allow_abort else 2
    if out.report.ledger is not None:
        out.report.ledger.to_csv(os.path.join(cfg.output_dir, "ledger.csv"))
    if out.trace is not None:
        out.trace.to_csv(os.path.join(cfg.output_dir, "trace.csv"))
    r = out.row
    line = f"{args.method}: T={r.t_total} recon_error={r.recon_error:.6g} excess_risk={r.excess_risk:.6g}"
    if out.params is not None:
        line += f" lambda={out.params.lam:.6g} eps_step={out.params.eps_step:.6g}"
    if out.report.ledger is not None:
        line += f" queries_alpha={r.queries_alpha} charged={out.report.ledger.charged_budget:.6g}"
    print(line)
    return 0


def cmd_sweep(args) -> int:
    cfg = _config(args, methods=args.method)
    start = time.perf_counter()
    rows = run_sweep(cfg)
    paths = write_sweep(cfg, rows)
    aborted = sum(r.status != "ok" for r in rows)
    print(
        f"{len(rows)} cells ({aborted} aborted) in {time.perf_counter() - start:.1f}s; "
        f"wrote {', '.join(paths.values())}"
    )
    return 0 if aborted == 0 or args.allow_abort else 1


def cmd_scaling(args) -> int:
    cfg = _config(args)
    T = args.t_total or 10
    rows = run_scaling(cfg, args.sizes, args.axis, T=T, seeds=args.trials)
    os.makedirs(cfg.output_dir, exist_ok=True)
    path = os.path.join(cfg.output_dir, "scaling.csv")
    write_rows(path, SCALING_COLUMNS, rows)
    seen = set()
    for r in rows:
        if r["method"] not in seen:
            seen.add(r["method"])
            print(f"{r['method']:>10}: slope {r['measured_slope']:+.3f} (predicted {r['predicted_exponent']:+.1f})")
    print(f"wrote {path}")
    return 0


def cmd_audit(args) -> int:
    cfg = _config(args)
    rows, info = run_audit(cfg, pairs=args.pairs)
    os.makedirs(cfg.output_dir, exist_ok=True)
    path = os.path.join(cfg.output_dir, "audit.csv")
    write_rows(path, AUDIT_COLUMNS, rows)
    qdp_ok = all(r["margin"] >= -1e-9 for r in rows if r["pair_id"].startswith("qdp:"))
    print(
        f"lambda={info['lambda']:.6g} T={info['T']} qdp pairs={info['qdp_pairs']} "
        f"max sensitivity={info['max_sensitivity']:.4g} (bound {4 / info['n']:.4g}); "
        f"qdp bound {'holds' if qdp_ok else 'VIOLATED'}; wrote {path}"
    )
    return 0 if qdp_ok else 1


COMMANDS = {"gen": cmd_gen, "fit": cmd_fit, "sweep": cmd_sweep, "scaling": cmd_scaling, "audit": cmd_audit}


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except (QDPLassoError, ValueError, OSError) as exc:
        print(f"qdplasso {args.command}: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
