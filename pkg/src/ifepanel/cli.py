"""Command-line interface binding the library into reproducible batch runs.

Four subcommands: ``estimate`` (CSV in, coefficient/inference report out),
``select`` (factor-count criteria plus scree output), ``simulate`` (Monte
Carlo designs), and ``verify-expansion`` (quadratic-approximation
diagnostics). Every run is deterministic given its configuration and seed;
reports embed the package version, the seed, and a hash of the resolved
configuration. Options can come from a flat ``key = value`` text file via
``--config``, with command-line flags taking precedence.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import sys

import numpy as np

from . import __version__
from .errors import (
    BandwidthOutOfRange,
    DegenerateProjection,
    DegreesOfFreedomExhausted,
    DuplicateCell,
    IfePanelError,
    InvalidSpec,
    NearSingularW,
    NonNumericCell,
    NotSymmetric,
    RankArgumentOutOfRange,
    RankDeficientStructure,
    RMaxTooLarge,
    SingularFactorGram,
    UnbalancedPanel,
    UnsupportedOrder,
)
from .estimator import EstimatorConfig, estimate, parse_scheme
from .expansion import (
    analytic_directional_derivatives,
    compute_expansion_objects,
    directional_derivatives_fd,
    quadratic_approx,
    remainder_scaling_study,
    strong_factor_instance,
)
from .inference import KernelSpec, run_inference
from .panel import ProjectionSpec, load_csv, project_additive_effects
from .selection import first_stage_residuals, emit_scree, select_factors
from .simulation import (
    DgpSpec,
    mc_bias_sd_table,
    mc_quantile_table,
    run_experiment,
)

EXIT_OK = 0
EXIT_VALIDATION = 2
EXIT_NUMERICAL = 3

_VALIDATION_ERRORS = (
    InvalidSpec,
    UnbalancedPanel,
    NonNumericCell,
    DuplicateCell,
    RMaxTooLarge,
    BandwidthOutOfRange,
    RankArgumentOutOfRange,
    DegenerateProjection,
    UnsupportedOrder,
    ValueError,
    FileNotFoundError,
)
_NUMERICAL_ERRORS = (
    NearSingularW,
    DegreesOfFreedomExhausted,
    SingularFactorGram,
    RankDeficientStructure,
    NotSymmetric,
)


def read_config_file(path) -> dict[str, str]:
    """Parse a flat ``key = value`` document; '#' starts a comment line."""
    values: dict[str, str] = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ValueError(f"{path}:{lineno}: expected 'key = value', got {raw!r}")
            key, _, value = line.partition("=")
            values[key.strip().replace("-", "_")] = value.strip()
    return values


def _merge_config(args: argparse.Namespace, keys: tuple[str, ...]) -> dict:
    """File values overridden by explicitly supplied flags."""
    merged: dict = {}
    if getattr(args, "config", None):
        file_values = read_config_file(args.config)
        unknown = set(file_values) - set(keys)
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        merged.update(file_values)
    for key in keys:
        value = getattr(args, key, None)
        if value is not None:
            merged[key] = value
    return merged


def _as_int(cfg: dict, key: str, default=None):
    if key not in cfg or cfg[key] is None:
        return default
    return int(cfg[key])


def _as_float(cfg: dict, key: str, default=None):
    if key not in cfg or cfg[key] is None:
        return default
    return float(cfg[key])


def _as_bool(cfg: dict, key: str, default=False):
    value = cfg.get(key, default)
    if isinstance(value, bool):
        return value
    return str(value).strip().lower() in ("1", "true", "yes", "on")


def _as_list(value) -> list[str]:
    if value is None:
        return []
    if isinstance(value, (list, tuple)):
        return [str(v) for v in value]
    return [part.strip() for part in str(value).split(",") if part.strip()]


def config_hash(resolved: dict) -> str:
    canonical = json.dumps(resolved, sort_keys=True, default=str)
    return hashlib.sha256(canonical.encode()).hexdigest()[:16]


def _provenance(command: str, resolved: dict, seed: int) -> dict:
    return {
        "command": command,
        "version": __version__,
        "seed": seed,
        "config_hash": config_hash(resolved),
        "config": resolved,
    }


def _write_json(path, payload: dict) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _projection_spec(cfg: dict) -> ProjectionSpec:
    parts = set(_as_list(cfg.get("project")))
    unknown = parts - {"unit", "trend", "trend2", "time"}
    if unknown:
        raise ValueError(f"unknown projection parts: {sorted(unknown)}")
    return ProjectionSpec(
        sweep_unit_intercepts="unit" in parts or "trend" in parts or "trend2" in parts,
        sweep_unit_linear_trends="trend" in parts or "trend2" in parts,
        sweep_unit_quadratic_trends="trend2" in parts,
        sweep_time_effects="time" in parts,
        lag_outcome_first=_as_bool(cfg, "lag_outcome"),
    )


def _estimator_config(cfg: dict, n_factors: int) -> EstimatorConfig:
    return EstimatorConfig(
        n_factors=n_factors,
        scheme=parse_scheme(cfg.get("scheme", "hybrid")),
        tol_objective=_as_float(cfg, "tol", 1e-10),
        max_iterations=_as_int(cfg, "max_iter", 1000),
        n_random_starts=_as_int(cfg, "starts", 10),
        seed=_as_int(cfg, "seed", 0),
    )


def _r_list(cfg: dict) -> list[int]:
    if cfg.get("r_list") is not None:
        return [int(v) for v in _as_list(cfg["r_list"])]
    if cfg.get("r") is not None:
        return [int(cfg["r"])]
    raise ValueError("one of --r or --r-list is required")


_ESTIMATE_KEYS = (
    "input",
    "output",
    "r",
    "r_list",
    "scheme",
    "starts",
    "tol",
    "max_iter",
    "bandwidth",
    "seed",
    "project",
    "lag_outcome",
    "format",
)


def cmd_estimate(args: argparse.Namespace) -> int:
    cfg = _merge_config(args, _ESTIMATE_KEYS)
    if not cfg.get("input") or not cfg.get("output"):
        raise ValueError("--input and --output are required")
    r_list = _r_list(cfg)
    seed = _as_int(cfg, "seed", 0)
    kernel = KernelSpec(bandwidth=_as_int(cfg, "bandwidth", 2))
    data = load_csv(cfg["input"])
    spec = _projection_spec(cfg)
    projected, eff = project_additive_effects(data, spec)

    results = []
    for r in sorted(set(r_list)):
        fit = estimate(projected, _estimator_config(cfg, r))
        report = run_inference(
            projected, fit, kernel, n_eff=eff.n_eff, t_eff=eff.t_eff, robust=True
        )
        results.append(
            {
                "n_factors": r,
                "beta_hat": fit.beta_hat.tolist(),
                "beta_bc": report.beta_bc.tolist(),
                "se": report.se.tolist(),
                "t_stats": report.t_stats.tolist(),
                "robust_se": report.robust_se.tolist(),
                "robust_t_stats": report.robust_t_stats.tolist(),
                "sigma2_hat": report.sigma2_hat,
                "w_hat": report.w_hat.tolist(),
                "b_hat": report.b_hat.tolist(),
                "objective": fit.objective,
                "converged": fit.converged,
                "iterations": fit.iterations,
                "start_index": fit.start_index,
            }
        )
    payload = {
        **_provenance("estimate", cfg, seed),
        "n_units": projected.n_units,
        "n_periods": projected.n_periods,
        "effective_n": eff.n_eff,
        "effective_t": eff.t_eff,
        "bandwidth": kernel.bandwidth,
        "regressor_names": list(projected.regressor_names),
        "results": results,
    }
    if str(cfg.get("format", "json")).lower() == "csv":
        _write_estimate_csv(cfg["output"], payload)
    else:
        _write_json(cfg["output"], payload)
    return EXIT_OK


def _write_estimate_csv(path, payload: dict) -> None:
    names = payload["regressor_names"]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(
            [
                "n_factors",
                "regressor",
                "beta_hat",
                "beta_bc",
                "se",
                "t_stat",
                "robust_se",
                "robust_t_stat",
            ]
        )
        for block in payload["results"]:
            for j, name in enumerate(names):
                writer.writerow(
                    [
                        block["n_factors"],
                        name,
                        block["beta_hat"][j],
                        block["beta_bc"][j],
                        block["se"][j],
                        block["t_stats"][j],
                        block["robust_se"][j],
                        block["robust_t_stats"][j],
                    ]
                )


_SELECT_KEYS = (
    "input",
    "output",
    "scree_output",
    "r_max",
    "scheme",
    "starts",
    "tol",
    "max_iter",
    "seed",
    "project",
    "lag_outcome",
)


def cmd_select(args: argparse.Namespace) -> int:
    cfg = _merge_config(args, _SELECT_KEYS)
    if not cfg.get("input") or not cfg.get("output"):
        raise ValueError("--input and --output are required")
    r_max = _as_int(cfg, "r_max")
    if r_max is None:
        raise ValueError("--r-max is required")
    seed = _as_int(cfg, "seed", 0)
    data = load_csv(cfg["input"])
    projected, _ = project_additive_effects(data, _projection_spec(cfg))
    residuals = first_stage_residuals(
        projected, r_max, _estimator_config(cfg, r_max)
    )
    report = select_factors(residuals, r_max)
    scree_path = cfg.get("scree_output") or str(cfg["output"]) + ".scree.csv"
    emit_scree(residuals, scree_path)
    payload = {
        **_provenance("select", cfg, seed),
        "n_units": projected.n_units,
        "n_periods": projected.n_periods,
        "scree_path": str(scree_path),
        **report.to_dict(),
    }
    _write_json(cfg["output"], payload)
    return EXIT_OK


_SIMULATE_KEYS = (
    "output",
    "dgp",
    "n",
    "t",
    "r0",
    "beta0",
    "r_list",
    "r",
    "reps",
    "scheme",
    "starts",
    "tol",
    "max_iter",
    "bandwidth",
    "seed",
    "parallelism",
    "counter_a",
    "counter_c",
    "format",
)

_DGP_ALIASES = {
    "static": "STATIC_MA1_T5",
    "ar1": "AR1_FACTORS",
    "counter-example": "COUNTER_EXAMPLE",
    "counter": "COUNTER_EXAMPLE",
    "noiseless": "NOISELESS",
}


def cmd_simulate(args: argparse.Namespace) -> int:
    cfg = _merge_config(args, _SIMULATE_KEYS)
    if not cfg.get("output"):
        raise ValueError("--output is required")
    kind = _DGP_ALIASES.get(str(cfg.get("dgp", "static")).lower())
    if kind is None:
        raise ValueError(
            f"unknown DGP {cfg.get('dgp')!r}; choose from {sorted(_DGP_ALIASES)}"
        )
    n = _as_int(cfg, "n")
    t_len = _as_int(cfg, "t")
    if n is None or t_len is None:
        raise ValueError("--n and --t are required")
    beta0 = tuple(float(v) for v in _as_list(cfg.get("beta0", "1.0")))
    spec = DgpSpec(
        kind=kind,
        n_units=n,
        n_periods=t_len,
        beta0=beta0,
        r0=_as_int(cfg, "r0", 2),
        counter_a=_as_float(cfg, "counter_a", 0.25),
        counter_c=_as_float(cfg, "counter_c", 63.0),
    )
    seed = _as_int(cfg, "seed", 0)
    reps = _as_int(cfg, "reps", 500)
    estimator_config = EstimatorConfig(
        n_factors=0,
        scheme=parse_scheme(cfg.get("scheme", "hybrid")),
        tol_objective=_as_float(cfg, "tol", 1e-9),
        max_iterations=_as_int(cfg, "max_iter", 500),
        n_random_starts=_as_int(cfg, "starts", 2),
        seed=seed,
    )
    result = run_experiment(
        spec,
        r_list=_r_list(cfg),
        repetitions=reps,
        estimator_config=estimator_config,
        kernel=KernelSpec(bandwidth=_as_int(cfg, "bandwidth", 2)),
        seed=seed,
        parallelism=_as_int(cfg, "parallelism", 1),
    )
    prefix = str(cfg["output"])
    payload = {**_provenance("simulate", cfg, seed), **result.to_dict()}
    _write_json(prefix + ".json", payload)
    for name, rows in (
        ("bias_sd", mc_bias_sd_table(result)),
        ("quantiles", mc_quantile_table(result)),
    ):
        with open(f"{prefix}_{name}.csv", "w", newline="", encoding="utf-8") as fh:
            csv.writer(fh).writerows(rows)
    return EXIT_OK


_VERIFY_KEYS = (
    "output",
    "n",
    "t",
    "k",
    "r0",
    "seed",
    "doublings",
    "instances",
    "error_scale",
    "fd_tolerance",
)


def cmd_verify_expansion(args: argparse.Namespace) -> int:
    cfg = _merge_config(args, _VERIFY_KEYS)
    if not cfg.get("output"):
        raise ValueError("--output is required")
    n = _as_int(cfg, "n", 24)
    t_len = _as_int(cfg, "t", 20)
    k = _as_int(cfg, "k", 1)
    r0 = _as_int(cfg, "r0", 2)
    seed = _as_int(cfg, "seed", 0)
    n_instances = _as_int(cfg, "instances", 5)
    error_scale = _as_float(cfg, "error_scale", 1e-6)
    fd_tol = _as_float(cfg, "fd_tolerance", 1e-4)

    fd_rows = []
    rng = np.random.default_rng(seed)
    for idx in range(n_instances):
        struct, data = strong_factor_instance(
            n, t_len, k, r0, seed + idx, error_scale
        )
        direction = rng.normal(size=k)
        direction /= np.linalg.norm(direction)
        d2_fd, d3_fd = directional_derivatives_fd(struct, data, direction)
        d2_an, d3_an = analytic_directional_derivatives(struct, data, direction)
        rel2 = abs(d2_fd - d2_an) / max(abs(d2_an), 1e-300)
        rel3 = abs(d3_fd - d3_an) / max(abs(d3_an), 1e-300)
        objects = compute_expansion_objects(struct, data)
        _, center_remainder = quadratic_approx(
            struct, data, struct.beta0, objects=objects
        )
        fd_rows.append(
            {
                "instance": idx,
                "center_remainder": center_remainder,
                "d2_fd": d2_fd,
                "d2_series": d2_an,
                "d2_rel_error": rel2,
                "d2_pass": bool(rel2 <= fd_tol),
                "d3_fd": d3_fd,
                "d3_series": d3_an,
                "d3_rel_error": rel3,
                "d3_pass": bool(rel3 <= fd_tol),
                "convergence_radius": objects.r0_radius,
            }
        )
    scaling = remainder_scaling_study(
        base_n=n,
        base_t=t_len,
        n_doublings=_as_int(cfg, "doublings", 2),
        n_regressors=k,
        r0=r0,
        seeds=range(seed, seed + n_instances),
        error_scale=error_scale,
    )
    payload = {
        **_provenance("verify-expansion", cfg, seed),
        "fd_checks": fd_rows,
        "remainder_scaling": [
            {
                "seed": row["seed"],
                "sizes": [list(s) for s in row["sizes"]],
                "sup_normalized_remainder": row["sup_normalized_remainder"],
                "ratios": [
                    None if np.isnan(r) else float(r) for r in row["ratios"]
                ],
            }
            for row in scaling
        ],
        "all_fd_pass": all(r["d2_pass"] and r["d3_pass"] for r in fd_rows),
    }
    _write_json(cfg["output"], payload)
    print(
        "fd checks: "
        + ("all pass" if payload["all_fd_pass"] else "FAILURES PRESENT")
    )
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ifepanel",
        description="Panel regression with interactive fixed effects",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p: argparse.ArgumentParser) -> None:
        p.add_argument("--config", help="flat key = value configuration file")
        p.add_argument("--seed", type=int, help="master random seed (default 0)")

    p_est = sub.add_parser("estimate", help="estimate coefficients from a CSV panel")
    add_common(p_est)
    p_est.add_argument("--input", help="long-format CSV: unit_id,time_id,y,x1..xK")
    p_est.add_argument("--output", help="report path")
    p_est.add_argument("--r", type=int, help="number of factors")
    p_est.add_argument("--r-list", dest="r_list", help="comma list of factor counts")
    p_est.add_argument("--scheme", help="1|2|3|hybrid or full scheme name")
    p_est.add_argument("--starts", type=int, help="number of random starts")
    p_est.add_argument("--tol", type=float, help="relative objective tolerance")
    p_est.add_argument("--max-iter", dest="max_iter", type=int)
    p_est.add_argument("--bandwidth", type=int, help="bias truncation bandwidth M")
    p_est.add_argument(
        "--project", help="comma list of additive effects: unit,trend,trend2,time"
    )
    p_est.add_argument(
        "--lag-outcome",
        dest="lag_outcome",
        action="store_const",
        const=True,
        help="prepend the lagged outcome as a regressor before projecting",
    )
    p_est.add_argument("--format", choices=("json", "csv"), help="report format")
    p_est.set_defaults(func=cmd_estimate)

    p_sel = sub.add_parser("select", help="estimate the number of factors")
    add_common(p_sel)
    p_sel.add_argument("--input")
    p_sel.add_argument("--output")
    p_sel.add_argument("--scree-output", dest="scree_output")
    p_sel.add_argument("--r-max", dest="r_max", type=int)
    p_sel.add_argument("--scheme")
    p_sel.add_argument("--starts", type=int)
    p_sel.add_argument("--tol", type=float)
    p_sel.add_argument("--max-iter", dest="max_iter", type=int)
    p_sel.add_argument("--project")
    p_sel.add_argument(
        "--lag-outcome", dest="lag_outcome", action="store_const", const=True
    )
    p_sel.set_defaults(func=cmd_select)

    p_sim = sub.add_parser("simulate", help="run a Monte Carlo design")
    add_common(p_sim)
    p_sim.add_argument("--output", help="output path prefix")
    p_sim.add_argument(
        "--dgp", help="static | ar1 | counter-example | noiseless"
    )
    p_sim.add_argument("--n", type=int)
    p_sim.add_argument("--t", type=int)
    p_sim.add_argument("--r0", type=int, help="true number of factors")
    p_sim.add_argument("--beta0", help="comma list of true coefficients")
    p_sim.add_argument("--r", type=int)
    p_sim.add_argument("--r-list", dest="r_list")
    p_sim.add_argument("--reps", type=int)
    p_sim.add_argument("--scheme")
    p_sim.add_argument("--starts", type=int)
    p_sim.add_argument("--tol", type=float)
    p_sim.add_argument("--max-iter", dest="max_iter", type=int)
    p_sim.add_argument("--bandwidth", type=int)
    p_sim.add_argument("--parallelism", type=int, help="worker processes")
    p_sim.add_argument("--counter-a", dest="counter_a", type=float)
    p_sim.add_argument("--counter-c", dest="counter_c", type=float)
    p_sim.set_defaults(func=cmd_simulate)

    p_ver = sub.add_parser(
        "verify-expansion", help="quadratic-approximation diagnostics"
    )
    add_common(p_ver)
    p_ver.add_argument("--output")
    p_ver.add_argument("--n", type=int)
    p_ver.add_argument("--t", type=int)
    p_ver.add_argument("--k", type=int, help="number of regressors")
    p_ver.add_argument("--r0", type=int)
    p_ver.add_argument("--doublings", type=int)
    p_ver.add_argument("--instances", type=int)
    p_ver.add_argument(
        "--error-scale", dest="error_scale", type=float, help="0 for noiseless"
    )
    p_ver.add_argument("--fd-tolerance", dest="fd_tolerance", type=float)
    p_ver.set_defaults(func=cmd_verify_expansion)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except _NUMERICAL_ERRORS as exc:
        _emit_error(exc)
        return EXIT_NUMERICAL
    except _VALIDATION_ERRORS as exc:
        _emit_error(exc)
        return EXIT_VALIDATION
    except IfePanelError as exc:
        _emit_error(exc)
        return EXIT_NUMERICAL


def _emit_error(exc: Exception) -> None:
    print(json.dumps({"error": type(exc).__name__, "message": str(exc)}), file=sys.stderr)


if __name__ == "__main__":
    sys.exit(main())
