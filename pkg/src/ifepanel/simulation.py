"""Data-generating processes and the Monte Carlo experiment engine.

Four built-in designs plus a user-supplied one:

``STATIC_MA1_T5``
    Static panel with one regressor correlated with the factor structure,
    MA(1) errors built from Student-t(5) innovations (error variance 5/3).
``AR1_FACTORS``
    Dynamic panel whose regressor is the lagged outcome; the factors follow
    an AR(1), and both recursions warm up over a burn-in window so initial
    conditions match the stationary law.
``COUNTER_EXAMPLE``
    A design whose error second-moment structure shares a fixed rank-one
    direction with the regressor; with one extra factor in the estimation
    the coefficient converges at the slower sqrt(N) rate while pooled OLS
    keeps the sqrt(NT) rate.
``NOISELESS``
    The static design without errors; the estimator recovers the truth
    exactly, which anchors the harness end to end.
``CUSTOM``
    Fixed user-supplied loadings, factors, coefficients and regressors with
    scaled MA(1)-t(5) errors (the pattern used to mirror an estimated
    model).

Repetition streams are keyed by (seed, repetition index), so results are
bit-identical across runs and worker counts.
"""

from __future__ import annotations

import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np
import scipy.stats

from .errors import InvalidSpec
from .estimator import EstimatorConfig, FactorFit, estimate
from .expansion import TrueStructure
from .inference import KernelSpec, run_inference
from .panel import PanelDataset

DGP_KINDS = ("STATIC_MA1_T5", "AR1_FACTORS", "COUNTER_EXAMPLE", "NOISELESS", "CUSTOM")

QUANTILE_LEVELS = (0.01, 0.05, 0.10, 0.25, 0.50, 0.75, 0.90, 0.95, 0.99)

_BURN_IN = 100


@dataclass(frozen=True)
class CustomComponents:
    """Fixed structure for the CUSTOM design; only the errors are redrawn."""

    lambda0: np.ndarray
    f0: np.ndarray
    regressors: tuple[np.ndarray, ...]
    error_scale: float = 0.1


@dataclass(frozen=True)
class DgpSpec:
    """Declarative simulation design.

    ``beta0`` fixes both the truth and (through its length) the number of
    regressors. Counter-example parameters must satisfy the design's
    constraints given the aspect ratio sqrt(N/T): ``a`` below
    (1/2)^(2/3) min(kappa^2, kappa^-2) and ``c`` at least
    (2+sqrt(2))(1+kappa)(1+sqrt(3) a^(-1/4)) over
    min(1,kappa)(1/2 - a^(3/2) max(kappa, 1/kappa)).
    """

    kind: str
    n_units: int
    n_periods: int
    beta0: tuple[float, ...] = (1.0,)
    r0: int = 2
    factor_ar: float = 0.5
    burn_in: int = _BURN_IN
    counter_a: float = 0.25
    counter_c: float = 63.0
    custom: CustomComponents | None = None

    def __post_init__(self):
        if self.kind not in DGP_KINDS:
            raise InvalidSpec(f"unknown DGP kind {self.kind!r}; valid: {DGP_KINDS}")
        if self.n_units < 2 or self.n_periods < 2:
            raise InvalidSpec("panel dimensions must be at least 2")
        if self.r0 < 0:
            raise InvalidSpec("r0 must be nonnegative")
        object.__setattr__(
            self, "beta0", tuple(float(b) for b in np.atleast_1d(self.beta0))
        )
        if self.kind == "AR1_FACTORS":
            if len(self.beta0) != 1:
                raise InvalidSpec("the AR(1) design has a single coefficient")
            if abs(self.beta0[0]) >= 1:
                raise InvalidSpec("the autoregressive coefficient must satisfy |b| < 1")
        if self.kind == "COUNTER_EXAMPLE":
            if len(self.beta0) != 1:
                raise InvalidSpec("the counter-example has a single regressor")
            kappa = self.kappa
            a, c = self.counter_a, self.counter_c
            a_bound = 0.5 ** (2.0 / 3.0) * min(kappa**2, kappa**-2)
            if not 0 < a < a_bound:
                raise InvalidSpec(
                    f"counter_a={a} outside (0, {a_bound:.4f}) for kappa={kappa:.3f}"
                )
            denom = min(1.0, kappa) * (0.5 - a**1.5 * max(kappa, 1.0 / kappa))
            if denom <= 0:
                raise InvalidSpec("counter_a too large: the c lower bound diverges")
            c_min = (2 + np.sqrt(2)) * (1 + kappa) * (1 + np.sqrt(3) * a**-0.25) / denom
            if c < c_min:
                raise InvalidSpec(f"counter_c={c} below the lower bound {c_min:.3f}")
        if self.kind == "CUSTOM":
            if self.custom is None:
                raise InvalidSpec("CUSTOM requires a CustomComponents payload")
            lam = np.asarray(self.custom.lambda0, dtype=float)
            f = np.asarray(self.custom.f0, dtype=float)
            if lam.shape[0] != self.n_units or f.shape[0] != self.n_periods:
                raise InvalidSpec("custom structure does not match the panel sizes")
            if len(self.custom.regressors) != len(self.beta0):
                raise InvalidSpec("custom regressor count does not match beta0")

    @property
    def n_regressors(self) -> int:
        return len(self.beta0)

    @property
    def kappa(self) -> float:
        return float(np.sqrt(self.n_units / self.n_periods))


@dataclass(frozen=True)
class PerRStats:
    """Aggregates over repetitions for one estimation factor count."""

    n_factors: int
    bias: np.ndarray
    sd: np.ndarray
    rmse: np.ndarray
    bias_bc: np.ndarray
    sd_bc: np.ndarray
    quantiles: np.ndarray  # (len(QUANTILE_LEVELS), K) of sqrt(NT)(beta - beta0)
    size: float
    sigma2_mean: float
    n_failed: int

    def to_dict(self) -> dict:
        return {
            "n_factors": self.n_factors,
            "bias": self.bias.tolist(),
            "sd": self.sd.tolist(),
            "rmse": self.rmse.tolist(),
            "bias_bc": self.bias_bc.tolist(),
            "sd_bc": self.sd_bc.tolist(),
            "quantile_levels": list(QUANTILE_LEVELS),
            "quantiles": self.quantiles.tolist(),
            "size": self.size,
            "sigma2_mean": self.sigma2_mean,
            "n_failed": self.n_failed,
        }


@dataclass(frozen=True)
class McResult:
    """Monte Carlo summary: one ``PerRStats`` block per estimation rank."""

    spec: DgpSpec
    repetitions: int
    seed: int
    per_r: dict[int, PerRStats]
    elapsed_seconds: float
    draws: dict[int, np.ndarray] = field(repr=False, default_factory=dict)
    draws_bc: dict[int, np.ndarray] = field(repr=False, default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "kind": self.spec.kind,
            "n_units": self.spec.n_units,
            "n_periods": self.spec.n_periods,
            "beta0": list(self.spec.beta0),
            "r0": self.spec.r0,
            "repetitions": self.repetitions,
            "seed": self.seed,
            "elapsed_seconds": self.elapsed_seconds,
            "per_r": {str(r): stats.to_dict() for r, stats in self.per_r.items()},
        }


def _rep_rng(seed: int, repetition_index: int) -> np.random.Generator:
    return np.random.default_rng(
        np.random.SeedSequence(entropy=seed, spawn_key=(repetition_index,))
    )


def _student_t5(rng: np.random.Generator, shape) -> np.ndarray:
    """t(5) draws as normal over root mean chi-square (6 normals per draw)."""
    z = rng.standard_normal((6, *shape))
    return z[0] / np.sqrt(np.sum(z[1:] ** 2, axis=0) / 5.0)


def _static_like(
    spec: DgpSpec, rng: np.random.Generator, noiseless: bool
) -> tuple[PanelDataset, TrueStructure]:
    n, t_len, r0, k = spec.n_units, spec.n_periods, spec.r0, spec.n_regressors
    burn = spec.burn_in
    lam = rng.normal(1.0, 1.0, (n, r0))
    chi = rng.normal(1.0, 1.0, (k, n, r0))
    f_full = rng.normal(0.0, 1.0, (burn + t_len, r0))
    f = f_full[-t_len:]
    f_lag = f_full[-t_len - 1 : -1]
    f_sum = (f + f_lag).T  # r0 x T
    xs = []
    for j in range(k):
        x = 1.0 + rng.normal(0.0, 1.0, (n, t_len)) + (lam + chi[j]) @ f_sum
        xs.append(x)
    if noiseless:
        e = np.zeros((n, t_len))
    else:
        v = _student_t5(rng, (n, burn + t_len))
        e = (v[:, -t_len:] + v[:, -t_len - 1 : -1]) / np.sqrt(2.0)
    beta0 = np.asarray(spec.beta0)
    y = lam @ f.T + e
    for b, x in zip(beta0, xs):
        y = y + b * x
    data = PanelDataset(outcome=y, regressors=tuple(xs))
    struct = TrueStructure(lambda0=lam, f0=f, beta0=beta0, error_matrix=e)
    return data, struct


def _ar1(spec: DgpSpec, rng: np.random.Generator) -> tuple[PanelDataset, TrueStructure]:
    n, t_len, r0 = spec.n_units, spec.n_periods, spec.r0
    burn = spec.burn_in
    rho = spec.beta0[0]
    phi = spec.factor_ar
    total = burn + t_len + 1
    lam = rng.normal(1.0, 1.0, (n, r0))
    eps = rng.normal(0.0, 1.0, (total, r0)) / np.sqrt(1.0 - phi**2)
    f_full = np.empty((total, r0))
    prev_f = np.zeros(r0)
    for t in range(total):
        prev_f = phi * prev_f + eps[t]
        f_full[t] = prev_f
    e_full = rng.normal(0.0, 1.0, (n, total))
    y_full = np.empty((n, total))
    prev_y = np.zeros(n)
    for t in range(total):
        prev_y = rho * prev_y + lam @ f_full[t] + e_full[:, t]
        y_full[:, t] = prev_y
    data = PanelDataset(
        outcome=y_full[:, -t_len:],
        regressors=(y_full[:, -t_len - 1 : -1],),
        regressor_names=("y_lag1",),
    )
    struct = TrueStructure(
        lambda0=lam,
        f0=f_full[-t_len:],
        beta0=np.asarray(spec.beta0),
        error_matrix=e_full[:, -t_len:],
    )
    return data, struct


def _counter_example(
    spec: DgpSpec, rng: np.random.Generator
) -> tuple[PanelDataset, TrueStructure]:
    n, t_len = spec.n_units, spec.n_periods
    a, c = spec.counter_a, spec.counter_c
    half_width = np.sqrt(3.0)
    lam_x = rng.uniform(-half_width, half_width, n)
    f_x = rng.uniform(-half_width, half_width, t_len)
    x = a * rng.normal(0.0, 1.0, (n, t_len)) + np.outer(lam_x, f_x)
    u = rng.normal(0.0, 1.0, (n, t_len))
    # (I + c lam lam'/N) u (I + c f f'/T), expanded to rank-one updates
    e = u.copy()
    e += (c / n) * np.outer(lam_x, lam_x @ u)
    e += (c / t_len) * np.outer(u @ f_x, f_x)
    e += (c * c / (n * t_len)) * (lam_x @ u @ f_x) * np.outer(lam_x, f_x)
    y = spec.beta0[0] * x + e
    data = PanelDataset(outcome=y, regressors=(x,))
    struct = TrueStructure(
        lambda0=np.empty((n, 0)),
        f0=np.empty((t_len, 0)),
        beta0=np.asarray(spec.beta0),
        error_matrix=e,
    )
    return data, struct


def _custom(spec: DgpSpec, rng: np.random.Generator) -> tuple[PanelDataset, TrueStructure]:
    comp = spec.custom
    n, t_len = spec.n_units, spec.n_periods
    v = _student_t5(rng, (n, t_len + 1))
    e = comp.error_scale * (v[:, 1:] + v[:, :-1])
    beta0 = np.asarray(spec.beta0)
    lam = np.asarray(comp.lambda0, dtype=float)
    f = np.asarray(comp.f0, dtype=float)
    y = lam @ f.T + e
    for b, x in zip(beta0, comp.regressors):
        y = y + b * np.asarray(x, dtype=float)
    data = PanelDataset(outcome=y, regressors=tuple(comp.regressors))
    struct = TrueStructure(lambda0=lam, f0=f, beta0=beta0, error_matrix=e)
    return data, struct


def generate(
    spec: DgpSpec, seed: int, repetition_index: int
) -> tuple[PanelDataset, TrueStructure]:
    """Draw one repetition of the design, deterministically from the keys."""
    rng = _rep_rng(seed, repetition_index)
    if spec.kind == "STATIC_MA1_T5":
        return _static_like(spec, rng, noiseless=False)
    if spec.kind == "NOISELESS":
        return _static_like(spec, rng, noiseless=True)
    if spec.kind == "AR1_FACTORS":
        return _ar1(spec, rng)
    if spec.kind == "COUNTER_EXAMPLE":
        return _counter_example(spec, rng)
    return _custom(spec, rng)


def _default_mc_estimator_config() -> EstimatorConfig:
    # Two random starts on top of the OLS start keep desk-scale runs fast;
    # raise n_random_starts for production-grade tables.
    return EstimatorConfig(
        n_factors=0, tol_objective=1e-9, max_iterations=500, n_random_starts=2
    )


def _one_repetition(args):
    (spec, seed, rep, r_list, config, kernel, critical) = args
    data, struct = generate(spec, seed, rep)
    beta0 = np.asarray(spec.beta0)
    k = len(beta0)
    out = {}
    for r in r_list:
        try:
            fit = estimate(data, config.with_factors(r))
            report = run_inference(data, fit, kernel, hypothesis=beta0, robust=True)
            t_stats = (
                report.robust_t_stats
                if report.robust_t_stats is not None
                else report.t_stats
            )
            # Per-coefficient rejection rate of the true-value test.
            reject = float(np.mean(np.abs(t_stats) > critical))
            out[r] = (fit.beta_hat, report.beta_bc, reject, report.sigma2_hat, None)
        except Exception as exc:  # noqa: BLE001 - recorded, not fatal
            out[r] = (
                np.full(k, np.nan),
                np.full(k, np.nan),
                0.0,
                np.nan,
                f"{type(exc).__name__}: {exc}",
            )
    return rep, out


def run_experiment(
    spec: DgpSpec,
    r_list,
    repetitions: int,
    estimator_config: EstimatorConfig | None = None,
    kernel: KernelSpec = KernelSpec(),
    seed: int = 0,
    parallelism: int = 1,
    nominal_size: float = 0.05,
    keep_draws: bool = False,
) -> McResult:
    """Run the design over many repetitions and aggregate per factor count.

    Each repetition draws a fresh panel, estimates it at every count in
    ``r_list`` and runs inference; the 5 percent (by default) two-sided
    t-test of the true coefficients uses the bias-corrected estimate with
    serial-correlation robust standard errors. Failed repetitions are
    counted and excluded rather than fatal. Aggregation is independent of
    the worker schedule because repetition streams are keyed by index.

    ``keep_draws`` retains the per-repetition coefficient draws (needed for
    paired comparisons across factor counts).
    """
    if repetitions < 1:
        raise InvalidSpec("repetitions must be at least 1")
    r_list = sorted(int(r) for r in r_list)
    config = estimator_config or _default_mc_estimator_config()
    critical = float(scipy.stats.norm.ppf(1.0 - nominal_size / 2.0))
    beta0 = np.asarray(spec.beta0)
    k = len(beta0)
    nt = spec.n_units * spec.n_periods

    started = time.perf_counter()
    tasks = [
        (spec, seed, rep, r_list, config, kernel, critical)
        for rep in range(repetitions)
    ]
    raw: dict[int, np.ndarray] = {
        r: np.full((repetitions, k), np.nan) for r in r_list
    }
    raw_bc = {r: np.full((repetitions, k), np.nan) for r in r_list}
    rejects = {r: np.zeros(repetitions) for r in r_list}
    sigma2 = {r: np.full(repetitions, np.nan) for r in r_list}
    failures = {r: 0 for r in r_list}

    if parallelism > 1:
        with ProcessPoolExecutor(max_workers=parallelism) as pool:
            results = pool.map(_one_repetition, tasks, chunksize=8)
            for rep, out in results:
                _store(rep, out, r_list, raw, raw_bc, rejects, sigma2, failures)
    else:
        for task in tasks:
            rep, out = _one_repetition(task)
            _store(rep, out, r_list, raw, raw_bc, rejects, sigma2, failures)

    per_r = {}
    for r in r_list:
        draws = raw[r]
        ok = ~np.isnan(draws[:, 0])
        good = draws[ok]
        good_bc = raw_bc[r][ok]
        n_ok = max(int(ok.sum()), 1)
        scaled = np.sqrt(nt) * (good - beta0)
        per_r[r] = PerRStats(
            n_factors=r,
            bias=good.mean(axis=0) - beta0,
            sd=good.std(axis=0, ddof=1) if len(good) > 1 else np.zeros(k),
            rmse=np.sqrt(np.mean((good - beta0) ** 2, axis=0)),
            bias_bc=good_bc.mean(axis=0) - beta0,
            sd_bc=good_bc.std(axis=0, ddof=1) if len(good_bc) > 1 else np.zeros(k),
            quantiles=np.quantile(scaled, QUANTILE_LEVELS, axis=0),
            size=float(rejects[r][ok].sum() / n_ok),
            sigma2_mean=float(np.nanmean(sigma2[r][ok])) if ok.any() else np.nan,
            n_failed=failures[r],
        )
    elapsed = time.perf_counter() - started
    return McResult(
        spec=spec,
        repetitions=repetitions,
        seed=seed,
        per_r=per_r,
        elapsed_seconds=elapsed,
        draws=raw if keep_draws else {},
        draws_bc=raw_bc if keep_draws else {},
    )


def _store(rep, out, r_list, raw, raw_bc, rejects, sigma2, failures):
    for r in r_list:
        beta, beta_bc, reject, s2, err = out[r]
        if err is not None:
            failures[r] += 1
            continue
        raw[r][rep] = beta
        raw_bc[r][rep] = beta_bc
        rejects[r][rep] = reject
        sigma2[r][rep] = s2


def mc_bias_sd_table(result: McResult) -> list[list]:
    """Rows (N, T, statistic) by columns R, mirroring the usual table layout."""
    r_list = sorted(result.per_r)
    header = ["n_units", "n_periods", "statistic", *[f"r{r}" for r in r_list]]
    rows = [header]
    k = len(result.spec.beta0)
    for stat in ("bias", "sd", "rmse", "bias_bc", "sd_bc"):
        for j in range(k):
            label = stat if k == 1 else f"{stat}_x{j + 1}"
            rows.append(
                [
                    result.spec.n_units,
                    result.spec.n_periods,
                    label,
                    *[float(getattr(result.per_r[r], stat)[j]) for r in r_list],
                ]
            )
    rows.append(
        [
            result.spec.n_units,
            result.spec.n_periods,
            "size",
            *[result.per_r[r].size for r in r_list],
        ]
    )
    return rows


def mc_quantile_table(result: McResult) -> list[list]:
    """Quantiles of sqrt(NT)(estimate - truth): rows per level, columns R."""
    r_list = sorted(result.per_r)
    k = len(result.spec.beta0)
    header = ["quantile", "coefficient", *[f"r{r}" for r in r_list]]
    rows = [header]
    for i, level in enumerate(QUANTILE_LEVELS):
        for j in range(k):
            rows.append(
                [
                    level,
                    j + 1,
                    *[float(result.per_r[r].quantiles[i, j]) for r in r_list],
                ]
            )
    return rows
