"""Estimating the number of factors from first-stage residuals.

The workflow mirrors common practice: estimate the panel coefficients with a
generous factor count ``r_max``, form the residuals before any factor
removal, and hand their scaled Gram spectrum to a battery of criteria:

* the IC/PC information criteria and the BIC3 variant of
  Bai and Ng (2002, Econometrica 70, 191-221),
* the eigenvalue-ratio (ER) and growth-ratio (GR) statistics of
  Ahn and Horenstein (2013, Econometrica 81, 1203-1227), admitting a zero
  choice through their mock zeroth eigenvalue, and
* the eigenvalue-differences criterion of Onatski (2010, REStat 92,
  1004-1016), whose threshold is calibrated by an iterative regression on
  the eigenvalue edge.

A log scree table of the same spectrum supports eyeballing the cutoff.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .errors import RMaxTooLarge
from .estimator import EstimatorConfig, estimate
from .panel import PanelDataset

CRITERIA = ("IC1", "IC2", "IC3", "PC1", "PC2", "PC3", "BIC3", "ER", "GR", "ED")

# Number of edge eigenvalues in each threshold regression and the cap on
# calibration sweeps for the eigenvalue-differences criterion.
_ED_WINDOW = 5
_ED_MAX_ITERATIONS = 4


@dataclass(frozen=True)
class SelectionReport:
    """Per-criterion factor-count choices plus the spectrum they were based on.

    ``eigenvalues`` are those of u'u/(NT), sorted descending.
    ``per_r_values`` maps each criterion to its value at every candidate
    count 0..r_max (NaN where a ratio criterion is undefined). A choice at
    the ``r_max`` boundary is flagged as unreliable.
    """

    r_max: int
    eigenvalues: np.ndarray
    per_criterion_choice: dict[str, int]
    per_r_values: dict[str, np.ndarray]
    log_scree: np.ndarray
    boundary: dict[str, bool] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "r_max": self.r_max,
            "eigenvalues": self.eigenvalues.tolist(),
            "log_scree": self.log_scree.tolist(),
            "per_criterion_choice": dict(self.per_criterion_choice),
            "per_r_values": {
                name: [None if np.isnan(v) else float(v) for v in vals]
                for name, vals in self.per_r_values.items()
            },
            "boundary": dict(self.boundary),
        }


def first_stage_residuals(
    data: PanelDataset, r_max: int, config: EstimatorConfig | None = None
) -> np.ndarray:
    """Residuals of the coefficient fit with ``r_max`` factors.

    The fitted factor structure is *not* subtracted: the returned matrix is
    the outcome net of the regression part only, so its spectrum still
    contains the factors to be counted. With ``K = 0`` this is the outcome
    itself.
    """
    if r_max >= min(data.n_units, data.n_periods):
        raise RMaxTooLarge(
            f"r_max={r_max} must be below min(N,T)={min(data.n_units, data.n_periods)}"
        )
    if data.n_regressors == 0:
        return data.outcome.copy()
    if config is None:
        config = EstimatorConfig(n_factors=r_max)
    else:
        config = config.with_factors(r_max)
    fit = estimate(data, config)
    resid = data.outcome - np.einsum(
        "k,kit->it", fit.beta_hat, np.stack(data.regressors)
    )
    return resid


def residual_spectrum(u_hat: np.ndarray) -> np.ndarray:
    """Descending eigenvalues of u'u/(NT), from the smaller Gram side."""
    u = np.asarray(u_hat, dtype=float)
    n, t_len = u.shape
    gram = u @ u.T if n <= t_len else u.T @ u
    vals = np.linalg.eigvalsh(gram)[::-1] / (n * t_len)
    return np.maximum(vals, 0.0)


def select_factors(
    u_hat: np.ndarray,
    r_max: int,
    criteria: tuple[str, ...] = CRITERIA,
) -> SelectionReport:
    """Run the requested criteria on the residual spectrum.

    Raises
    ------
    RMaxTooLarge
        If ``r_max`` does not leave room below min(N,T); the
        eigenvalue-differences criterion additionally needs ``r_max + 5``
        eigenvalues for its threshold calibration.
    """
    u = np.asarray(u_hat, dtype=float)
    n, t_len = u.shape
    m = min(n, t_len)
    criteria = tuple(criteria)
    for name in criteria:
        if name not in CRITERIA:
            raise ValueError(f"unknown criterion {name!r}")
    if r_max < 1 or r_max >= m:
        raise RMaxTooLarge(f"r_max={r_max} must satisfy 1 <= r_max < min(N,T)={m}")
    if "ED" in criteria and r_max + _ED_WINDOW > m:
        raise RMaxTooLarge(
            f"the ED criterion needs r_max + {_ED_WINDOW} <= min(N,T) "
            f"eigenvalues for threshold calibration; got r_max={r_max}, min(N,T)={m}"
        )

    mu = residual_spectrum(u)
    grid = np.arange(r_max + 1)
    # v[k] = sum of eigenvalues below the top k = average squared residual
    # after removing k principal components.
    tail = np.concatenate([np.cumsum(mu[::-1])[::-1], [0.0]])

    def v(k: int) -> float:
        return float(tail[k])

    sigma_bar2 = v(r_max)
    nt = n * t_len
    penalties = {
        "1": (n + t_len) / nt * np.log(nt / (n + t_len)),
        "2": (n + t_len) / nt * np.log(m),
        "3": np.log(m) / m,
    }

    values: dict[str, np.ndarray] = {}
    choices: dict[str, int] = {}
    boundary: dict[str, bool] = {}

    def record(name: str, vals: np.ndarray, maximize: bool = False) -> None:
        values[name] = vals
        finite = np.where(np.isfinite(vals), vals, -np.inf if maximize else np.inf)
        pick = int(np.argmax(finite) if maximize else np.argmin(finite))
        choices[name] = pick
        boundary[name] = pick == r_max

    for j in ("1", "2", "3"):
        if f"IC{j}" in criteria:
            with np.errstate(divide="ignore"):
                vals = np.array(
                    [np.log(v(k)) + k * penalties[j] for k in grid]
                )
            record(f"IC{j}", vals)
        if f"PC{j}" in criteria:
            vals = np.array([v(k) + k * sigma_bar2 * penalties[j] for k in grid])
            record(f"PC{j}", vals)
    if "BIC3" in criteria:
        vals = np.array(
            [
                v(k) + k * sigma_bar2 * (n + t_len - k) * np.log(nt) / nt
                for k in grid
            ]
        )
        record("BIC3", vals)

    if "ER" in criteria or "GR" in criteria:
        mock = float(np.sum(mu)) / np.log(m)
        if "ER" in criteria:
            vals = np.array(
                [
                    _safe_ratio(mock if k == 0 else mu[k - 1], mu[k])
                    for k in grid
                ]
            )
            record("ER", vals, maximize=True)
        if "GR" in criteria:
            vals = np.empty(r_max + 1)
            for k in grid:
                v_prev = v(0) + mock if k == 0 else v(k - 1)
                num = _safe_log_ratio(v_prev, v(k))
                den = _safe_log_ratio(v(k), v(k + 1))
                ok = np.isfinite(num) and np.isfinite(den) and den != 0.0
                vals[k] = num / den if ok else np.nan
            record("GR", vals, maximize=True)

    if "ED" in criteria:
        ed_choice, delta = _eigenvalue_differences(mu, r_max)
        diffs = np.empty(r_max + 1)
        diffs[0] = np.nan
        diffs[1:] = mu[:r_max] - mu[1 : r_max + 1]
        values["ED"] = diffs
        choices["ED"] = ed_choice
        boundary["ED"] = ed_choice == r_max

    with np.errstate(divide="ignore"):
        log_scree = np.log(mu)
    return SelectionReport(
        r_max=r_max,
        eigenvalues=mu,
        per_criterion_choice=choices,
        per_r_values=values,
        log_scree=log_scree,
        boundary=boundary,
    )


def _safe_ratio(a: float, b: float) -> float:
    if b <= 0:
        return np.nan
    return a / b


def _safe_log_ratio(a: float, b: float) -> float:
    if a <= 0 or b <= 0:
        return np.nan
    return float(np.log(a / b))


def _eigenvalue_differences(mu: np.ndarray, r_max: int) -> tuple[int, float]:
    """Largest k with an eigenvalue drop above a calibrated threshold.

    The threshold is twice the absolute slope of a regression of the five
    eigenvalues at the spectrum edge on (j-1)^{2/3}, re-anchored at the
    previous choice for up to four sweeps (Onatski 2010).
    """
    j = r_max + 1
    choice = 0
    delta = np.inf
    for _ in range(_ED_MAX_ITERATIONS):
        window = mu[j - 1 : j - 1 + _ED_WINDOW]
        x = (np.arange(j - 1, j - 1 + _ED_WINDOW)) ** (2.0 / 3.0)
        slope = np.polyfit(x, window, 1)[0]
        delta = 2.0 * abs(float(slope))
        gaps = mu[:r_max] - mu[1 : r_max + 1]
        above = np.nonzero(gaps >= delta)[0]
        new_choice = int(above[-1] + 1) if above.size else 0
        if new_choice == choice:
            break
        choice = new_choice
        j = choice + 1
    return choice, delta


def emit_scree(u_hat: np.ndarray, path) -> None:
    """Write the sorted residual spectrum as rank/eigenvalue/log CSV."""
    mu = residual_spectrum(u_hat)
    with np.errstate(divide="ignore"):
        logs = np.log(mu)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["rank", "eigenvalue", "log_eigenvalue"])
        for i, (val, lg) in enumerate(zip(mu, logs), start=1):
            writer.writerow([i, f"{val:.17g}", f"{lg:.17g}"])
