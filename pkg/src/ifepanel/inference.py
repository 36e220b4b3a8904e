"""Variance and bias estimation and t-tests for the interactive-effects estimator.

The estimator carries an incidental-parameter bias of order 1/T when
regressors are predetermined (the generalization of the classic
within-estimator bias in dynamic panels). The bias estimate sums
factor-projector weights against forward residual-regressor cross moments
inside a truncation window of ``bandwidth`` leads and feeds the additive
correction ``beta + W^{-1} B / T``. Standard errors come from the
homoskedastic formula by default, with an optional sandwich variant robust
to heteroskedasticity and serial correlation within the same truncation
window.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import BandwidthOutOfRange, DegreesOfFreedomExhausted, NearSingularW
from .estimator import FactorFit
from .linalg import projector_onto
from .panel import PanelDataset

# Eigenvalue ratio below which W is treated as numerically singular.
_W_CUTOFF = 1e-10


@dataclass(frozen=True)
class KernelSpec:
    """Truncation kernel: weight one inside the bandwidth window, zero outside."""

    bandwidth: int = 2

    def __post_init__(self):
        if self.bandwidth < 1:
            raise ValueError("bandwidth must be at least 1")


@dataclass(frozen=True)
class InferenceReport:
    """Inference summary for one fit.

    ``beta_bc`` is the bias-corrected estimate; ``se``/``t_stats`` use the
    homoskedastic variance, and the robust (sandwich) counterparts are
    present when requested. ``dof`` records the effective sample sizes used
    for the degree-of-freedom corrections.
    """

    sigma2_hat: float
    w_hat: np.ndarray
    b_hat: np.ndarray
    beta_bc: np.ndarray
    se: np.ndarray
    t_stats: np.ndarray
    bandwidth: int
    dof: tuple[int, int]
    robust_se: np.ndarray | None = None
    robust_t_stats: np.ndarray | None = None


def sigma2_hat(fit: FactorFit, n_regressors: int, n_eff: int, t_eff: int) -> float:
    """Error-variance estimate with degree-of-freedom correction.

    Divides the sum of squared residuals by ``(N-R)(T-R) - K`` evaluated at
    the effective sample sizes (which differ from the matrix dimensions when
    additive effects were projected out first).
    """
    r = fit.n_factors
    dof = (n_eff - r) * (t_eff - r) - n_regressors
    if dof <= 0:
        raise DegreesOfFreedomExhausted(
            f"(N_eff-R)(T_eff-R)-K = ({n_eff}-{r})({t_eff}-{r})-{n_regressors} <= 0"
        )
    return float(np.sum(fit.residuals**2)) / dof


def _projected_regressors(data: PanelDataset, fit: FactorFit) -> list[np.ndarray]:
    """M_L X_k M_F for every regressor, via skinny factor blocks."""
    ql = _orthobasis(fit.loadings)
    qf = _orthobasis(fit.factors)
    out = []
    for x in data.regressors:
        z = x - ql @ (ql.T @ x)
        z = z - (z @ qf) @ qf.T
        out.append(z)
    return out


def _orthobasis(a: np.ndarray) -> np.ndarray:
    if a.shape[1] == 0:
        return a
    q, r = np.linalg.qr(a)
    diag = np.abs(np.diag(r))
    keep = diag > 1e-12 * max(diag.max(), 1e-300)
    return q[:, keep]


def w_hat(data: PanelDataset, fit: FactorFit) -> np.ndarray:
    """Hessian-type K x K matrix (1/NT) Tr(M_L X_k1 M_F X_k2').

    Built as the Gram matrix of the doubly projected regressors, so it is
    symmetric positive semidefinite by construction and depends on the
    factor blocks only through their column spans.
    """
    k = data.n_regressors
    nt = data.n_units * data.n_periods
    projected = _projected_regressors(data, fit)
    w = np.empty((k, k))
    for i in range(k):
        for j in range(i, k):
            w[i, j] = w[j, i] = np.vdot(projected[i], projected[j]) / nt
    return w


def b_hat(data: PanelDataset, fit: FactorFit, kernel: KernelSpec) -> np.ndarray:
    """Bias numerator: one entry per regressor.

    Computed in the truncated-trace form (1/N) Tr[P_F (e'X_k)^trunc], where
    the truncation keeps the strictly forward band of lags 1..bandwidth.
    """
    t_len = data.n_periods
    m = kernel.bandwidth
    if m >= t_len:
        raise BandwidthOutOfRange(f"bandwidth {m} must be smaller than T={t_len}")
    p_f = projector_onto(fit.factors)
    out = np.empty(data.n_regressors)
    for k, x in enumerate(data.regressors):
        cross = fit.residuals.T @ x
        banded = np.triu(cross, 1) - np.triu(cross, m + 1)
        out[k] = np.vdot(p_f, banded.T) / data.n_units
    return out


def bias_corrected(
    fit: FactorFit, w: np.ndarray, b: np.ndarray, t_eff: int
) -> np.ndarray:
    """Bias-corrected coefficients: beta + W^{-1} B / T_eff."""
    return fit.beta_hat + _solve_w(w, b) / t_eff


def _solve_w(w: np.ndarray, rhs: np.ndarray) -> np.ndarray:
    vals = np.linalg.eigvalsh(w)
    if vals[0] <= _W_CUTOFF * vals[-1] or vals[-1] <= 0.0:
        cond = np.inf if vals[0] <= 0 else vals[-1] / vals[0]
        raise NearSingularW(cond)
    return np.linalg.solve(w, rhs)


def w_inverse(w: np.ndarray) -> np.ndarray:
    """Inverse of W, raising ``NearSingularW`` when ill-conditioned."""
    return _solve_w(w, np.eye(w.shape[0]))


def robust_covariance(
    data: PanelDataset, fit: FactorFit, kernel: KernelSpec
) -> np.ndarray:
    """Score covariance for the sandwich variance.

    Scores are the doubly projected regressors times the residuals,
    cross-multiplied within the truncation window over time:
    (1/NT) sum_i sum_{|t-s|<=M} s_it s_is'.
    """
    k = data.n_regressors
    nt = data.n_units * data.n_periods
    m = kernel.bandwidth
    scores = [z * fit.residuals for z in _projected_regressors(data, fit)]
    omega = np.zeros((k, k))
    for i in range(k):
        for j in range(i, k):
            acc = np.vdot(scores[i], scores[j])
            for lag in range(1, min(m, data.n_periods - 1) + 1):
                acc += np.vdot(scores[i][:, :-lag], scores[j][:, lag:])
                acc += np.vdot(scores[i][:, lag:], scores[j][:, :-lag])
            omega[i, j] = omega[j, i] = acc / nt
    return omega


def standard_errors(
    sigma2: float,
    w: np.ndarray,
    n_eff: int,
    t_eff: int,
    beta: np.ndarray,
    hypothesis: np.ndarray | float = 0.0,
    omega: np.ndarray | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Standard errors and t-statistics for ``beta`` against ``hypothesis``.

    The default variance is ``sigma2 * W^{-1} / (N_eff T_eff)``. When the
    score covariance ``omega`` is supplied the sandwich variance
    ``W^{-1} omega W^{-1} / (N_eff T_eff)`` is used instead.
    """
    w_inv = w_inverse(w)
    nt = n_eff * t_eff
    if omega is None:
        variance = sigma2 * np.diag(w_inv) / nt
    else:
        variance = np.diag(w_inv @ omega @ w_inv) / nt
    se = np.sqrt(np.maximum(variance, 0.0))
    diff = beta - np.asarray(hypothesis, dtype=float)
    with np.errstate(divide="ignore", invalid="ignore"):
        t_stats = np.where(se > 0, diff / np.where(se > 0, se, 1.0), np.inf * np.sign(diff))
        t_stats = np.where(diff == 0, 0.0, t_stats)
    return se, t_stats


def run_inference(
    data: PanelDataset,
    fit: FactorFit,
    kernel: KernelSpec = KernelSpec(),
    n_eff: int | None = None,
    t_eff: int | None = None,
    hypothesis: np.ndarray | float = 0.0,
    robust: bool = True,
) -> InferenceReport:
    """Full inference pipeline for one fit.

    ``n_eff``/``t_eff`` default to the matrix dimensions; pass the
    effective sizes recorded by the projection step when the data was
    swept of additive effects first.
    """
    if n_eff is None:
        n_eff = data.n_units
    if t_eff is None:
        t_eff = data.n_periods
    k = data.n_regressors
    s2 = sigma2_hat(fit, k, n_eff, t_eff)
    w = w_hat(data, fit)
    b = b_hat(data, fit, kernel)
    beta_bc = bias_corrected(fit, w, b, t_eff)
    se, t_stats = standard_errors(s2, w, n_eff, t_eff, beta_bc, hypothesis)
    robust_se = robust_t = None
    if robust:
        omega = robust_covariance(data, fit, kernel)
        robust_se, robust_t = standard_errors(
            s2, w, n_eff, t_eff, beta_bc, hypothesis, omega=omega
        )
    return InferenceReport(
        sigma2_hat=s2,
        w_hat=w,
        b_hat=b,
        beta_bc=beta_bc,
        se=se,
        t_stats=t_stats,
        bandwidth=kernel.bandwidth,
        dof=(n_eff, t_eff),
        robust_se=robust_se,
        robust_t_stats=robust_t,
    )
