"""Least-squares estimation of panel regressions with interactive fixed effects.

The coefficient estimate minimizes the profile objective obtained by
concentrating out the factor loadings and factors: (1/NT) times the sum of
the smallest eigenvalues of the residual Gram matrix, keeping out the top
``R``. Minimization alternates a principal-components step with one of three
closed-form coefficient steps, from several starting values because the
profile objective need not be convex.

The inner loop never touches N x T arrays: all three coefficient steps and
the objective are evaluated from precomputed cross-Gram matrices on the
shorter panel dimension, so each iteration costs one small eigendecomposition
plus O(K^2 T^2) arithmetic.
"""

from __future__ import annotations

import enum
import warnings
from dataclasses import dataclass, replace

import numpy as np

from .errors import NoConvergedStart, RankArgumentOutOfRange, SingularDesign
from .linalg import top_eigenpairs, top_eigenvalues
from .panel import PanelDataset

_EPS = float(np.finfo(float).eps)

# Relative eigenvalue cutoff for pseudo-inverting beta-step normal equations.
_DESIGN_CUTOFF = 1e-12


class IterationScheme(enum.Enum):
    """Alternating schemes; all share the PC step and differ in the beta step.

    ``PC_THEN_PROJECTED_OLS``
        Regress the outcome on the factor-projected regressors ``X_k M_F``.
    ``PC_THEN_RESIDUAL_OLS``
        Regress the outcome net of the fitted factor structure on the raw
        regressors. Like the previous scheme, every step weakly decreases
        the least-squares objective.
    ``PC_THEN_DOUBLY_PROJECTED_OLS``
        Regress on the doubly projected regressors ``M_L X_k M_F``. The step
        minimizes a local approximation of the profile objective, which is
        more accurate near a minimum but may transiently increase the
        least-squares objective.
    ``HYBRID``
        Residual-OLS steps for a warm-up phase, then doubly projected steps;
        combines the robustness of the former with the fast local
        convergence of the latter.
    """

    PC_THEN_PROJECTED_OLS = "projected-ols"
    PC_THEN_RESIDUAL_OLS = "residual-ols"
    PC_THEN_DOUBLY_PROJECTED_OLS = "doubly-projected-ols"
    HYBRID = "hybrid"


_SCHEME_ALIASES = {
    "1": IterationScheme.PC_THEN_PROJECTED_OLS,
    "2": IterationScheme.PC_THEN_RESIDUAL_OLS,
    "3": IterationScheme.PC_THEN_DOUBLY_PROJECTED_OLS,
    "projected-ols": IterationScheme.PC_THEN_PROJECTED_OLS,
    "residual-ols": IterationScheme.PC_THEN_RESIDUAL_OLS,
    "doubly-projected-ols": IterationScheme.PC_THEN_DOUBLY_PROJECTED_OLS,
    "hybrid": IterationScheme.HYBRID,
}


def parse_scheme(name) -> IterationScheme:
    """Resolve a scheme from its enum, value, name, or numeric alias."""
    if isinstance(name, IterationScheme):
        return name
    key = str(name).strip().lower().replace("_", "-")
    if key in _SCHEME_ALIASES:
        return _SCHEME_ALIASES[key]
    try:
        return IterationScheme[str(name).strip().upper()]
    except KeyError:
        raise ValueError(f"unknown iteration scheme {name!r}") from None


@dataclass(frozen=True)
class EstimatorConfig:
    """Settings for :func:`estimate`.

    ``random_start_radius`` is measured in units of the per-coefficient
    pooled-OLS standard error; each random start perturbs the pooled-OLS
    coefficients by that much, uniformly and independently per coefficient.
    """

    n_factors: int
    scheme: IterationScheme = IterationScheme.HYBRID
    tol_objective: float = 1e-10
    max_iterations: int = 1000
    n_random_starts: int = 10
    random_start_radius: float = 1.0
    seed: int = 0
    hybrid_warmup: int = 20

    def __post_init__(self):
        if self.n_factors < 0:
            raise ValueError("n_factors must be nonnegative")
        if self.tol_objective <= 0:
            raise ValueError("tol_objective must be positive")
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be at least 1")
        if self.n_random_starts < 0:
            raise ValueError("n_random_starts must be nonnegative")
        if self.hybrid_warmup < 0:
            raise ValueError("hybrid_warmup must be nonnegative")
        object.__setattr__(self, "scheme", parse_scheme(self.scheme))

    def with_factors(self, n_factors: int) -> "EstimatorConfig":
        return replace(self, n_factors=n_factors)


@dataclass(frozen=True)
class FactorFit:
    """Result of one estimation.

    The factor blocks are normalized so ``F'F/T`` is the identity and
    ``L'L`` is diagonal with non-increasing diagonal; the product ``L F'``
    (and hence residuals and objective) is invariant to this choice.
    ``objective_trace`` records the profile objective at the start of every
    iteration of the winning start.
    """

    beta_hat: np.ndarray
    loadings: np.ndarray
    factors: np.ndarray
    residuals: np.ndarray
    objective: float
    converged: bool
    iterations: int
    start_index: int
    objective_trace: np.ndarray

    @property
    def n_factors(self) -> int:
        return self.factors.shape[1]


def _check_rank_argument(n_factors: int, n: int, t_len: int, strict: bool) -> None:
    bound = min(n, t_len)
    if n_factors < 0 or n_factors > bound or (strict and n_factors == bound):
        rel = "<" if strict else "<="
        raise RankArgumentOutOfRange(
            f"n_factors={n_factors} must satisfy 0 <= n_factors {rel} min(N,T)={bound}"
        )


def profile_objective(data: PanelDataset, beta, n_factors: int) -> float:
    """Profile least-squares objective at ``beta`` with ``n_factors`` factors.

    Equals (1/NT) times the sum of all but the ``n_factors`` largest
    eigenvalues of the residual Gram matrix, computed on the smaller panel
    dimension.
    """
    n, t_len = data.n_units, data.n_periods
    _check_rank_argument(n_factors, n, t_len, strict=False)
    beta = _check_beta(beta, data.n_regressors)
    resid = data.outcome
    if data.n_regressors:
        resid = resid - np.einsum("k,kit->it", beta, np.stack(data.regressors))
    gram = resid @ resid.T if n <= t_len else resid.T @ resid
    if n_factors == 0:
        return float(np.trace(gram)) / (n * t_len)
    top = top_eigenvalues(gram, n_factors)
    return max(float(np.trace(gram)) - float(np.sum(top)), 0.0) / (n * t_len)


def _check_beta(beta, k: int) -> np.ndarray:
    beta = np.atleast_1d(np.asarray(beta, dtype=float))
    if beta.shape != (k,):
        raise ValueError(f"beta must have shape ({k},), got {beta.shape}")
    if k and not np.all(np.isfinite(beta)):
        raise ValueError("beta contains non-finite entries")
    return beta


def principal_components(target, n_factors: int) -> tuple[np.ndarray, np.ndarray]:
    """Best rank-``n_factors`` factorization of ``target`` as loadings x factors'.

    The factors are sqrt(T) times the leading orthonormal eigenvectors of
    the T x T Gram matrix ``target' target`` and the loadings follow as
    ``target F / T``, so ``L F'`` is the best rank-R approximation in the
    Hilbert-Schmidt norm.
    """
    target = np.asarray(target, dtype=float)
    n, t_len = target.shape
    _check_rank_argument(n_factors, n, t_len, strict=False)
    if n_factors == 0:
        return np.empty((n, 0)), np.empty((t_len, 0))
    _, vecs = top_eigenpairs(target.T @ target, n_factors)
    factors = np.sqrt(t_len) * vecs
    loadings = target @ factors / t_len
    return loadings, factors


def _solve_normal_equations(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Solve symmetric PSD normal equations, minimum-norm under rank loss."""
    if a.shape[0] == 0:
        return np.empty(0)
    vals, vecs = np.linalg.eigh(a)
    cutoff = _DESIGN_CUTOFF * max(vals[-1], 0.0)
    keep = vals > cutoff
    if not np.all(keep):
        warnings.warn(
            "beta-step design matrix is singular; using minimum-norm solution",
            SingularDesign,
            stacklevel=3,
        )
    if not np.any(keep):
        return np.zeros_like(b)
    coeff = vecs[:, keep].T @ b / vals[keep]
    return vecs[:, keep] @ coeff


def inner_beta_step(
    data: PanelDataset,
    scheme,
    loadings: np.ndarray | None = None,
    factors: np.ndarray | None = None,
) -> np.ndarray:
    """One closed-form coefficient step given fixed factor blocks.

    Scheme ``PC_THEN_PROJECTED_OLS`` needs ``factors``; the other two need
    both blocks. Each step is the exact minimizer of its own step objective
    (an OLS on the suitably projected, vectorized data). If the projected
    regressors are collinear a ``SingularDesign`` warning is emitted and the
    minimum-norm solution returned.
    """
    scheme = parse_scheme(scheme)
    if scheme is IterationScheme.HYBRID:
        raise ValueError(
            "HYBRID is a driver strategy; pass one of the three basic schemes"
        )
    k = data.n_regressors
    if k == 0:
        return np.empty(0)
    if factors is None:
        raise ValueError("all schemes require the factors block")
    if scheme is not IterationScheme.PC_THEN_PROJECTED_OLS and loadings is None:
        raise ValueError(f"{scheme.name} requires the loadings block")

    y = data.outcome
    xs = data.regressors
    if scheme is IterationScheme.PC_THEN_RESIDUAL_OLS:
        target = y - loadings @ factors.T
        design = xs
    else:
        qf = _orthonormal_columns(factors)
        if scheme is IterationScheme.PC_THEN_PROJECTED_OLS:
            target = y - (y @ qf) @ qf.T
            design = [x - (x @ qf) @ qf.T for x in xs]
        else:
            ql = _orthonormal_columns(loadings)

            def doubly_project(z):
                z = z - ql @ (ql.T @ z)
                return z - (z @ qf) @ qf.T

            target = doubly_project(y)
            design = [doubly_project(x) for x in xs]

    a = np.empty((k, k))
    b = np.empty(k)
    for i in range(k):
        b[i] = np.vdot(design[i], target)
        for j in range(i, k):
            a[i, j] = a[j, i] = np.vdot(design[i], design[j])
    return _solve_normal_equations(a, b)


def _orthonormal_columns(a: np.ndarray) -> np.ndarray:
    if a.shape[1] == 0:
        return a
    q, r = np.linalg.qr(a)
    diag = np.abs(np.diag(r))
    keep = diag > 1e-12 * max(diag.max(), 1e-300)
    return q[:, keep]


def canonicalize_factors(
    loadings: np.ndarray, factors: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Rotate factor blocks to the canonical normalization, keeping L F' fixed.

    Afterwards ``F'F/T`` is the identity and ``L'L`` is diagonal with
    non-increasing entries.
    """
    t_len = factors.shape[0]
    if factors.shape[1] == 0:
        return loadings, factors
    qf, rf = np.linalg.qr(factors)
    lam = loadings @ rf.T
    u, s, wt = np.linalg.svd(lam, full_matrices=False)
    factors_new = np.sqrt(t_len) * (qf @ wt.T)
    loadings_new = u * (s / np.sqrt(t_len))
    return loadings_new, factors_new


class _GramEngine:
    """Alternating minimization on cross-Gram matrices of (Y, X_1..X_K).

    Index 0 refers to the outcome. Grams live on the second (period)
    dimension, so callers transpose the data first when N < T.
    """

    def __init__(self, y: np.ndarray, xs: tuple[np.ndarray, ...]):
        self.n, self.t_len = y.shape
        self.k = len(xs)
        mats = [y, *xs]
        self.gram = {}
        for a in range(self.k + 1):
            for b in range(a, self.k + 1):
                self.gram[a, b] = mats[a].T @ mats[b]
        self.scale = float(np.trace(self.gram[0, 0])) / (self.n * self.t_len)

    def _block(self, a: int, b: int) -> np.ndarray:
        return self.gram[a, b] if a <= b else self.gram[b, a].T

    def residual_gram(self, beta: np.ndarray) -> np.ndarray:
        """(Y - beta.X)'(Y - beta.X), symmetric by construction."""
        s = self.gram[0, 0].copy()
        for k1 in range(self.k):
            c = self.gram[0, k1 + 1]
            s -= beta[k1] * (c + c.T)
            s += beta[k1] ** 2 * self.gram[k1 + 1, k1 + 1]
            for k2 in range(k1 + 1, self.k):
                c12 = self.gram[k1 + 1, k2 + 1]
                s += beta[k1] * beta[k2] * (c12 + c12.T)
        return s

    def cross_gram(self, a: int, beta: np.ndarray) -> np.ndarray:
        """(Y - beta.X)' M_a where M_0 = Y and M_k = X_k."""
        out = self._block(0, a).copy()
        for k1 in range(self.k):
            out -= beta[k1] * self._block(k1 + 1, a)
        return out

    def pooled_ols(self) -> tuple[np.ndarray, np.ndarray]:
        """Pooled OLS coefficients and their homoskedastic standard errors."""
        a = np.empty((self.k, self.k))
        b = np.empty(self.k)
        for i in range(self.k):
            b[i] = np.trace(self.gram[0, i + 1])
            for j in range(i, self.k):
                a[i, j] = a[j, i] = np.trace(self.gram[i + 1, j + 1])
        beta = _solve_normal_equations(a, b)
        nt = self.n * self.t_len
        rss = max(
            float(np.trace(self.gram[0, 0])) - 2 * beta @ b + beta @ a @ beta, 0.0
        )
        dof = max(nt - self.k, 1)
        ainv_diag = np.diag(np.linalg.pinv(a))
        se = np.sqrt(np.maximum(rss / dof * ainv_diag, 0.0))
        return beta, se

    def beta_step(
        self,
        scheme: IterationScheme,
        beta: np.ndarray,
        vecs: np.ndarray,
        vals: np.ndarray,
    ) -> np.ndarray:
        """Coefficient step given the current top eigenpairs of the Gram."""
        k = self.k
        a = np.empty((k, k))
        b = np.empty(k)
        if scheme is IterationScheme.PC_THEN_RESIDUAL_OLS:
            for i in range(k):
                axi = self.cross_gram(i + 1, beta)
                b[i] = np.trace(self.gram[0, i + 1]) - np.einsum(
                    "tr,ts,sr->", vecs, axi, vecs
                )
                for j in range(i, k):
                    a[i, j] = a[j, i] = np.trace(self.gram[i + 1, j + 1])
            return _solve_normal_equations(a, b)

        # Both projected schemes share the factor-side projection.
        for i in range(k):
            b[i] = np.trace(self.gram[0, i + 1]) - np.einsum(
                "tr,ts,sr->", vecs, self._block(0, i + 1), vecs
            )
            for j in range(i, k):
                gij = self._block(i + 1, j + 1)
                a[i, j] = a[j, i] = np.trace(gij) - np.einsum(
                    "tr,ts,sr->", vecs, gij, vecs
                )
        if scheme is IterationScheme.PC_THEN_PROJECTED_OLS:
            return _solve_normal_equations(a, b)

        # Doubly projected: subtract the loadings-side projection, written
        # through the implicit loadings L = A V / sqrt(T) with L'L = diag(vals)/T.
        cutoff = _DESIGN_CUTOFF * max(float(vals[0]) if len(vals) else 0.0, 0.0)
        inv_gram = np.where(vals > cutoff, self.t_len / np.maximum(vals, 1e-300), 0.0)
        cs = []
        for i in range(k):
            ci = self.cross_gram(i + 1, beta).T @ vecs / np.sqrt(self.t_len)
            cs.append((ci, ci - vecs @ (vecs.T @ ci)))
        e0 = self.cross_gram(0, beta).T @ vecs / np.sqrt(self.t_len)
        e0_proj = e0 - vecs @ (vecs.T @ e0)
        for i in range(k):
            ci, _ = cs[i]
            b[i] -= np.einsum("tr,tr,r->", ci, e0_proj, inv_gram)
            for j in range(i, k):
                term = np.einsum("tr,tr,r->", ci, cs[j][1], inv_gram)
                a[i, j] -= term
                a[j, i] = a[i, j]
        return _solve_normal_equations(a, b)


def _run_start(
    engine: _GramEngine,
    beta0: np.ndarray,
    config: EstimatorConfig,
    n_factors: int,
):
    """Alternate PC and beta steps from one starting value."""
    nt = engine.n * engine.t_len
    floor = 100.0 * _EPS**2 * max(engine.scale, 1.0)
    beta = beta0
    s = engine.residual_gram(beta)
    prev_obj = np.inf
    trace = []
    converged = False
    vals = vecs = None
    iterations = 0
    for it in range(1, config.max_iterations + 1):
        iterations = it
        vals, vecs = top_eigenpairs(s, n_factors)
        obj = (float(np.trace(s)) - float(np.sum(vals))) / nt
        obj = max(obj, 0.0)
        trace.append(obj)
        if it > 1 and abs(prev_obj - obj) <= config.tol_objective * abs(prev_obj) + floor:
            converged = True
            break
        prev_obj = obj
        if engine.k == 0:
            converged = True
            break
        if config.scheme is IterationScheme.HYBRID:
            scheme = (
                IterationScheme.PC_THEN_RESIDUAL_OLS
                if it <= config.hybrid_warmup
                else IterationScheme.PC_THEN_DOUBLY_PROJECTED_OLS
            )
        else:
            scheme = config.scheme
        beta = engine.beta_step(scheme, beta, vecs, vals)
        s = engine.residual_gram(beta)
    else:
        # Iteration cap reached: refresh the eigenpairs for the final beta.
        vals, vecs = top_eigenpairs(s, n_factors)
        obj = max((float(np.trace(s)) - float(np.sum(vals))) / nt, 0.0)
        trace.append(obj)
    return beta, vecs, trace[-1], converged, iterations, trace


def estimate(data: PanelDataset, config: EstimatorConfig) -> FactorFit:
    """Minimize the profile objective by multistart alternating least squares.

    Starts from the pooled-OLS coefficients plus ``config.n_random_starts``
    seeded uniform perturbations of them, and returns the fit with the
    smallest profile objective (ties broken by the lowest start index, so
    the result does not depend on evaluation order). With ``K = 0`` the fit
    is a pure principal-components extraction and ``beta_hat`` is empty.

    Emits a ``NoConvergedStart`` warning when no start meets the tolerance
    within the iteration cap; the best fit is still returned with
    ``converged=False``.
    """
    n, t_len = data.n_units, data.n_periods
    r = config.n_factors
    _check_rank_argument(r, n, t_len, strict=True)

    transposed = n < t_len
    work = data.transposed() if transposed else data
    engine = _GramEngine(work.outcome, work.regressors)

    if engine.k == 0:
        starts = [np.empty(0)]
    else:
        beta_ols, se_ols = engine.pooled_ols()
        starts = [beta_ols]
        rng = np.random.default_rng(config.seed)
        for _ in range(config.n_random_starts):
            jitter = rng.uniform(-1.0, 1.0, engine.k)
            starts.append(beta_ols + config.random_start_radius * se_ols * jitter)

    best = None
    any_converged = False
    for idx, start in enumerate(starts):
        beta, vecs, obj, converged, iterations, trace = _run_start(
            engine, start, config, r
        )
        any_converged = any_converged or converged
        if best is None or obj < best[2]:
            best = (beta, vecs, obj, converged, iterations, trace, idx)
    beta, vecs, obj, converged, iterations, trace, start_index = best

    if not any_converged:
        warnings.warn(
            "no start converged within the iteration cap; returning the best fit",
            NoConvergedStart,
            stacklevel=2,
        )

    resid_target = work.outcome
    if engine.k:
        resid_target = resid_target - np.einsum(
            "k,kit->it", beta, np.stack(work.regressors)
        )
    factors = np.sqrt(work.n_periods) * vecs
    loadings = resid_target @ vecs / np.sqrt(work.n_periods)
    residuals = resid_target - loadings @ factors.T
    if transposed:
        loadings, factors = factors, loadings
        residuals = residuals.T
        loadings, factors = canonicalize_factors(loadings, factors)
    return FactorFit(
        beta_hat=beta,
        loadings=loadings,
        factors=factors,
        residuals=residuals,
        objective=float(obj),
        converged=converged,
        iterations=iterations,
        start_index=start_index,
        objective_trace=np.asarray(trace),
    )
