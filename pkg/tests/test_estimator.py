import warnings

import numpy as np
import pytest
from numpy.testing import assert_allclose

from ifepanel.errors import RankArgumentOutOfRange, SingularDesign
from ifepanel.estimator import (
    EstimatorConfig,
    IterationScheme,
    canonicalize_factors,
    estimate,
    inner_beta_step,
    parse_scheme,
    principal_components,
    profile_objective,
)
from ifepanel.linalg import projector_orthogonal
from ifepanel.panel import PanelDataset

SCHEMES = (
    IterationScheme.PC_THEN_PROJECTED_OLS,
    IterationScheme.PC_THEN_RESIDUAL_OLS,
    IterationScheme.PC_THEN_DOUBLY_PROJECTED_OLS,
)


def make_noiseless(seed, n=20, t=15, k=2, r0=2, beta0=(1.5, -0.7)):
    rng = np.random.default_rng(seed)
    lam = rng.normal(1.0, 1.0, (n, r0))
    f = rng.normal(0.0, 1.0, (t, r0))
    xs = tuple(
        rng.normal(0.0, 1.0, (n, t)) + np.outer(lam[:, j % r0], f[:, (j + 1) % r0])
        for j in range(k)
    )
    beta0 = np.asarray(beta0[:k])
    y = lam @ f.T
    for b, x in zip(beta0, xs):
        y = y + b * x
    return PanelDataset(outcome=y, regressors=xs), beta0, lam, f


def make_noisy(seed, n=12, t=12, k=1, r0=1, noise=0.3):
    rng = np.random.default_rng(seed)
    lam = rng.normal(1.0, 1.0, (n, r0))
    f = rng.normal(0.0, 1.0, (t, r0))
    xs = tuple(
        rng.normal(0.0, 1.0, (n, t)) + np.outer(lam[:, 0], f[:, 0]) for _ in range(k)
    )
    beta0 = np.linspace(1.0, 0.5, k)
    e = noise * rng.normal(size=(n, t))
    y = lam @ f.T + e
    for b, x in zip(beta0, xs):
        y = y + b * x
    return PanelDataset(outcome=y, regressors=xs), beta0


# ---------------------------------------------------------------- objective


def test_profile_objective_identity_matrix():
    data = PanelDataset(outcome=np.eye(2))
    assert profile_objective(data, [], 0) == pytest.approx(0.5)


def test_profile_objective_rank_one_annihilated():
    data = PanelDataset(outcome=np.ones((2, 2)))
    assert profile_objective(data, [], 1) == pytest.approx(0.0, abs=1e-15)


def test_profile_objective_diagonal():
    data = PanelDataset(outcome=np.diag([2.0, 1.0]))
    assert profile_objective(data, [], 1) == pytest.approx(0.25)


def test_profile_objective_rank_out_of_range():
    data = PanelDataset(outcome=np.eye(3))
    with pytest.raises(RankArgumentOutOfRange):
        profile_objective(data, [], 4)


def test_profile_objective_monotone_in_rank():
    data, beta0 = make_noisy(0)
    rng = np.random.default_rng(1)
    for _ in range(5):
        beta = beta0 + rng.normal(scale=0.3, size=beta0.shape)
        values = [profile_objective(data, beta, r) for r in range(6)]
        assert all(values[i + 1] <= values[i] + 1e-12 for i in range(5))


@pytest.mark.parametrize("seed", range(10))
def test_profile_objective_equals_pc_minimization(seed):
    # The eigenvalue-sum form equals explicit minimization over the factors.
    rng = np.random.default_rng(seed)
    n, t = int(rng.integers(4, 30)), int(rng.integers(4, 30))
    k = int(rng.integers(0, 4))
    r = int(rng.integers(0, min(4, min(n, t) + 1)))
    data = PanelDataset(
        outcome=rng.normal(size=(n, t)),
        regressors=tuple(rng.normal(size=(n, t)) for _ in range(k)),
    )
    beta = rng.normal(size=k)
    resid = data.outcome
    for b, x in zip(beta, data.regressors):
        resid = resid - b * x
    loadings, factors = principal_components(resid, r)
    explicit = np.sum((resid - loadings @ factors.T) ** 2) / (n * t)
    value = profile_objective(data, beta, r)
    assert value == pytest.approx(explicit, rel=1e-9, abs=1e-12)


# ------------------------------------------------------ principal components


def test_principal_components_exact_low_rank():
    rng = np.random.default_rng(2)
    lam = rng.normal(size=(8, 1))
    f = rng.normal(size=(6, 1))
    target = lam @ f.T
    loadings, factors = principal_components(target, 1)
    assert_allclose(loadings @ factors.T, target, atol=1e-10)


def test_principal_components_zero_rank():
    target = np.ones((4, 3))
    loadings, factors = principal_components(target, 0)
    assert loadings.shape == (4, 0)
    assert factors.shape == (3, 0)


def test_principal_components_matches_svd_oracle():
    rng = np.random.default_rng(3)
    target = rng.normal(size=(6, 4))
    loadings, factors = principal_components(target, 2)
    error = np.sum((target - loadings @ factors.T) ** 2)
    sv = np.linalg.svd(target, compute_uv=False)
    assert error == pytest.approx(np.sum(sv[2:] ** 2), rel=1e-10)
    # normalization contract
    assert_allclose(factors.T @ factors / 4, np.eye(2), atol=1e-10)


# ------------------------------------------------------------- beta steps


def kron_beta_oracle(data, scheme, loadings, factors):
    """Vectorized normal equations with explicit Kronecker projectors."""
    n, t = data.n_units, data.n_periods
    y = data.outcome.T.reshape(-1)  # column-stacked vec(Y)
    m_f = projector_orthogonal(factors) if factors is not None else np.eye(t)
    m_l = projector_orthogonal(loadings) if loadings is not None else np.eye(n)
    # vec(A Z B) = (B' kron A) vec(Z) for column-stacked vec
    if scheme is IterationScheme.PC_THEN_PROJECTED_OLS:
        weight = np.kron(m_f, np.eye(n))
    elif scheme is IterationScheme.PC_THEN_RESIDUAL_OLS:
        weight = np.eye(n * t)
        y = (data.outcome - loadings @ factors.T).T.reshape(-1)
    else:
        weight = np.kron(m_f, m_l)
    x = np.column_stack([xk.T.reshape(-1) for xk in data.regressors])
    xw = weight @ x
    return np.linalg.solve(xw.T @ xw, xw.T @ (weight @ y))


@pytest.mark.parametrize("scheme", SCHEMES)
@pytest.mark.parametrize("seed", range(4))
def test_inner_beta_step_matches_kron_oracle(scheme, seed):
    rng = np.random.default_rng(seed)
    n, t, k, r = 7, 6, 2, 2
    data = PanelDataset(
        outcome=rng.normal(size=(n, t)),
        regressors=tuple(rng.normal(size=(n, t)) for _ in range(k)),
    )
    loadings = rng.normal(size=(n, r))
    factors = rng.normal(size=(t, r))
    step = inner_beta_step(data, scheme, loadings=loadings, factors=factors)
    oracle = kron_beta_oracle(data, scheme, loadings, factors)
    assert_allclose(step, oracle, atol=1e-10)


def test_inner_beta_step_perfect_fit():
    rng = np.random.default_rng(9)
    x = rng.normal(size=(5, 4))
    data = PanelDataset(outcome=x.copy(), regressors=(x,))
    empty_l, empty_f = np.empty((5, 0)), np.empty((4, 0))
    for scheme in SCHEMES:
        beta = inner_beta_step(data, scheme, loadings=empty_l, factors=empty_f)
        assert beta[0] == pytest.approx(1.0)


def test_inner_beta_step_empty_blocks_reduce_to_pooled_ols():
    rng = np.random.default_rng(10)
    data = PanelDataset(
        outcome=rng.normal(size=(6, 5)),
        regressors=(rng.normal(size=(6, 5)), rng.normal(size=(6, 5))),
    )
    x = np.column_stack([xk.reshape(-1) for xk in data.regressors])
    ols = np.linalg.solve(x.T @ x, x.T @ data.outcome.reshape(-1))
    beta = inner_beta_step(
        data,
        IterationScheme.PC_THEN_DOUBLY_PROJECTED_OLS,
        loadings=np.empty((6, 0)),
        factors=np.empty((5, 0)),
    )
    assert_allclose(beta, ols, atol=1e-12)


def test_inner_beta_step_singular_design_warns():
    rng = np.random.default_rng(11)
    x = rng.normal(size=(5, 4))
    data = PanelDataset(outcome=rng.normal(size=(5, 4)), regressors=(x, 2.0 * x))
    with pytest.warns(SingularDesign):
        inner_beta_step(
            data,
            IterationScheme.PC_THEN_RESIDUAL_OLS,
            loadings=np.empty((5, 0)),
            factors=np.empty((4, 0)),
        )


def test_inner_beta_step_hybrid_rejected():
    data = PanelDataset(outcome=np.eye(3), regressors=(np.eye(3),))
    with pytest.raises(ValueError):
        inner_beta_step(data, IterationScheme.HYBRID, factors=np.empty((3, 0)))


def test_parse_scheme_aliases():
    assert parse_scheme("2") is IterationScheme.PC_THEN_RESIDUAL_OLS
    assert parse_scheme("HYBRID") is IterationScheme.HYBRID
    assert parse_scheme("pc_then_projected_ols") is IterationScheme.PC_THEN_PROJECTED_OLS
    with pytest.raises(ValueError):
        parse_scheme("nope")


# --------------------------------------------------------------- estimate


def test_estimate_noiseless_exact_recovery():
    data, beta0, _, _ = make_noiseless(0)
    fit = estimate(data, EstimatorConfig(n_factors=2, n_random_starts=2))
    assert np.linalg.norm(fit.beta_hat - beta0) < 1e-7
    assert fit.objective < 1e-12
    assert fit.converged


@pytest.mark.parametrize("scheme", [*SCHEMES, IterationScheme.HYBRID])
def test_estimate_noiseless_all_schemes(scheme):
    data, beta0, _, _ = make_noiseless(1)
    config = EstimatorConfig(n_factors=2, scheme=scheme, n_random_starts=1)
    fit = estimate(data, config)
    assert np.linalg.norm(fit.beta_hat - beta0) < 1e-6


def test_estimate_noiseless_overfitted_rank_window():
    # Exact recovery for every R0 <= R < min(N,T) - R0 on noise-free data.
    data, beta0, _, _ = make_noiseless(2, n=12, t=10, k=1, r0=2, beta0=(1.2,))
    for r in (2, 3, 5, 7):
        fit = estimate(data, EstimatorConfig(n_factors=r, n_random_starts=1))
        assert np.linalg.norm(fit.beta_hat - beta0) < 1e-6, f"R={r}"


def test_estimate_grid_search_oracle():
    data, beta0 = make_noisy(4, n=12, t=12, k=1)
    fit = estimate(data, EstimatorConfig(n_factors=1, n_random_starts=4))
    grid = np.arange(beta0[0] - 0.5, beta0[0] + 0.5 + 1e-12, 1e-4)
    values = [profile_objective(data, [b], 1) for b in grid]
    best = grid[int(np.argmin(values))]
    assert abs(fit.beta_hat[0] - best) <= 2e-4


def test_estimate_rank_too_large():
    data, _ = make_noisy(5, n=6, t=6)
    with pytest.raises(RankArgumentOutOfRange):
        estimate(data, EstimatorConfig(n_factors=6))


def test_estimate_pure_factor_extraction():
    rng = np.random.default_rng(6)
    lam = rng.normal(size=(10, 2))
    f = rng.normal(size=(8, 2))
    data = PanelDataset(outcome=lam @ f.T + 0.01 * rng.normal(size=(10, 8)))
    fit = estimate(data, EstimatorConfig(n_factors=2))
    assert fit.beta_hat.size == 0
    assert fit.objective < 1e-3
    assert fit.factors.shape == (8, 2)


def test_fit_invariants():
    data, _ = make_noisy(7, n=10, t=9, k=1)
    fit = estimate(data, EstimatorConfig(n_factors=2, n_random_starts=2))
    t_len = data.n_periods
    assert_allclose(fit.factors.T @ fit.factors / t_len, np.eye(2), atol=1e-10)
    gram_l = fit.loadings.T @ fit.loadings
    assert_allclose(gram_l, np.diag(np.diag(gram_l)), atol=1e-10)
    assert np.all(np.diff(np.diag(gram_l)) <= 1e-12)
    # first-order conditions: residuals orthogonal to both factor spaces
    m_l = projector_orthogonal(fit.loadings)
    m_f = projector_orthogonal(fit.factors)
    assert np.max(np.abs(m_l @ fit.residuals @ m_f - fit.residuals)) < 1e-8
    nt = data.n_units * t_len
    assert fit.objective == pytest.approx(
        np.sum(fit.residuals**2) / nt, rel=1e-10
    )


def test_estimate_transposed_orientation():
    # N < T exercises the transposition path; invariants must still hold.
    data, beta0 = make_noisy(8, n=7, t=19, k=1)
    fit = estimate(data, EstimatorConfig(n_factors=1, n_random_starts=2))
    assert fit.loadings.shape == (7, 1)
    assert fit.factors.shape == (19, 1)
    assert_allclose(fit.factors.T @ fit.factors / 19, np.eye(1), atol=1e-10)
    direct = profile_objective(data, fit.beta_hat, 1)
    assert fit.objective == pytest.approx(direct, rel=1e-8)


def test_monotone_descent_schemes_one_two():
    for scheme in SCHEMES[:2]:
        data, _ = make_noisy(9, n=14, t=11, k=1, noise=1.0)
        config = EstimatorConfig(
            n_factors=2, scheme=scheme, n_random_starts=0, max_iterations=60
        )
        fit = estimate(data, config)
        trace = fit.objective_trace
        assert np.all(np.diff(trace) <= 1e-12), scheme


def test_rotation_invariance_of_residuals():
    data, _ = make_noisy(10, n=9, t=8, k=1)
    fit = estimate(data, EstimatorConfig(n_factors=2, n_random_starts=1))
    rng = np.random.default_rng(0)
    s = rng.normal(size=(2, 2)) + 0.5 * np.eye(2)
    loadings = fit.loadings @ s
    factors = fit.factors @ np.linalg.inv(s).T
    resid = data.outcome - fit.beta_hat[0] * data.regressors[0] - loadings @ factors.T
    assert_allclose(resid, fit.residuals, atol=1e-9)
    nt = data.n_units * data.n_periods
    assert np.sum(resid**2) / nt == pytest.approx(fit.objective, rel=1e-9)


def test_canonicalize_factors_preserves_product():
    rng = np.random.default_rng(12)
    loadings = rng.normal(size=(8, 3))
    factors = rng.normal(size=(6, 3))
    product = loadings @ factors.T
    l2, f2 = canonicalize_factors(loadings, factors)
    assert_allclose(l2 @ f2.T, product, atol=1e-10)
    assert_allclose(f2.T @ f2 / 6, np.eye(3), atol=1e-10)
    gram = l2.T @ l2
    assert_allclose(gram, np.diag(np.diag(gram)), atol=1e-10)


def test_estimate_deterministic_and_tie_break():
    data, _ = make_noisy(13, n=10, t=10, k=1)
    config = EstimatorConfig(n_factors=1, n_random_starts=3, seed=42)
    fit1 = estimate(data, config)
    fit2 = estimate(data, config)
    assert fit1.start_index == fit2.start_index
    assert fit1.beta_hat[0] == fit2.beta_hat[0]
    assert fit1.iterations == fit2.iterations


def test_no_converged_start_warns_and_returns():
    data, _ = make_noisy(14, n=10, t=10, k=1, noise=1.5)
    config = EstimatorConfig(n_factors=1, n_random_starts=0, max_iterations=2)
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        fit = estimate(data, config)
    assert any(w.category.__name__ == "NoConvergedStart" for w in caught)
    assert not fit.converged
    assert np.all(np.isfinite(fit.beta_hat))
