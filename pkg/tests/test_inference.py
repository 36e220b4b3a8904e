import numpy as np
import pytest
from numpy.testing import assert_allclose

from ifepanel.errors import (
    BandwidthOutOfRange,
    DegreesOfFreedomExhausted,
    NearSingularW,
)
from ifepanel.estimator import EstimatorConfig, FactorFit, estimate
from ifepanel.inference import (
    KernelSpec,
    b_hat,
    bias_corrected,
    robust_covariance,
    run_inference,
    sigma2_hat,
    standard_errors,
    w_hat,
)
from ifepanel.panel import PanelDataset


def manual_fit(residuals, loadings, factors, beta=None):
    k = 0 if beta is None else len(beta)
    return FactorFit(
        beta_hat=np.zeros(k) if beta is None else np.asarray(beta, dtype=float),
        loadings=loadings,
        factors=factors,
        residuals=residuals,
        objective=float(np.mean(residuals**2)),
        converged=True,
        iterations=1,
        start_index=0,
        objective_trace=np.array([0.0]),
    )


def fitted_instance(seed, n=12, t=10, k=2, r=2, noise=0.4):
    rng = np.random.default_rng(seed)
    lam = rng.normal(1.0, 1.0, (n, r))
    f = rng.normal(0.0, 1.0, (t, r))
    xs = tuple(
        rng.normal(size=(n, t)) + np.outer(lam[:, 0], f[:, j % r]) for j in range(k)
    )
    beta0 = np.linspace(1.0, -0.5, k)
    y = lam @ f.T + noise * rng.normal(size=(n, t))
    for b, x in zip(beta0, xs):
        y = y + b * x
    data = PanelDataset(outcome=y, regressors=xs)
    fit = estimate(data, EstimatorConfig(n_factors=r, n_random_starts=1))
    return data, fit


# ------------------------------------------------------------------ sigma2


def test_sigma2_zero_residuals():
    fit = manual_fit(np.zeros((5, 4)), np.empty((5, 0)), np.empty((4, 0)))
    assert sigma2_hat(fit, 0, 5, 4) == 0.0


def test_sigma2_constant_residuals():
    fit = manual_fit(np.ones((5, 4)), np.zeros((5, 1)), np.zeros((4, 1)))
    # denominator (5-1)(4-1) - 1 = 11
    assert sigma2_hat(fit, 1, 5, 4) == pytest.approx(20.0 / 11.0)


def test_sigma2_matches_direct_sum():
    data, fit = fitted_instance(0)
    expected = np.sum(fit.residuals**2) / ((12 - 2) * (10 - 2) - 2)
    assert sigma2_hat(fit, 2, 12, 10) == expected


def test_sigma2_degrees_of_freedom_exhausted():
    fit = manual_fit(np.ones((3, 3)), np.zeros((3, 2)), np.zeros((3, 2)))
    with pytest.raises(DegreesOfFreedomExhausted):
        sigma2_hat(fit, 1, 3, 3)


# ----------------------------------------------------------------------- W


def test_w_zero_regressor_row():
    rng = np.random.default_rng(1)
    data = PanelDataset(
        outcome=rng.normal(size=(6, 5)),
        regressors=(np.zeros((6, 5)), rng.normal(size=(6, 5))),
    )
    fit = manual_fit(
        np.zeros((6, 5)), rng.normal(size=(6, 1)), rng.normal(size=(5, 1))
    )
    w = w_hat(data, fit)
    assert_allclose(w[0], 0.0, atol=1e-15)
    assert_allclose(w[:, 0], 0.0, atol=1e-15)


def test_w_rank_zero_is_raw_gram():
    rng = np.random.default_rng(2)
    xs = (rng.normal(size=(5, 7)), rng.normal(size=(5, 7)))
    data = PanelDataset(outcome=rng.normal(size=(5, 7)), regressors=xs)
    fit = manual_fit(np.zeros((5, 7)), np.empty((5, 0)), np.empty((7, 0)))
    w = w_hat(data, fit)
    for i in range(2):
        for j in range(2):
            assert w[i, j] == pytest.approx(np.vdot(xs[i], xs[j]) / 35)


def test_w_matches_elementwise_oracle():
    data, fit = fitted_instance(3)
    from ifepanel.linalg import projector_orthogonal

    m_l = projector_orthogonal(fit.loadings)
    m_f = projector_orthogonal(fit.factors)
    nt = data.n_units * data.n_periods
    oracle = np.empty((2, 2))
    for i in range(2):
        zi = m_l @ data.regressors[i] @ m_f
        for j in range(2):
            oracle[i, j] = np.sum(zi * data.regressors[j]) / nt
    assert_allclose(w_hat(data, fit), oracle, atol=1e-12)


def test_w_rotation_invariant():
    data, fit = fitted_instance(4)
    rng = np.random.default_rng(0)
    s = rng.normal(size=(2, 2)) + np.eye(2)
    rotated = manual_fit(
        fit.residuals, fit.loadings @ s, fit.factors @ np.linalg.inv(s).T, fit.beta_hat
    )
    assert_allclose(w_hat(data, fit), w_hat(data, rotated), atol=1e-10)


# ----------------------------------------------------------------------- B


def b_hat_double_sum(data, fit, kernel):
    """Oracle: the explicit forward double sum over projector entries."""
    from ifepanel.linalg import projector_onto

    p_f = projector_onto(fit.factors)
    t_len = data.n_periods
    out = np.zeros(data.n_regressors)
    for k, x in enumerate(data.regressors):
        total = 0.0
        for t in range(t_len):
            for tau in range(t + 1, min(t + kernel.bandwidth, t_len - 1) + 1):
                total += p_f[t, tau] * np.mean(fit.residuals[:, t] * x[:, tau])
        out[k] = total
    return out


def test_b_zero_regressors():
    data, fit = fitted_instance(5)
    zero_data = PanelDataset(
        outcome=data.outcome, regressors=tuple(np.zeros_like(x) for x in data.regressors)
    )
    assert_allclose(b_hat(zero_data, fit, KernelSpec(2)), 0.0, atol=1e-15)


def test_b_zero_residuals():
    data, fit = fitted_instance(6)
    clean = manual_fit(
        np.zeros_like(fit.residuals), fit.loadings, fit.factors, fit.beta_hat
    )
    assert_allclose(b_hat(data, clean, KernelSpec(2)), 0.0, atol=1e-15)


@pytest.mark.parametrize("bandwidth", [1, 2, 3, 7])
def test_b_truncated_trace_equals_double_sum(bandwidth):
    for seed in range(6):
        data, fit = fitted_instance(seed, n=9, t=8)
        kernel = KernelSpec(bandwidth)
        assert_allclose(
            b_hat(data, fit, kernel),
            b_hat_double_sum(data, fit, kernel),
            atol=1e-12,
        )


def test_b_bandwidth_out_of_range():
    data, fit = fitted_instance(7)
    with pytest.raises(BandwidthOutOfRange):
        b_hat(data, fit, KernelSpec(bandwidth=data.n_periods))
    with pytest.raises(ValueError):
        KernelSpec(bandwidth=0)


# ------------------------------------------------------- correction and SEs


def test_bias_corrected_zero_b():
    data, fit = fitted_instance(8)
    w = w_hat(data, fit)
    assert_allclose(bias_corrected(fit, w, np.zeros(2), 10), fit.beta_hat)


def test_bias_corrected_scalar_arithmetic():
    fit = manual_fit(
        np.zeros((4, 10)), np.empty((4, 0)), np.empty((10, 0)), beta=[1.0]
    )
    out = bias_corrected(fit, np.array([[2.0]]), np.array([4.0]), 10)
    assert out[0] == pytest.approx(1.2)


def test_bias_corrected_near_singular_w():
    fit = manual_fit(np.zeros((4, 4)), np.empty((4, 0)), np.empty((4, 0)), beta=[0.0, 0.0])
    w = np.array([[1.0, 1.0], [1.0, 1.0 + 1e-14]])
    with pytest.raises(NearSingularW):
        bias_corrected(fit, w, np.ones(2), 4)


def test_standard_errors_identity_w():
    se, t = standard_errors(1.0, np.eye(2), 10, 10, np.array([0.0, 0.5]))
    assert_allclose(se, [0.1, 0.1])
    assert t[0] == 0.0
    assert t[1] == pytest.approx(5.0)


def test_standard_errors_robust_matches_manual_sandwich():
    data, fit = fitted_instance(9)
    kernel = KernelSpec(2)
    omega = robust_covariance(data, fit, kernel)
    w = w_hat(data, fit)
    se, _ = standard_errors(1.0, w, 12, 10, fit.beta_hat, omega=omega)
    w_inv = np.linalg.inv(w)
    manual = np.sqrt(np.diag(w_inv @ omega @ w_inv) / 120)
    assert_allclose(se, manual, atol=1e-12)


def test_robust_covariance_window_oracle():
    data, fit = fitted_instance(10, n=8, t=7)
    from ifepanel.linalg import projector_orthogonal

    m_l = projector_orthogonal(fit.loadings)
    m_f = projector_orthogonal(fit.factors)
    scores = [
        (m_l @ x @ m_f) * fit.residuals for x in data.regressors
    ]
    m = 2
    nt = 56
    oracle = np.zeros((2, 2))
    for i in range(2):
        for j in range(2):
            acc = 0.0
            for t in range(7):
                for s in range(7):
                    if abs(t - s) <= m:
                        acc += np.sum(scores[i][:, t] * scores[j][:, s])
            oracle[i, j] = acc / nt
    assert_allclose(robust_covariance(data, fit, KernelSpec(m)), oracle, atol=1e-12)


def test_run_inference_report_consistency():
    data, fit = fitted_instance(11)
    report = run_inference(data, fit, KernelSpec(2))
    w_inv = np.linalg.inv(report.w_hat)
    expected_bc = fit.beta_hat + w_inv @ report.b_hat / data.n_periods
    assert_allclose(report.beta_bc, expected_bc, atol=1e-12)
    assert report.bandwidth == 2
    assert report.dof == (12, 10)
    assert report.robust_se is not None
    vals = np.linalg.eigvalsh(report.w_hat)
    assert vals[0] >= -1e-9 * vals[-1]
    assert np.max(np.abs(report.w_hat - report.w_hat.T)) <= 1e-10


def test_run_inference_effective_sizes():
    data, fit = fitted_instance(12)
    full = run_inference(data, fit, KernelSpec(2))
    eff = run_inference(data, fit, KernelSpec(2), n_eff=11, t_eff=8)
    assert eff.dof == (11, 8)
    # smaller effective sample sizes raise sigma2 and the correction weight
    assert eff.sigma2_hat > full.sigma2_hat
