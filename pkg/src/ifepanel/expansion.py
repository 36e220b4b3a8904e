"""Analytic perturbation expansion of the profile objective at the true rank.

Around the true coefficients, the profile objective admits a convergent
power series in the joint perturbation (coefficient deviations times
regressors, plus the error matrix) whenever the perturbation's operator
norm stays below a radius determined by the spectrum of the true low-rank
structure. The quadratic truncation of that series,

    value at center
    - (2/sqrt(NT)) (beta - beta0)' (C1 + C2)
    + (beta - beta0)' W (beta - beta0),

drives the first-order asymptotics of the estimator. This module evaluates
the series coefficients at orders two and three, the convergence radius,
and numerical diagnostics (finite-difference coefficient checks and
remainder-scaling studies) that validate the quadratic approximation on
concrete instances.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np

from .errors import (
    RankArgumentOutOfRange,
    RankDeficientStructure,
    SingularFactorGram,
    UnsupportedOrder,
)
from .estimator import profile_objective
from .linalg import projector_orthogonal, top_eigenvalues
from .panel import PanelDataset


@dataclass(frozen=True)
class TrueStructure:
    """The data-generating objects: loadings, factors, coefficients, errors.

    ``lambda0`` is N x R0, ``f0`` is T x R0 and their product must have full
    rank R0 (smallest retained singular value above 1e-10 relative).
    """

    lambda0: np.ndarray
    f0: np.ndarray
    beta0: np.ndarray
    error_matrix: np.ndarray

    def __post_init__(self):
        lam = np.asarray(self.lambda0, dtype=float)
        f = np.asarray(self.f0, dtype=float)
        beta = np.atleast_1d(np.asarray(self.beta0, dtype=float))
        e = np.asarray(self.error_matrix, dtype=float)
        if lam.ndim != 2 or f.ndim != 2 or lam.shape[1] != f.shape[1]:
            raise ValueError("lambda0 and f0 must share the factor dimension")
        if e.shape != (lam.shape[0], f.shape[0]):
            raise ValueError(
                f"error matrix shape {e.shape} does not match "
                f"({lam.shape[0]}, {f.shape[0]})"
            )
        if lam.shape[1] > 0:
            sv = np.linalg.svd(lam @ f.T, compute_uv=False)[: lam.shape[1]]
            if sv[-1] <= 1e-10 * sv[0]:
                raise RankDeficientStructure(
                    f"lambda0 f0' has numerical rank below R0={lam.shape[1]}"
                )
        object.__setattr__(self, "lambda0", lam)
        object.__setattr__(self, "f0", f)
        object.__setattr__(self, "beta0", beta)
        object.__setattr__(self, "error_matrix", e)

    @property
    def n_units(self) -> int:
        return self.lambda0.shape[0]

    @property
    def n_periods(self) -> int:
        return self.f0.shape[0]

    @property
    def r0(self) -> int:
        return self.lambda0.shape[1]


@dataclass(frozen=True)
class ExpansionObjects:
    """All quadratic-approximation ingredients for one instance.

    The coefficient tables are indexed over {0, 1..K} where slot 0 stands
    for the error matrix and slot k for regressor k; by multilinearity the
    series weight of entry (k1..kg) is the product of the coefficient
    deviations, with weight one on slot 0.
    """

    w: np.ndarray
    c1: np.ndarray
    c2: np.ndarray
    d_min: float
    d_max: float
    r0_radius: float
    l2_table: np.ndarray
    l3_table: np.ndarray


def _projectors(struct: TrueStructure) -> tuple[np.ndarray, np.ndarray]:
    return projector_orthogonal(struct.lambda0), projector_orthogonal(struct.f0)


def compute_w(struct: TrueStructure, data: PanelDataset) -> np.ndarray:
    """K x K curvature matrix (1/NT) Tr(M_lam X_k1 M_f X_k2') at the truth."""
    m_lam, m_f = _projectors(struct)
    nt = struct.n_units * struct.n_periods
    projected = [m_lam @ x @ m_f for x in data.regressors]
    k = len(projected)
    w = np.empty((k, k))
    for i in range(k):
        for j in range(i, k):
            w[i, j] = w[j, i] = np.vdot(projected[i], projected[j]) / nt
    return w


def compute_c1(struct: TrueStructure, data: PanelDataset) -> np.ndarray:
    """Linear-in-error coefficients (1/sqrt(NT)) Tr(M_lam X_k M_f e')."""
    m_lam, m_f = _projectors(struct)
    nt = struct.n_units * struct.n_periods
    e = struct.error_matrix
    return np.array(
        [np.vdot(m_lam @ x @ m_f, e) / np.sqrt(nt) for x in data.regressors]
    )


def compute_c2(struct: TrueStructure, data: PanelDataset) -> np.ndarray:
    """Quadratic-in-error coefficients, evaluated term by term as displayed.

    Each entry is minus (1/sqrt(NT)) times the sum of three trace terms
    mixing the error matrix twice with one regressor through the inverse
    factor Grams.

    Raises
    ------
    SingularFactorGram
        If either factor Gram matrix is not invertible.
    """
    k = data.n_regressors
    if struct.r0 == 0:
        return np.zeros(k)
    lam, f, e = struct.lambda0, struct.f0, struct.error_matrix
    m_lam, m_f = _projectors(struct)
    nt = struct.n_units * struct.n_periods
    gram_lam = lam.T @ lam
    gram_f = f.T @ f
    for name, g in (("lambda0", gram_lam), ("f0", gram_f)):
        vals = np.linalg.eigvalsh(g)
        if vals[0] <= 1e-12 * vals[-1]:
            raise SingularFactorGram(f"{name} Gram matrix is singular")
    inv_lam = np.linalg.inv(gram_lam)
    inv_f = np.linalg.inv(gram_f)
    # Shared right factors of the three displayed traces.
    lam_core = f @ inv_f @ inv_lam @ lam.T        # T x N
    f_core = lam @ inv_lam @ inv_f @ f.T          # N x T
    out = np.empty(k)
    for i, x in enumerate(data.regressors):
        t1 = np.trace(e @ m_f @ e.T @ m_lam @ x @ lam_core)
        t2 = np.trace(e.T @ m_lam @ e @ m_f @ x.T @ f_core)
        t3 = np.trace(e.T @ m_lam @ x @ m_f @ e.T @ f_core)
        out[i] = -(t1 + t2 + t3) / np.sqrt(nt)
    return out


def expansion_coefficient(struct: TrueStructure, order: int, args) -> float:
    """Totally symmetric series coefficient of the given order (2 or 3).

    ``args`` is a sequence of ``order`` N x T matrices. Order two is the
    doubly projected cross trace; order three symmetrizes a trace with one
    inverse-Gram insertion over all argument orderings.

    Raises
    ------
    UnsupportedOrder
        For orders other than 2 and 3 (higher orders only bound remainders
        and are validated numerically instead).
    """
    args = [np.asarray(a, dtype=float) for a in args]
    if order not in (2, 3):
        raise UnsupportedOrder(f"expansion coefficients implemented for g in {{2,3}}, got {order}")
    if len(args) != order:
        raise ValueError(f"expected {order} argument matrices, got {len(args)}")
    m_lam, m_f = _projectors(struct)
    if order == 2:
        a, b = args
        return float(np.vdot(m_lam @ a @ m_f, b))
    if struct.r0 == 0:
        return 0.0
    lam, f = struct.lambda0, struct.f0
    gram_lam = lam.T @ lam
    gram_f = f.T @ f
    core = lam @ np.linalg.inv(gram_lam) @ np.linalg.inv(gram_f) @ f.T  # N x T
    total = 0.0
    for a, b, c in itertools.permutations(args, 3):
        total += float(np.trace(m_lam @ a @ m_f @ b.T @ core @ c.T))
    return -total / 3.0


def convergence_radius(struct: TrueStructure) -> tuple[float, float, float]:
    """Extreme scales of the true structure and the series convergence radius.

    ``d_max``/``d_min`` are square roots of the largest/smallest eigenvalue
    of the R0 x R0 matrix (lam'lam)(f'f)/NT (the nonzero spectrum of the
    rank-R0 product's scaled Gram); the radius is
    ``(4 d_max / d_min^2 + 1/(2 d_max))^{-1}``.

    Raises
    ------
    RankArgumentOutOfRange
        If the structure has no factors (R0 = 0).
    RankDeficientStructure
        If ``d_min`` is numerically zero.
    """
    if struct.r0 == 0:
        raise RankArgumentOutOfRange("convergence radius requires R0 >= 1")
    nt = struct.n_units * struct.n_periods
    gram_lam = struct.lambda0.T @ struct.lambda0
    gram_f = struct.f0.T @ struct.f0
    vals_f, vecs_f = np.linalg.eigh(gram_f)
    root_f = vecs_f * np.sqrt(np.maximum(vals_f, 0.0)) @ vecs_f.T
    reduced = root_f @ gram_lam @ root_f / nt
    vals = np.linalg.eigvalsh(reduced)
    d_min = float(np.sqrt(max(vals[0], 0.0)))
    d_max = float(np.sqrt(max(vals[-1], 0.0)))
    if d_min < 1e-12:
        raise RankDeficientStructure(f"d_min={d_min:.3e} is numerically zero")
    radius = 1.0 / (4.0 * d_max / d_min**2 + 1.0 / (2.0 * d_max))
    return d_min, d_max, radius


def compute_expansion_objects(
    struct: TrueStructure, data: PanelDataset
) -> ExpansionObjects:
    """Evaluate every expansion object for one instance."""
    k = data.n_regressors
    d_min, d_max, radius = convergence_radius(struct)
    mats = [struct.error_matrix, *data.regressors]
    l2 = np.empty((k + 1, k + 1))
    for i in range(k + 1):
        for j in range(i, k + 1):
            l2[i, j] = l2[j, i] = expansion_coefficient(
                struct, 2, [mats[i], mats[j]]
            )
    l3 = np.empty((k + 1, k + 1, k + 1))
    for i in range(k + 1):
        for j in range(i, k + 1):
            for l in range(j, k + 1):
                val = expansion_coefficient(struct, 3, [mats[i], mats[j], mats[l]])
                for perm in itertools.permutations((i, j, l)):
                    l3[perm] = val
    return ExpansionObjects(
        w=compute_w(struct, data),
        c1=compute_c1(struct, data),
        c2=compute_c2(struct, data),
        d_min=d_min,
        d_max=d_max,
        r0_radius=radius,
        l2_table=l2,
        l3_table=l3,
    )


def quadratic_approx(
    struct: TrueStructure,
    data: PanelDataset,
    beta,
    objects: ExpansionObjects | None = None,
) -> tuple[float, float]:
    """Quadratic approximation of the profile objective and its remainder.

    The outcome in ``data`` must be generated by ``struct`` (same
    regressors, coefficients, factor structure and errors); the center
    value is the profile objective at the true coefficients. Returns
    ``(approximation, remainder)`` with
    ``remainder = profile_objective(beta) - approximation``.
    """
    beta = np.atleast_1d(np.asarray(beta, dtype=float))
    if objects is None:
        w = compute_w(struct, data)
        c1 = compute_c1(struct, data)
        c2 = compute_c2(struct, data)
    else:
        w, c1, c2 = objects.w, objects.c1, objects.c2
    nt = struct.n_units * struct.n_periods
    center = profile_objective(data, struct.beta0, struct.r0)
    delta = beta - struct.beta0
    approx = (
        center
        - 2.0 / np.sqrt(nt) * float(delta @ (c1 + c2))
        + float(delta @ w @ delta)
    )
    remainder = profile_objective(data, beta, struct.r0) - approx
    return approx, remainder


def perturbation_path_objective(struct: TrueStructure, z: np.ndarray, s: float) -> float:
    """Profile objective along the rank-R0 structure plus ``s`` times ``z``.

    Evaluated as the squared residual after removing the top-R0 principal
    subspace rather than as trace minus top eigenvalues: the value is
    quadratically insensitive to subspace error, so tiny objectives come
    out with full relative precision (which the finite-difference
    diagnostics need).
    """
    target = struct.lambda0 @ struct.f0.T + s * z
    n, t_len = target.shape
    if n < t_len:
        target = target.T
        n, t_len = t_len, n
    r0 = struct.r0
    if r0 == 0:
        return float(np.vdot(target, target)) / (n * t_len)
    gram = target.T @ target
    _, vecs = np.linalg.eigh(gram)
    complement = vecs[:, : t_len - r0]
    resid = target @ complement
    return float(np.vdot(resid, resid)) / (n * t_len)


def path_taylor_coefficients_fd(
    struct: TrueStructure, z: np.ndarray, step: float = 0.15
) -> tuple[float, float]:
    """Order-2 and order-3 Taylor coefficients of the perturbation path.

    Five-point central differences at three step sizes with two levels of
    Richardson extrapolation; the path starts exactly at zero with zero
    slope, so the even/odd parts isolate the two coefficients.
    """

    def phi(s: float) -> float:
        return perturbation_path_objective(struct, z, s)

    def estimates(h: float) -> tuple[float, float]:
        p1, m1 = phi(h), phi(-h)
        p2, m2 = phi(2 * h), phi(-2 * h)
        c0 = phi(0.0)
        a2 = (16.0 * (p1 + m1) - (p2 + m2) - 30.0 * c0) / (24.0 * h * h)
        a3 = ((p2 - m2) - 2.0 * (p1 - m1)) / (12.0 * h**3)
        return a2, a3

    rough = np.array([estimates(step), estimates(step / 2), estimates(step / 4)])
    a2_rough, a3_rough = rough[:, 0], rough[:, 1]
    # The even stencil's error series starts at h^4, the odd one's at h^2.
    a2_l1 = (16.0 * a2_rough[1:] - a2_rough[:-1]) / 15.0
    a2 = (64.0 * a2_l1[1] - a2_l1[0]) / 63.0
    a3_l1 = (4.0 * a3_rough[1:] - a3_rough[:-1]) / 3.0
    a3 = (16.0 * a3_l1[1] - a3_l1[0]) / 15.0
    return float(a2), float(a3)


def directional_derivatives_fd(
    struct: TrueStructure,
    data: PanelDataset,
    direction,
    step2: float | None = None,
    step3: float | None = None,
) -> tuple[float, float]:
    """Second and third directional derivatives of the profile objective.

    Five-point central stencils in the coefficient direction at the true
    value. The second-derivative step defaults to 1e-4 times the
    convergence radius; the third-derivative stencil divides by the cube
    of the step, so it needs a much larger default (0.02 times the radius)
    to stay above eigenvalue roundoff.
    """
    direction = np.atleast_1d(np.asarray(direction, dtype=float))
    _, _, radius = convergence_radius(struct)
    if step2 is None:
        step2 = 1e-4 * radius
    if step3 is None:
        step3 = 2e-2 * radius

    def phi(h: float) -> float:
        return profile_objective(data, struct.beta0 + h * direction, struct.r0)

    center = phi(0.0)

    def second(h: float) -> float:
        return (
            16.0 * (phi(h) + phi(-h))
            - (phi(2 * h) + phi(-2 * h))
            - 30.0 * center
        ) / (12.0 * h * h)

    def third(h: float) -> float:
        return ((phi(2 * h) - phi(-2 * h)) - 2.0 * (phi(h) - phi(-h))) / (
            2.0 * h**3
        )

    return second(step2), third(step3)


def normalized_remainder_sup(
    struct: TrueStructure,
    data: PanelDataset,
    ball_radius: float,
    n_samples: int = 24,
    seed: int = 0,
) -> float:
    """Largest normalized remainder over sampled coefficients in a ball.

    Samples coefficient vectors uniformly in the ball of the given radius
    around the truth and returns the supremum of
    ``|remainder| / (1 + sqrt(NT) ||beta - beta0||)^2``; under the
    quadratic-approximation theorem this shrinks as the panel grows.
    """
    rng = np.random.default_rng(seed)
    nt = struct.n_units * struct.n_periods
    k = len(struct.beta0)
    objects = compute_expansion_objects(struct, data)
    worst = 0.0
    for _ in range(n_samples):
        direction = rng.normal(size=k)
        direction /= max(np.linalg.norm(direction), 1e-300)
        radius = ball_radius * rng.uniform() ** (1.0 / k)
        beta = struct.beta0 + radius * direction
        _, rem = quadratic_approx(struct, data, beta, objects=objects)
        scale = (1.0 + np.sqrt(nt) * radius) ** 2
        worst = max(worst, abs(rem) / scale)
    return worst


def remainder_scaling_study(
    base_n: int = 20,
    base_t: int = 20,
    n_doublings: int = 2,
    n_regressors: int = 1,
    r0: int = 2,
    seeds=range(8),
    error_scale: float = 1.0,
    ball_constant: float = 1.0,
    n_samples: int = 24,
) -> list[dict]:
    """Sup-normalized remainders across panel-size doublings.

    For every seed and every doubling of (N, T), draws a strong-factor
    instance with errors at the given scale, samples coefficients in the
    ball of radius ``ball_constant / sqrt(N)`` and records the normalized
    remainder supremum. Rows carry the per-seed ratios between consecutive
    sizes; medians below one validate the remainder bound empirically.
    """
    rows = []
    for seed in seeds:
        sups = []
        for level in range(n_doublings + 1):
            n = base_n * 2**level
            t_len = base_t * 2**level
            struct, data = strong_factor_instance(
                n, t_len, n_regressors, r0, seed, error_scale
            )
            sup = normalized_remainder_sup(
                struct,
                data,
                ball_radius=ball_constant / np.sqrt(n),
                n_samples=n_samples,
                seed=seed + 1,
            )
            sups.append(sup)
        rows.append(
            {
                "seed": int(seed),
                "sizes": [
                    (base_n * 2**level, base_t * 2**level)
                    for level in range(n_doublings + 1)
                ],
                "sup_normalized_remainder": sups,
                "ratios": [
                    sups[i + 1] / sups[i] if sups[i] > 0 else np.nan
                    for i in range(len(sups) - 1)
                ],
            }
        )
    return rows


def strong_factor_instance(
    n: int, t_len: int, k: int, r0: int, seed: int, error_scale: float
) -> tuple[TrueStructure, PanelDataset]:
    rng = np.random.default_rng(seed)
    lam = rng.normal(1.0, 1.0, (n, r0))
    f = rng.normal(1.0, 1.0, (t_len, r0))
    xs = tuple(rng.normal(0.0, 1.0, (n, t_len)) for _ in range(k))
    beta0 = rng.normal(0.0, 1.0, k)
    e = error_scale * rng.normal(0.0, 1.0, (n, t_len))
    y = lam @ f.T + e
    for b, x in zip(beta0, xs):
        y = y + b * x
    struct = TrueStructure(lambda0=lam, f0=f, beta0=beta0, error_matrix=e)
    return struct, PanelDataset(outcome=y, regressors=xs)


def analytic_directional_derivatives(
    struct: TrueStructure, data: PanelDataset, direction
) -> tuple[float, float]:
    """Series-implied second and third directional derivatives at the center.

    With a negligible error matrix these are ``2 d'W d`` and minus six
    times the order-3 coefficient of the direction-projected regressors
    over NT.
    """
    direction = np.atleast_1d(np.asarray(direction, dtype=float))
    nt = struct.n_units * struct.n_periods
    w = compute_w(struct, data)
    d2 = 2.0 * float(direction @ w @ direction)
    dx = np.einsum("k,kit->it", direction, np.stack(data.regressors))
    d3 = -6.0 * expansion_coefficient(struct, 3, [dx, dx, dx]) / nt
    return d2, d3
