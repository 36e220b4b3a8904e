"""Balanced panel data model, CSV ingestion, and additive-effect projections.

A panel holds an N x T outcome matrix and K regressor matrices of the same
shape. Before interactive-effects estimation, additive unit intercepts,
unit-specific linear/quadratic trends, and common time effects can be swept
out by projecting every matrix from the left and right; the implied loss of
effective sample size is carried alongside the projected data so that
downstream inference can apply the proper degree-of-freedom corrections.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import (
    DegenerateProjection,
    DuplicateCell,
    NonNumericCell,
    UnbalancedPanel,
)

_LAG_SUFFIX = "_lag1"


@dataclass(frozen=True)
class PanelDataset:
    """Balanced N x T panel: one outcome matrix plus K regressor matrices.

    ``K = 0`` is allowed (pure factor extraction). All matrices must be
    finite and share the same shape.
    """

    outcome: np.ndarray
    regressors: tuple[np.ndarray, ...] = ()
    unit_labels: tuple[str, ...] = ()
    period_labels: tuple[str, ...] = ()
    regressor_names: tuple[str, ...] = ()
    outcome_name: str = "y"

    def __post_init__(self):
        y = np.asarray(self.outcome, dtype=float)
        if y.ndim != 2 or y.shape[0] < 1 or y.shape[1] < 1:
            raise ValueError(f"outcome must be a non-empty 2-d matrix, got {y.shape}")
        if not np.all(np.isfinite(y)):
            raise ValueError("outcome contains non-finite entries")
        xs = tuple(np.asarray(x, dtype=float) for x in self.regressors)
        for k, x in enumerate(xs):
            if x.shape != y.shape:
                raise ValueError(
                    f"regressor {k} has shape {x.shape}, expected {y.shape}"
                )
            if not np.all(np.isfinite(x)):
                raise ValueError(f"regressor {k} contains non-finite entries")
        object.__setattr__(self, "outcome", y)
        object.__setattr__(self, "regressors", xs)
        if not self.unit_labels:
            object.__setattr__(
                self, "unit_labels", tuple(str(i + 1) for i in range(y.shape[0]))
            )
        if not self.period_labels:
            object.__setattr__(
                self, "period_labels", tuple(str(t + 1) for t in range(y.shape[1]))
            )
        if not self.regressor_names:
            object.__setattr__(
                self, "regressor_names", tuple(f"x{k + 1}" for k in range(len(xs)))
            )
        if len(self.unit_labels) != y.shape[0]:
            raise ValueError("unit_labels length does not match outcome rows")
        if len(self.period_labels) != y.shape[1]:
            raise ValueError("period_labels length does not match outcome columns")
        if len(self.regressor_names) != len(xs):
            raise ValueError("regressor_names length does not match regressors")

    @property
    def n_units(self) -> int:
        return self.outcome.shape[0]

    @property
    def n_periods(self) -> int:
        return self.outcome.shape[1]

    @property
    def n_regressors(self) -> int:
        return len(self.regressors)

    def transposed(self) -> "PanelDataset":
        """Swap the unit and period dimensions (the model is symmetric)."""
        return PanelDataset(
            outcome=self.outcome.T.copy(),
            regressors=tuple(x.T.copy() for x in self.regressors),
            unit_labels=self.period_labels,
            period_labels=self.unit_labels,
            regressor_names=self.regressor_names,
            outcome_name=self.outcome_name,
        )


@dataclass(frozen=True)
class ProjectionSpec:
    """Which additive effects to sweep out before estimation.

    The unit-side trend basis is nested: a quadratic trend implies a linear
    trend, which implies an intercept.
    """

    sweep_unit_intercepts: bool = False
    sweep_unit_linear_trends: bool = False
    sweep_unit_quadratic_trends: bool = False
    sweep_time_effects: bool = False
    lag_outcome_first: bool = False

    def __post_init__(self):
        if self.sweep_unit_quadratic_trends and not self.sweep_unit_linear_trends:
            raise ValueError("quadratic trends require linear trends to be swept")
        if self.sweep_unit_linear_trends and not self.sweep_unit_intercepts:
            raise ValueError("linear trends require unit intercepts to be swept")

    @property
    def n_time_basis(self) -> int:
        """Number of unit-side basis columns (1, t, t^2) being swept."""
        return (
            int(self.sweep_unit_intercepts)
            + int(self.sweep_unit_linear_trends)
            + int(self.sweep_unit_quadratic_trends)
        )

    @property
    def identity(self) -> bool:
        return self.n_time_basis == 0 and not self.sweep_time_effects


@dataclass(frozen=True)
class EffectiveSize:
    """Effective sample sizes after sweeping additive effects."""

    n_eff: int
    t_eff: int


def load_csv(
    path,
    unit_col: str = "unit_id",
    time_col: str = "time_id",
    outcome_col: str = "y",
    regressor_cols: tuple[str, ...] | None = None,
) -> PanelDataset:
    """Read a long-format CSV into a balanced panel.

    The file must have a header row with ``unit_id,time_id,y,x1,...,xK``
    columns (names overridable). Units and periods are sorted by label,
    numerically when every label parses as a number, so the resulting
    matrix layout is deterministic.

    Raises
    ------
    UnbalancedPanel
        If any (unit, period) cell is missing; the missing cells are listed.
    DuplicateCell
        If a cell appears more than once.
    NonNumericCell
        If a value cell cannot be parsed as a float, with its location.
    """
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ValueError(f"{path}: empty file") from None
        header = [h.strip() for h in header]
        for col in (unit_col, time_col, outcome_col):
            if col not in header:
                raise ValueError(f"{path}: missing required column {col!r}")
        if regressor_cols is None:
            regressor_cols = tuple(
                h for h in header if h not in (unit_col, time_col, outcome_col)
            )
        else:
            regressor_cols = tuple(regressor_cols)
            for col in regressor_cols:
                if col not in header:
                    raise ValueError(f"{path}: missing required column {col!r}")
        idx = {name: header.index(name) for name in header}
        value_cols = (outcome_col,) + regressor_cols
        rows = []
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(header):
                raise ValueError(
                    f"{path}:{lineno}: expected {len(header)} fields, got {len(row)}"
                )
            unit = row[idx[unit_col]].strip()
            period = row[idx[time_col]].strip()
            values = []
            for col in value_cols:
                raw = row[idx[col]].strip()
                try:
                    values.append(float(raw))
                except ValueError:
                    raise NonNumericCell(
                        f"{path}:{lineno}: column {col!r} has non-numeric value {raw!r}"
                    ) from None
            rows.append((unit, period, values))

    units = _sorted_labels({u for u, _, _ in rows})
    periods = _sorted_labels({t for _, t, _ in rows})
    n, t_len = len(units), len(periods)
    if n == 0:
        raise ValueError(f"{path}: no data rows")
    unit_pos = {u: i for i, u in enumerate(units)}
    period_pos = {p: j for j, p in enumerate(periods)}

    data = np.full((len(value_cols), n, t_len), np.nan)
    seen = np.zeros((n, t_len), dtype=bool)
    for unit, period, values in rows:
        i, j = unit_pos[unit], period_pos[period]
        if seen[i, j]:
            raise DuplicateCell(f"cell ({unit}, {period}) appears more than once")
        seen[i, j] = True
        data[:, i, j] = values
    if not seen.all():
        missing = [
            (units[i], periods[j]) for i, j in np.argwhere(~seen)
        ]
        raise UnbalancedPanel(missing)

    return PanelDataset(
        outcome=data[0],
        regressors=tuple(data[1 + k] for k in range(len(regressor_cols))),
        unit_labels=tuple(units),
        period_labels=tuple(periods),
        regressor_names=regressor_cols,
        outcome_name=outcome_col,
    )


def write_csv(data: PanelDataset, path) -> None:
    """Write a panel back to long-format CSV with 17 significant digits."""
    header = ["unit_id", "time_id", data.outcome_name, *data.regressor_names]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for i, unit in enumerate(data.unit_labels):
            for j, period in enumerate(data.period_labels):
                row = [unit, period, _fmt(data.outcome[i, j])]
                row.extend(_fmt(x[i, j]) for x in data.regressors)
                writer.writerow(row)


def _fmt(v: float) -> str:
    return f"{v:.17g}"


def _sorted_labels(labels) -> list[str]:
    labels = list(labels)
    try:
        return sorted(labels, key=float)
    except ValueError:
        return sorted(labels)


def _annihilator_basis(columns: np.ndarray) -> np.ndarray:
    """Orthonormal basis Q of span(columns); projecting out is Z - (Z Q) Q'."""
    q, r = np.linalg.qr(columns)
    keep = np.abs(np.diag(r)) > 1e-12 * max(np.abs(np.diag(r)).max(), 1e-300)
    return q[:, keep]


def lag_outcome(data: PanelDataset) -> PanelDataset:
    """Drop the first period and prepend the lagged outcome as a regressor."""
    if data.n_periods < 2:
        raise ValueError("need at least 2 periods to construct a lag")
    return PanelDataset(
        outcome=data.outcome[:, 1:],
        regressors=(data.outcome[:, :-1],)
        + tuple(x[:, 1:] for x in data.regressors),
        unit_labels=data.unit_labels,
        period_labels=data.period_labels[1:],
        regressor_names=(data.outcome_name + _LAG_SUFFIX,) + data.regressor_names,
        outcome_name=data.outcome_name,
    )


def project_additive_effects(
    data: PanelDataset, spec: ProjectionSpec
) -> tuple[PanelDataset, EffectiveSize]:
    """Sweep additive effects out of every matrix in the panel.

    Each matrix Z is replaced by ``M_left Z M_right`` where the left
    projector annihilates the all-ones vector (time effects) and the right
    projector annihilates the requested unit-side trend basis columns
    (1, t, t^2 with t = 1..T). When ``spec.lag_outcome_first`` is set the
    lagged outcome is constructed first and prepended as a regressor, then
    the projections are applied.

    Returns the projected panel together with the effective sample sizes
    ``(N - #left basis columns, T - #right basis columns)``.

    Raises
    ------
    DegenerateProjection
        If the projection annihilates essentially all variation of a
        regressor (a low-rank regressor such as a time-invariant one).
    """
    if spec.lag_outcome_first:
        data = lag_outcome(data)
    n, t_len = data.n_units, data.n_periods
    if spec.identity:
        return data, EffectiveSize(n_eff=n, t_eff=t_len)

    if t_len <= spec.n_time_basis:
        raise ValueError(
            f"T={t_len} must exceed the {spec.n_time_basis} swept trend basis columns"
        )
    if spec.sweep_time_effects and n < 2:
        raise ValueError("sweeping time effects requires N >= 2")

    right_q = None
    if spec.n_time_basis > 0:
        t_grid = np.arange(1.0, t_len + 1.0)
        cols = [np.ones(t_len)]
        if spec.sweep_unit_linear_trends:
            cols.append(t_grid)
        if spec.sweep_unit_quadratic_trends:
            cols.append(t_grid**2)
        right_q = _annihilator_basis(np.column_stack(cols))
    left_q = None
    if spec.sweep_time_effects:
        left_q = _annihilator_basis(np.ones((n, 1)))

    def sweep(z: np.ndarray) -> np.ndarray:
        out = z
        if left_q is not None:
            out = out - left_q @ (left_q.T @ out)
        if right_q is not None:
            out = out - (out @ right_q) @ right_q.T
        return out

    projected_x = []
    for k, x in enumerate(data.regressors):
        xp = sweep(x)
        if np.linalg.norm(xp) <= 1e-12 * max(np.linalg.norm(x), 1e-300):
            raise DegenerateProjection(
                f"regressor {data.regressor_names[k]!r} has no variation left "
                "after projection (low-rank regressor)"
            )
        projected_x.append(xp)

    projected = replace(
        data,
        outcome=sweep(data.outcome),
        regressors=tuple(projected_x),
    )
    eff = EffectiveSize(
        n_eff=n - int(spec.sweep_time_effects),
        t_eff=t_len - spec.n_time_basis,
    )
    return projected, eff
