"""Exception and warning types shared across the package."""

from __future__ import annotations


class IfePanelError(Exception):
    """Base class for all errors raised by this package."""


class NotSymmetric(IfePanelError):
    """A matrix required to be symmetric exceeds the asymmetry tolerance."""


class RankArgumentOutOfRange(IfePanelError):
    """A factor-count argument exceeds what the matrix dimensions admit."""


class UnbalancedPanel(IfePanelError):
    """The panel is missing (unit, period) cells."""

    def __init__(self, missing_cells, message=None):
        self.missing_cells = list(missing_cells)
        if message is None:
            shown = ", ".join(f"({u}, {t})" for u, t in self.missing_cells[:10])
            more = "" if len(self.missing_cells) <= 10 else f" and {len(self.missing_cells) - 10} more"
            message = f"panel is unbalanced; missing cells: {shown}{more}"
        super().__init__(message)


class NonNumericCell(IfePanelError):
    """A CSV cell could not be parsed as a number."""


class DuplicateCell(IfePanelError):
    """A (unit, period) cell appears more than once in the input."""


class DegenerateProjection(IfePanelError):
    """The additive-effect projection annihilated all variation of a regressor."""


class DegreesOfFreedomExhausted(IfePanelError):
    """No residual degrees of freedom left for the error-variance estimate."""


class BandwidthOutOfRange(IfePanelError):
    """The truncation bandwidth must satisfy 1 <= M < T."""


class NearSingularW(IfePanelError):
    """The Hessian-type matrix W is too ill-conditioned to invert."""

    def __init__(self, condition_number, message=None):
        self.condition_number = float(condition_number)
        if message is None:
            message = f"W is near singular (condition number {self.condition_number:.3e})"
        super().__init__(message)


class SingularFactorGram(IfePanelError):
    """A factor or loading Gram matrix required to be invertible is singular."""


class RankDeficientStructure(IfePanelError):
    """The supplied low-rank structure has lower rank than declared."""


class UnsupportedOrder(IfePanelError):
    """An expansion coefficient was requested at an unsupported order."""


class RMaxTooLarge(IfePanelError):
    """The maximum factor count is too large for the panel dimensions."""


class InvalidSpec(IfePanelError):
    """A simulation design or run configuration violates its constraints."""


class SingularDesign(UserWarning):
    """The beta-step design matrix is (near) singular; minimum-norm solution used."""


class NoConvergedStart(UserWarning):
    """No optimization start met the convergence tolerance within the iteration cap."""
