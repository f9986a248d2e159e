"""Exception types shared across the package.

The CLI maps these onto its exit-code contract: validation problems exit 2,
degenerate/infeasible math exits 3, optimizer divergence exits 4 and internal
identity violations exit 5.
"""


class ProtoForgeError(Exception):
    """Base class for all package errors."""


# -- validation / bad input (CLI exit 2) --------------------------------------

class ShapeMismatch(ProtoForgeError):
    pass


class DimensionMismatch(ProtoForgeError):
    pass


class BadTemplate(ProtoForgeError):
    pass


class EmptyText(ProtoForgeError):
    pass


class NotNormalized(ProtoForgeError):
    pass


class RankTooLarge(ProtoForgeError):
    pass


class EmptyAssignment(ProtoForgeError):
    pass


class EmptyClassPool(ProtoForgeError):
    pass


class NonFinite(ProtoForgeError):
    pass


# -- degenerate / infeasible math (CLI exit 3) ---------------------------------

class ZeroRow(ProtoForgeError):
    pass


class RankDeficient(ProtoForgeError):
    pass


class InfeasibleConfusion(ProtoForgeError):
    pass


class NoConvergence(ProtoForgeError):
    def __init__(self, message: str, residual: float | None = None):
        super().__init__(message)
        self.residual = residual


# -- runtime failures ----------------------------------------------------------

class DivergedLoss(ProtoForgeError):
    """Optimizer blew up (CLI exit 4)."""


class IdentityViolation(ProtoForgeError):
    """A mathematical identity that must hold by construction failed (CLI exit 5)."""


VALIDATION_ERRORS = (
    ShapeMismatch,
    DimensionMismatch,
    BadTemplate,
    EmptyText,
    NotNormalized,
    RankTooLarge,
    EmptyAssignment,
    EmptyClassPool,
    NonFinite,
)

DEGENERATE_ERRORS = (ZeroRow, RankDeficient, InfeasibleConfusion, NoConvergence)
