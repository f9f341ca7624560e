"""Exception hierarchy with stable error codes for CLI reporting.

Validation errors (bad input, unknown names, contract violations caught
before any numerics run) map to CLI exit code 2; numerical failures
(divergence, singularity, non-convergence) map to exit code 3.
"""


class IsoslowError(Exception):
    code = "error"
    exit_code = 3

    def __init__(self, message, **details):
        super().__init__(message)
        self.details = details

    def payload(self):
        out = {"code": self.code, "message": str(self)}
        if self.details:
            out["details"] = {k: _jsonable(v) for k, v in self.details.items()}
        return out


def _jsonable(v):
    try:
        import numpy as np

        if isinstance(v, np.ndarray):
            return v.tolist()
        if isinstance(v, (np.floating, np.integer)):
            return v.item()
        if isinstance(v, (np.complexfloating, complex)):
            return [v.real, v.imag]
    except ImportError:  # pragma: no cover
        pass
    return v


class ValidationError(IsoslowError):
    code = "validation"
    exit_code = 2


class NumericalError(IsoslowError):
    code = "numerical"
    exit_code = 3


# -- numerics ---------------------------------------------------------------

class NonFinite(ValidationError):
    code = "non_finite"


class NonDiagonalizable(NumericalError):
    code = "non_diagonalizable"


class Singular(NumericalError):
    code = "singular"


class StepLimitExceeded(NumericalError):
    code = "step_limit_exceeded"


class BlowUp(NumericalError):
    code = "blow_up"


# -- models -----------------------------------------------------------------

class UnknownModel(ValidationError):
    code = "unknown_model"


class UnknownParameter(ValidationError):
    code = "unknown_parameter"


class OrderUnavailable(ValidationError):
    code = "order_unavailable"


class FDUnreliable(NumericalError):
    code = "fd_unreliable"


# -- spectrum ---------------------------------------------------------------

class NoConvergence(NumericalError):
    code = "no_convergence"


class UnstableFixedPoint(NumericalError):
    code = "unstable_fixed_point"


class PairSplit(ValidationError):
    code = "pair_split"


class OutOfRange(ValidationError):
    code = "out_of_range"


# -- isostable --------------------------------------------------------------

class GridMismatch(ValidationError):
    code = "grid_mismatch"


class BasinEscape(NumericalError):
    code = "basin_escape"


class HorizonExceeded(NumericalError):
    code = "horizon_exceeded"


# -- expansion --------------------------------------------------------------

class Resonance(NumericalError):
    code = "resonance"


class OrderTooHigh(ValidationError):
    code = "order_too_high"


class OutOfValidityRadius(UserWarning):
    """Warning: reconstruction requested outside the series validity radius."""


# -- manifold ---------------------------------------------------------------

class IllConditioned(NumericalError):
    code = "ill_conditioned"


class DegenerateFastBasis(NumericalError):
    code = "degenerate_fast_basis"


class AbortOnDivergence(NumericalError):
    code = "abort_on_divergence"


# -- rom --------------------------------------------------------------------

class InsufficientCoverage(NumericalError):
    code = "insufficient_coverage"


class DomainExit(NumericalError):
    code = "domain_exit"


class NotSettled(NumericalError):
    code = "not_settled"


class NoBifurcationInRange(NumericalError):
    code = "no_bifurcation_in_range"


# -- io / plotting ----------------------------------------------------------

class MissingColumn(ValidationError):
    code = "missing_column"
