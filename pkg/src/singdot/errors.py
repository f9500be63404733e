"""Typed errors raised across the package."""


class SingdotError(Exception):
    """Base class for all package errors."""


class ConfigParseError(SingdotError):
    """Malformed or inconsistent run configuration."""


class CheckFailure(SingdotError):
    """An asserted numerical check did not hold."""


# --- coefficient admissibility ---------------------------------------------

class NonSymmetric(SingdotError):
    """K(x) is not symmetric at some sample point."""


class EllipticityViolation(SingdotError):
    """Re K fails the lower ellipticity bound at some sample point."""


class CommutationViolation(SingdotError):
    """Re K and Im K do not commute at some sample point."""


class BoundViolation(SingdotError):
    """A magnitude bound (|K| <= lambda, |q| < Lambda, ...) fails."""


# --- kernel evaluation -------------------------------------------------------

class DegeneratePoint(SingdotError):
    """Kernel evaluated where the quadratic form degenerates (x = y)."""


class ZeroBase(SingdotError):
    """Principal-branch power of zero requested."""


class DegreeOverflow(SingdotError):
    """Polynomial degree beyond the evaluator's configured maximum."""


class SampleOutOfRegion(SingdotError):
    """Sample point outside the validated region of an estimate."""


class RegionViolation(SingdotError):
    """Point pair violates a series/expansion region constraint."""


# --- quadrature and potentials ----------------------------------------------

class QuadratureNotConverged(SingdotError):
    """Refinement did not stabilize the quadrature value."""


class NonIntegralViolation(SingdotError):
    """Decay index s too close to an integer for the construction."""


class LadderStageFailure(SingdotError):
    """A correction-ladder stage produced an invalid field or slope."""


# --- finite-difference solver -------------------------------------------------

class MaskedNeighborError(SingdotError):
    """A stencil neighbor is neither active nor covered by boundary data."""


class SingularSystem(SingdotError):
    """Discrete system factorization failed (singular matrix)."""


class ExcisionTooSmall(SingdotError):
    """Puncture excision radius below the 3h resolvability limit."""


class SingularMatrix(SingdotError):
    """A dense matrix inversion/factorization failed."""


class MeshMismatch(SingdotError):
    """Grid fields with incompatible shapes or spacings combined."""


# --- DOT layer ----------------------------------------------------------------

class EigensolveFailure(SingdotError):
    """Boundary-graph eigendecomposition failed or graph disconnected."""


class InadmissiblePerturbation(SingdotError):
    """Perturbed optical parameters leave the admissible class."""


class PoleInsideDomain(SingdotError):
    """Singular-probe pole placed inside the closed domain."""
