"""Exception hierarchy shared across the package."""


class SurfnetError(Exception):
    """Base class for all library errors."""


class ParseError(SurfnetError):
    """Malformed mesh or data file."""


class ValidationError(SurfnetError):
    """Mesh violates a structural invariant (index range, orientation, NaN)."""


class NonManifoldEdge(ValidationError):
    """An edge is shared by more than two faces."""


class DegenerateFace(ValidationError):
    """Face area below the degeneracy threshold."""


class DimensionMismatch(SurfnetError):
    """Operand shapes are incompatible."""


class NonQuadChannels(DimensionMismatch):
    """Dirac path requires channel count divisible by 4."""


class InvalidBlock(SurfnetError):
    """4x4 matrix does not carry the quaternion block structure."""


class TooLarge(SurfnetError):
    """Problem exceeds the dense-solver size cap."""


class NonSymmetric(SurfnetError):
    """Matrix expected symmetric is not."""


class NonPositiveMass(SurfnetError):
    """Mass weights must be strictly positive."""


class NotScalar(SurfnetError):
    """backward() requires a scalar loss tensor."""


class ShapeMismatch(DimensionMismatch):
    """Parameter/gradient shapes disagree."""


class DegenerateInput(SurfnetError):
    """Input point set unusable (too few points, all collinear)."""


class OutOfDomain(SurfnetError):
    """Point lies outside the sampling domain."""


class DisconnectedMesh(SurfnetError):
    """Geodesic queries require a connected mesh."""


class NoLabels(SurfnetError):
    """Correspondence pair carries no ground-truth matches."""


class ConfigError(SurfnetError):
    """Run configuration failed validation."""
