"""Exception types shared across the package."""


class SimError(Exception):
    """Base class for all package-specific errors."""


class ParseError(SimError):
    """A mesh or config file could not be parsed; message carries location."""


class ValidationError(SimError):
    """A mesh or config violated a named structural invariant."""


class ConfigError(SimError):
    """Bad configuration value or unknown key."""


class EmptyInputError(SimError):
    """An operation requiring at least one primitive got none."""


class SizeMismatchError(SimError):
    """Array sizes disagree with the structure they update."""


class DegenerateElementError(SimError):
    """A tetrahedron is too close to zero volume for the requested operation."""


class NonWatertightError(ValidationError):
    """An obstacle surface is not closed and consistently oriented."""


class SingularSystemError(SimError):
    """The global system has a translational null space (no anchor, no spring)."""


class FactorizationError(SimError):
    """Sparse factorization failed unexpectedly."""


class InterfaceMismatchError(SimError):
    """A tessellator returned a boundary that does not match the interface."""


class RemeshError(SimError):
    """Remeshing failed; the simulation keeps its last good state."""
