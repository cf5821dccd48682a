"""Exception types shared across the package."""


class CohortLearnError(Exception):
    """Base class for package-specific failures."""


class ValidationError(CohortLearnError, ValueError):
    """Invalid argument values or malformed domain objects."""


class ParseError(ValidationError):
    """Malformed input file; message names the offending line."""


class ConfigError(CohortLearnError, ValueError):
    """Bad run configuration (unknown key, wrong type, missing file)."""


class RegistrationError(CohortLearnError, ValueError):
    """A registry name was claimed twice."""


class DivergenceError(CohortLearnError, RuntimeError):
    """Training produced a non-finite loss; message names the module."""
