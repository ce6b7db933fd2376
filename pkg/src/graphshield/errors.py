"""Exception types shared across the package.

The CLI maps these onto exit codes: ConfigError -> 1, MissingArtifactError -> 2,
NumericalError -> 3.
"""


class GraphShieldError(Exception):
    """Base class for all package errors."""


class ShapeError(GraphShieldError):
    """Dimension mismatch between arrays, layers, or fitted artifacts."""


class ConfigError(GraphShieldError):
    """Invalid configuration or parameter values."""


class MissingArtifactError(GraphShieldError):
    """A pipeline stage input file does not exist or fails its fingerprint check."""


class NumericalError(GraphShieldError):
    """Non-finite values encountered during computation."""


class AttackError(GraphShieldError):
    """Attack produced no usable adversarial examples."""


class DomainError(GraphShieldError):
    """Input values outside the supported domain (e.g. negative activations)."""
