"""Exception types shared across the package."""


class MarlccError(Exception):
    """Base class for all package errors."""


class IntegrationError(MarlccError):
    """A vector field evaluated to a non-finite value during integration."""


class OrderLimitError(MarlccError):
    """Requested Lie derivative order exceeds the supported maximum."""


class RelativeDegreeError(MarlccError):
    """No finite relative degree exists at the query state."""


class SingularDecouplingError(MarlccError):
    """The decoupling matrix is (numerically) singular."""


class ModelConfigurationError(MarlccError):
    """A noise covariance or model parameter is invalid."""


class FusionSupportError(MarlccError):
    """Beliefs passed to fusion do not share a support."""


class ImpossibleObservationError(MarlccError):
    """An observation has zero likelihood under every state."""


class GameSizeError(MarlccError):
    """A coalition game is too large for the requested method."""


class CounterfactualUnavailableError(MarlccError):
    """No environment snapshot is available for counterfactual evaluation."""


class PlacementError(MarlccError):
    """Initial vehicle placement could not satisfy the spacing constraint."""


class ConfigError(MarlccError):
    """Experiment configuration failed validation."""


class CheckpointError(MarlccError):
    """A checkpoint is unreadable or incompatible with the configuration."""
