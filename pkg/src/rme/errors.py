"""Exception types shared across the package."""


class DomainError(ValueError):
    """Input outside the domain of an operation (non-finite, wrong shape, bad config)."""


class SimulationFault(RuntimeError):
    """The simulated plant entered an unrecoverable state (singular M, NaN state)."""


class TrainingDiverged(RuntimeError):
    """Loss became non-finite during network training."""


class WeightsFormatError(ValueError):
    """A weights file is truncated, has the wrong schema, or mismatched shapes."""
