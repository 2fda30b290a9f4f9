"""Exception types raised across the package."""


class OFMLMCError(Exception):
    """Base class for all package errors."""


class IndicatorError(OFMLMCError):
    """A level has no usable samples for indicator estimation."""

    def __init__(self, level, message=None):
        self.level = level
        super().__init__(message or f"level {level} has zero valid samples")


class EstimatorError(OFMLMCError):
    pass


class BudgetError(OFMLMCError):
    """The budget cannot pay for one sample per difference level."""

    def __init__(self, budget, minimum):
        self.budget = budget
        self.minimum = minimum
        super().__init__(
            f"budget {budget:g} is below the minimum feasible budget {minimum:g} "
            "(one sample per level)"
        )


class ConfigError(OFMLMCError):
    """Invalid campaign configuration; ``key`` is the dotted key path."""

    def __init__(self, key, message):
        self.key = key
        super().__init__(f"{key}: {message}")


class CampaignAbort(OFMLMCError):
    """A whole difference level produced zero valid samples."""

    def __init__(self, level):
        self.level = level
        super().__init__(f"campaign aborted: level {level} yielded zero valid samples")


class CloudGenerationError(OFMLMCError):
    pass


class StoreError(OFMLMCError):
    pass
