"""Exception types raised across the package."""


class CareError(Exception):
    """Base class for every error raised by this package."""


class ConfigError(CareError, ValueError):
    """One or more hyperparameters are out of range.

    ``violations`` lists every problem found, not only the first one.
    """

    def __init__(self, violations):
        if isinstance(violations, str):
            violations = [violations]
        self.violations = list(violations)
        super().__init__("; ".join(self.violations))


class MalformedRolloutError(CareError, ValueError):
    pass


class MissingEmbeddingError(CareError, ValueError):
    def __init__(self, index):
        self.index = index
        super().__init__(f"rollout {index} has no rationale embedding")


class DegenerateSubgroupError(CareError, ValueError):
    pass


class ContractViolation(CareError, RuntimeError):
    pass


class DivergenceError(CareError, RuntimeError):
    pass


class InfiniteDivergenceError(CareError, ValueError):
    """KL is infinite: the reference puts zero mass where the policy does not."""


class DataError(CareError, ValueError):
    """Bad input data in an offline file; ``line`` is 1-based when known."""

    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
