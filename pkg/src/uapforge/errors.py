"""Exception types raised across the toolkit."""


class UapForgeError(Exception):
    pass


class ShapeError(UapForgeError, ValueError):
    pass


class ContractError(UapForgeError, ValueError):
    """A caller broke a documented precondition."""


class ParameterError(UapForgeError, ValueError):
    pass


class DatasetError(UapForgeError):
    pass


class CorruptImageError(DatasetError):
    pass


class CorruptionError(UapForgeError):
    """An artifact on disk failed its integrity check."""


class BudgetError(UapForgeError, ValueError):
    """A perturbation exceeds its declared l-inf budget."""


class NonFiniteLossError(UapForgeError, FloatingPointError):
    pass


class ConfigError(UapForgeError, ValueError):
    def __init__(self, problems):
        if isinstance(problems, str):
            problems = [problems]
        self.problems = list(problems)
        super().__init__("invalid config:\n  " + "\n  ".join(self.problems))
