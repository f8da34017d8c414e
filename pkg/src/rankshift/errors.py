"""Exception hierarchy shared by every module."""


class RankShiftError(Exception):
    pass


class ShapeError(RankShiftError, ValueError):
    pass


class DomainError(RankShiftError, ValueError):
    """Non-finite input where finite values are required."""


class ParameterError(RankShiftError, ValueError):
    pass


class StateError(RankShiftError, RuntimeError):
    """Operation applied to a layer in the wrong rank mode."""


class ContractError(RankShiftError, RuntimeError):
    pass


class ConfigError(RankShiftError, ValueError):
    def __init__(self, problems):
        if isinstance(problems, str):
            problems = [problems]
        self.problems = list(problems)
        super().__init__("; ".join(self.problems))


class IngestionError(RankShiftError, ValueError):
    pass
