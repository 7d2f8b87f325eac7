from typing import Optional, Tuple


class ElssaError(Exception):
    """Base class for every error raised by the toolkit"""


class InvalidInputError(ElssaError, ValueError):
    """A precondition on the arguments does not hold"""


class ImageIOError(ElssaError, OSError):
    """An image or artifact could not be read or written"""


class NumericalError(ElssaError):
    """A numerical routine failed on otherwise valid input"""


class ConvergenceError(NumericalError):
    def __init__(self, message: str, converged: int):
        super().__init__(message)
        self.converged = converged


class RankDeficientError(NumericalError):
    def __init__(self, message: str, pair: Optional[Tuple[int, int]] = None):
        super().__init__(message)
        self.pair = pair


class IllConditionedError(NumericalError):
    def __init__(self, message: str, condition: float):
        super().__init__(message)
        self.condition = condition
