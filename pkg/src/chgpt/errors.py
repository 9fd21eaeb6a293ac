"""Exception hierarchy shared by every lab module."""


class ChgptError(Exception):
    """Base class for all errors raised by the package."""


class ScenarioError(ChgptError, ValueError):
    """Invalid scenario content; ``field`` carries the dotted path when known."""

    def __init__(self, message, field=None):
        self.field = field
        if field:
            message = f"{field}: {message}"
        super().__init__(message)


class SingularHazardError(ChgptError):
    pass


class CompensatorUndefinedError(ChgptError):
    pass


class NumericalOverflowError(ChgptError):
    """A simulated path left the finite range."""

    def __init__(self, path_index, step):
        self.path_index = int(path_index)
        self.step = int(step)
        super().__init__(f"non-finite state on path {self.path_index} at step {self.step}")


class PathInconsistencyError(ChgptError):
    pass


class UnsupportedScenarioError(ChgptError):
    pass


class ArbitrageDetectedError(ChgptError):
    pass


class VerificationError(ChgptError):
    pass
