"""Exception hierarchy shared by the library and the command line."""


class DisorderSwitchError(Exception):
    """Base class; ``exit_code`` is what the CLI returns when this escapes."""

    exit_code = 4


class PoleError(DisorderSwitchError, ValueError):
    pass


class ConvergenceError(DisorderSwitchError, ArithmeticError):
    pass


class DegenerateParameterError(DisorderSwitchError, ValueError):
    pass


class SingularArgumentError(DisorderSwitchError, ValueError):
    pass


class SingularSystemError(DisorderSwitchError, ArithmeticError):
    pass


class EvaluationOverflowError(DisorderSwitchError, OverflowError):
    pass


class InadmissibleParametersError(DisorderSwitchError):
    exit_code = 2

    def __init__(self, message, slacks=None):
        super().__init__(message)
        self.slacks = slacks


class NoSolutionError(DisorderSwitchError):
    def __init__(self, message, sign_pattern=None):
        super().__init__(message)
        self.sign_pattern = sign_pattern


class VerificationError(DisorderSwitchError):
    exit_code = 3

    def __init__(self, message, violations=None):
        super().__init__(message)
        self.violations = violations or []
