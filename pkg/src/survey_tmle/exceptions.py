"""Exception hierarchy; ``exit_code`` is what the CLI returns for each."""


class SurveyTmleError(Exception):
    exit_code = 1


class InputError(SurveyTmleError, ValueError):
    """Malformed data, schema or arguments."""

    exit_code = 2


class PositivityError(InputError):
    """An exposure level required by the estimator is absent from the sample."""


class RejectiveInfeasible(SurveyTmleError, RuntimeError):
    """Conditioned-Poisson acceptance-rejection ran out of attempts."""

    exit_code = 3


class EstimationError(SurveyTmleError, RuntimeError):
    """Non-convergence or a degenerate quantity during estimation."""

    exit_code = 3

    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


class OracleFailure(SurveyTmleError, AssertionError):
    exit_code = 4
