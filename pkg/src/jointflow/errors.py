"""Exception hierarchy shared across the package.

The CLI maps each family onto a process exit code, see ``jointflow.cli``.
"""


class JointFlowError(Exception):
    """Base class for all package errors."""


class ShapeError(JointFlowError, ValueError):
    """Tensor dimensions do not satisfy an operation's contract."""


class ContractError(JointFlowError, ValueError):
    """A precondition other than shape was violated."""


class DomainError(ContractError):
    """A scalar argument is outside its legal range."""


class ConfigError(JointFlowError):
    """Invalid or mismatched configuration."""


class FormatError(JointFlowError):
    """Malformed or unsupported file contents."""


class NumericalError(JointFlowError, ArithmeticError):
    """NaN/Inf encountered where finite values are required."""

    def __init__(self, message: str, step: int | None = None):
        super().__init__(message)
        self.step = step
