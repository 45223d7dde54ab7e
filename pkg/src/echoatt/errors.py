"""Exception hierarchy shared by every echoatt module.

Each class carries a stable ``code`` used by the CLI when it reports a
failure as JSON.
"""


class EchoAttError(Exception):
    code = "error"
    exit_code = 1


class DimensionError(EchoAttError, ValueError):
    code = "dimension_error"
    exit_code = 3


class ContractError(EchoAttError, ValueError):
    code = "contract_error"
    exit_code = 4


class InputError(EchoAttError, ValueError):
    code = "input_error"
    exit_code = 5


class DegenerateInputError(InputError):
    code = "degenerate_input"
    exit_code = 6


class ConfigError(EchoAttError, ValueError):
    code = "invalid_config"
    exit_code = 7


class PlanMismatchError(ContractError):
    code = "plan_mismatch"
    exit_code = 8


class NonFiniteGradientError(EchoAttError, FloatingPointError):
    code = "non_finite_gradient"
    exit_code = 9

    def __init__(self, param: str, step: int):
        super().__init__(f"non-finite gradient in parameter {param!r} at step {step}")
        self.param = param
        self.step = step
