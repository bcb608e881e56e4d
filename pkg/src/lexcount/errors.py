"""Exception hierarchy. Every error carries a short machine-greppable code."""


class LexcountError(Exception):
    """Base class; `code` is stable and printed by the CLI as error[<code>]."""

    code = "internal"
    user_error = False


class LoadError(LexcountError):
    code = "load"
    user_error = True


class ValidationError(LexcountError):
    code = "validation"
    user_error = True


class ConfigError(LexcountError):
    code = "config"
    user_error = True


class GenerationError(LexcountError):
    code = "generation"
    user_error = True


class ContractError(LexcountError):
    code = "contract"


class NumericalError(LexcountError):
    code = "numerical"


class AnnotationError(LexcountError):
    code = "annotation"
    user_error = True

    def __init__(self, message, last_response=None):
        super().__init__(message)
        self.last_response = last_response


class CheckpointError(LexcountError):
    code = "checkpoint"
