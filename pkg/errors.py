"""
Exception types shared by every stage of the pipeline.

Each error carries a human readable ``detail`` and the process ``exit_code``
the command line maps it to (2 validation, 3 numeric failure, 4 audit).
"""


class SynthPopError(Exception):
    exit_code = 1

    def __init__(self, detail: str, exit_code: int = None):
        super().__init__(detail)
        self.detail = detail
        if exit_code is not None:
            self.exit_code = exit_code

    def __str__(self) -> str:
        return self.detail


class ValidationError(SynthPopError):
    """Input data violates its schema (row and column are named in the detail)."""
    exit_code = 2


class SchemaError(SynthPopError):
    exit_code = 2


class ConfigError(SynthPopError):
    exit_code = 2


class PackFormatError(SynthPopError):
    exit_code = 2


class NumericError(SynthPopError):
    exit_code = 3


class ConvergenceError(NumericError):
    pass


class DisclosureError(SynthPopError):
    exit_code = 4


class AuditError(SynthPopError):
    exit_code = 4
