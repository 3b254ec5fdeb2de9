"""Exception hierarchy shared by the pipeline.

The CLI maps these onto exit codes, so each class carries the code it
should produce when it escapes a command.
"""


class EvloopError(Exception):
    exit_code = 2


class ShapeError(EvloopError, ValueError):
    pass


class NumericError(EvloopError, ArithmeticError):
    exit_code = 3


class InvalidCacheError(EvloopError, RuntimeError):
    pass


class LayerLookupError(EvloopError, KeyError):
    def __str__(self):
        return str(self.args[0]) if self.args else ""


class TrainingError(EvloopError, RuntimeError):
    pass


class UndefinedROCError(EvloopError, ValueError):
    pass


class DegenerateError(EvloopError, ValueError):
    pass


class FullCoverageError(EvloopError, ValueError):
    pass


class GenerationError(EvloopError, RuntimeError):
    pass


class CheckpointError(EvloopError, ValueError):
    pass
