"""Exception hierarchy.

Each family carries the CLI exit code it maps to (config=2, data=3, solver=4).
"""


class DrTubeError(Exception):
    exit_code = 1


class ConfigError(DrTubeError):
    exit_code = 2


class InvalidConfig(ConfigError):
    pass


class InvalidParams(ConfigError):
    pass


class DimensionMismatch(ConfigError):
    pass


class EmptyTightening(ConfigError):
    pass


class DataError(DrTubeError):
    exit_code = 3


class SchemaError(DataError):
    pass


class WindowOverrun(DataError):
    pass


class InsufficientTrajectories(DataError):
    pass


class OutOfRange(DataError):
    pass


class CholeskyFailure(DataError):
    pass


class MissingArtifacts(DataError):
    pass


class SolverError(DrTubeError):
    exit_code = 4


class NoConvergence(SolverError):
    pass


class NotLinear(SolverError):
    pass


class NotSolved(SolverError):
    pass


class NoTerminalPolicy(SolverError):
    pass


class InfeasibleHardTerminal(SolverError):
    pass


class StepFailure(SolverError):
    """Solver failure inside a closed-loop run, tagged with run and step."""

    def __init__(self, msg, step=None, run=None):
        super().__init__(msg)
        self.step = step
        self.run = run
