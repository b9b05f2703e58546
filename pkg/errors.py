# errors.py

"""Exception hierarchy shared by every stage, and the CLI exit-code mapping."""

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_RUNTIME = 3


class KKTAuditError(Exception):
    exit_code = EXIT_RUNTIME


class ConfigError(KKTAuditError, ValueError):
    """Invalid or infeasible configuration (unknown keys, bad counts, path collisions)."""
    exit_code = EXIT_CONFIG


class InputError(KKTAuditError, ValueError):
    """Fatal input error: dimension mismatch or a label outside [C]."""
    exit_code = EXIT_CONFIG


class TrainingDivergedError(KKTAuditError, RuntimeError):
    pass


class NoRetainedCandidatesError(KKTAuditError, RuntimeError):
    def __init__(self, message: str = "no correctly classified candidates"):
        super().__init__(message)


class SolverError(KKTAuditError, RuntimeError):
    def __init__(self, block_id: int, message: str):
        super().__init__(f"block {block_id}: {message}")
        self.block_id = block_id


class EvaluationError(KKTAuditError, ValueError):
    pass


class ArtifactFormatError(KKTAuditError, ValueError):
    pass
