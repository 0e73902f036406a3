from typing import List, Optional


class SmartFlowError(Exception):
    """Base class of every error raised by the package."""


class ContractViolation(SmartFlowError, ValueError):
    """A caller broke an operation precondition (bad index, wrong shape, step after done)."""


class IngestError(SmartFlowError, ValueError):
    def __init__(self, message: str, path: Optional[str] = None, line: Optional[int] = None):
        location = ""
        if path is not None:
            location = f"{path}:{line}: " if line is not None else f"{path}: "
        super().__init__(f"{location}{message}")
        self.path = path
        self.line = line


class TrainingError(SmartFlowError, RuntimeError):
    """Training produced a non-finite loss; the run is aborted."""


class CheckpointError(SmartFlowError, ValueError):
    pass


class DistanceConfigError(SmartFlowError, ValueError):
    pass


class PlanValidationError(SmartFlowError, ValueError):
    def __init__(self, paths: List[str], details: str = ""):
        message = "journey plan failed validation at: " + ", ".join(paths)
        if details:
            message = f"{message}\n{details}"
        super().__init__(message)
        self.paths = paths
