"""
Exception hierarchy shared by every stage of the LSF pipeline.

The CLI maps these onto exit codes:
    ParameterError / MissingArtifactError -> 1 (usage)
    DataError and subclasses             -> 2 (data)
    ConvergenceWarning                   -> 3
"""

from typing import List, Optional


class LsfError(Exception):
    """Base class for pipeline errors"""


class ParameterError(LsfError, ValueError):
    """An argument is outside its documented domain"""


class DataError(LsfError):
    """Input data is malformed, truncated or missing"""


class HeaderParseError(DataError):
    def __init__(self, message: str, line_number: Optional[int] = None):
        self.line_number = line_number
        if line_number is not None:
            message = f"line {line_number}: {message}"
        super().__init__(message)


class UnsupportedFormatError(DataError):
    def __init__(self, format_code: str):
        self.format_code = format_code
        super().__init__(f"unsupported signal format '{format_code}' (only 212 is supported)")


class DecodeError(DataError):
    def __init__(self, message: str, offset: int):
        self.offset = offset
        super().__init__(f"{message} (byte offset {offset})")


class AnnotationTruncatedError(DataError):
    """Annotation stream ended before the zero end-word"""


class InterchangeFormatError(DataError):
    def __init__(self, message: str, line_number: Optional[int] = None):
        self.line_number = line_number
        if line_number is not None:
            message = f"line {line_number}: {message}"
        super().__init__(message)


class MissingRecordsError(DataError):
    def __init__(self, missing: List[str]):
        self.missing = sorted(missing)
        super().__init__(f"{len(self.missing)} record(s) missing: {', '.join(self.missing)}")


class UndefinedMetricError(LsfError, ValueError):
    """Metric needs both classes (or at least one positive) to be defined"""


class TrainingError(LsfError):
    """A model cannot be trained on the given inputs"""


class ComputationError(TrainingError):
    """Non-finite values reached a forward pass"""


class MissingArtifactError(LsfError):
    def __init__(self, artifact: str, stage: str):
        self.artifact = artifact
        self.stage = stage
        super().__init__(f"missing artifact '{artifact}': run {stage} first")


class ConvergenceWarning(UserWarning):
    """SMO stopped at its iteration cap before meeting the KKT tolerance"""
