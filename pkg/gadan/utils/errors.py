"""
Error hierarchy shared by every module.
Library code raises these; the CLI maps them to exit codes.
"""

from typing import Optional, Sequence


class GADANError(Exception):
    """Base class for all domain errors"""


class ConfigError(GADANError):
    """Invalid run configuration"""

    def __init__(self, message: str, key: Optional[str] = None, line: Optional[int] = None):
        self.key = key
        self.line = line
        location = ""
        if key is not None:
            location = f" [key '{key}'" + (f", line {line}]" if line is not None else "]")
        super().__init__(f"{message}{location}")


class ShapeMismatch(GADANError):
    """Tensor shapes do not agree with the operation's contract"""


class KindMismatch(GADANError):
    """Two transforms of different kinds were combined"""


class SingularTransform(GADANError):
    """A transform cannot be built, normalized or inverted"""

    def __init__(self, message: str, indices: Sequence[int] = ()):
        self.indices = list(indices)
        suffix = f" (batch rows {self.indices})" if self.indices else ""
        super().__init__(f"{message}{suffix}")


class NonFiniteTensor(GADANError):
    """A tensor contains NaN or Inf"""

    def __init__(self, name: str):
        self.name = name
        super().__init__(f"Non-finite values in '{name}'")


class NonFiniteLoss(NonFiniteTensor):
    """A training loss (or one of its inputs) became NaN or Inf"""


class EmptyDomain(GADANError):
    """An image domain folder has no decodable images"""


class DataIoError(GADANError):
    """Reading or writing an image or checkpoint failed"""


class CheckpointError(GADANError):
    """Checkpoint has the wrong format version or missing content"""
