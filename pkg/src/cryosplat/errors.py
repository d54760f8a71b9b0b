"""Exception types shared across the package."""


class CryosplatError(Exception):
    """Base class for package-specific failures."""


class DataError(CryosplatError):
    """A file or on-disk structure is malformed or inconsistent."""


class UnsupportedModeError(DataError):
    """MRC file uses a sample mode other than 32-bit float."""

    def __init__(self, mode: int):
        super().__init__(f"unsupported MRC mode {mode} (only mode 2, 32-bit float, is supported)")
        self.mode = mode


class DegenerateRotationError(CryosplatError):
    """A quaternion with zero (or non-finite) norm cannot define a rotation."""


class DegenerateSplatError(CryosplatError):
    """A projected 2D covariance is not positive definite."""


class DivergenceError(CryosplatError):
    """Optimization produced a non-finite or exploding loss."""

    def __init__(self, message: str, *, epoch: int, step: int, record_index: int):
        super().__init__(f"{message} (epoch {epoch}, step {step}, record {record_index})")
        self.epoch = epoch
        self.step = step
        self.record_index = record_index
