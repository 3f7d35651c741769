"""Exception types shared across the package."""


class ForgetAttackError(Exception):
    """Base class; the CLI maps these to exit code 1."""


class ConfigError(ForgetAttackError, ValueError):
    pass


class ShapeError(ForgetAttackError, ValueError):
    pass


class DegenerateDataError(ForgetAttackError, ValueError):
    pass


class CalibrationSizeError(ForgetAttackError, ValueError):
    pass


class EmptyInputError(ForgetAttackError, ValueError):
    pass


class ZeroVarianceError(ForgetAttackError, ValueError):
    pass


class FormatError(ForgetAttackError):
    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


class DivergenceError(ForgetAttackError, FloatingPointError):
    def __init__(self, epoch: int):
        super().__init__(f"training diverged (non-finite loss) in epoch {epoch}")
        self.epoch = epoch
