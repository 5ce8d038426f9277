"""Exception hierarchy.

Every error carries the process exit code the CLI maps it to:
2 for configuration problems, 3 for bad input data, 4 for numerical divergence.
"""


class SOSError(Exception):
    exit_code = 1


class ConfigError(SOSError, ValueError):
    exit_code = 2


class DataError(SOSError, ValueError):
    exit_code = 3


class NumericalError(SOSError, ArithmeticError):
    exit_code = 4


# region ingest
class MalformedRow(DataError):
    def __init__(self, line_no: int, reason: str = ""):
        self.line_no = line_no
        super().__init__(f"malformed manifest row at line {line_no}: {reason}".rstrip(": "))


class EmptyManifest(DataError):
    pass


class DegenerateBox(DataError):
    pass


class EmptyPool(DataError):
    pass


# ssl core
class ZeroVector(DataError):
    pass


class DimensionMismatch(DataError):
    pass


class SetTooSmall(DataError):
    pass


class NumericalOverflow(NumericalError):
    pass


class DivergenceDetected(NumericalError):
    pass


# checkpoints
class VersionMismatch(DataError):
    pass


class CorruptCheckpoint(DataError):
    pass


CorruptChecksum = CorruptCheckpoint


# fine-tuning and evaluation
class EmptyRegionList(DataError):
    pass


class LabelOutOfRange(DataError):
    pass


class PriorMismatch(DataError):
    pass


class VideoMismatch(DataError):
    pass


class EmptyPilot(DataError):
    pass


class UnknownVideo(DataError):
    pass


# synthetic bench
class SpecInvalid(ConfigError):
    pass


class DegenerateLabels(DataError):
    pass
