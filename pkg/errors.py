"""
Exception hierarchy shared by every module.
Each error carries the process exit code the CLI reports for it.
"""


class OPECError(Exception):
    """Base class for all pipeline errors"""

    exit_code = 1


class ConfigError(OPECError):
    exit_code = 2


class TopologyError(ConfigError):
    """Skeleton definition is inconsistent"""


class DataError(OPECError):
    exit_code = 3


class ShapeError(DataError):
    """Tensor shape does not match the configured contract"""


class CheckpointError(DataError):
    pass


class NumericError(OPECError):
    """Non-finite values met during training or sampling"""

    exit_code = 4

    def __init__(self, message: str, batch_id: int = None, joint: int = None):
        super().__init__(message)
        self.batch_id = batch_id
        self.joint = joint
