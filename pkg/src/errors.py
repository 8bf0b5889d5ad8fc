"""Exception hierarchy shared by every rigsplat module."""

from typing import Optional, Tuple


class RigSplatError(Exception):
    """Base class for all errors raised by rigsplat."""


class InvalidPoseError(RigSplatError, ValueError):
    pass


class BehindCameraError(RigSplatError, ValueError):
    pass


class InvalidDepthError(RigSplatError, ValueError):
    def __init__(self, message: str, pixel: Optional[Tuple[int, int, int]] = None):
        super().__init__(message)
        # (camera, u, v) when raised while lifting a depth map
        self.pixel = pixel


class InvalidRotationError(RigSplatError, ValueError):
    pass


class ShapeError(RigSplatError, ValueError):
    pass


class SizeError(RigSplatError, ValueError):
    pass


class ProtocolError(RigSplatError):
    pass


class DegenerateInputError(RigSplatError, ValueError):
    pass


class TemporalOrderError(RigSplatError, ValueError):
    pass


class ConfigError(RigSplatError, ValueError):
    def __init__(self, message: str, key: Optional[str] = None):
        super().__init__(message)
        self.key = key


class UsageError(RigSplatError):
    pass


class FormatError(RigSplatError, ValueError):
    pass
