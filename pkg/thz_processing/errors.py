"""Exception hierarchy shared by every module."""


class ThzError(Exception):
    """Base class for all errors raised by thz_processing"""


class ConfigError(ThzError):
    """Invalid configuration value"""


class VolumeFormatError(ThzError):
    """Volume or weight file could not be decoded"""


class BadMagicError(VolumeFormatError):
    pass


class TruncatedPayloadError(VolumeFormatError):
    pass


class HeaderMismatchError(VolumeFormatError):
    pass


class WindowError(ThzError):
    """Main-lobe cropping failed"""


class DimensionMismatchError(ThzError):
    pass


class SolverError(ThzError):
    """Trust-region fit could not start"""


class EncoderError(ThzError):
    pass


class ArchitectureMismatchError(EncoderError):
    pass


class ExportError(ThzError):
    """Writing an output file failed; message carries the path"""
