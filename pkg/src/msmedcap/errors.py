"""Exception hierarchy. Each top-level class maps to one CLI exit code."""


class MSMedCapError(Exception):
    exit_code = 1


class ConfigError(MSMedCapError):
    exit_code = 2


class DataError(MSMedCapError):
    exit_code = 3


class NumericError(MSMedCapError):
    exit_code = 4


class ArtifactError(MSMedCapError):
    exit_code = 5


class VersionMismatchError(ArtifactError):
    pass


class CorruptBlobError(ArtifactError):
    pass


class FingerprintMismatchError(ArtifactError):
    pass


class FrozenParameterError(ArtifactError):
    """A parameter declared frozen changed during a training stage."""
