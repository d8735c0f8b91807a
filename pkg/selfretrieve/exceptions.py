from __future__ import annotations


class Error(Exception):
    pass


class DecodeError(Error):
    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


class InvalidSignature(Error):
    pass


class ChecksumError(Error):
    pass


class VersionError(Error):
    pass


class ConfigurationError(Error):
    def __init__(self, message: str, key: str | None = None):
        super().__init__(f"{key}: {message}" if key else message)
        self.key = key


class NormalizationError(Error):
    pass


class TrainingError(Error):
    pass


class ConvergenceError(Error):
    def __init__(self, message: str, residual: float):
        super().__init__(f"{message} (residual {residual:.3e})")
        self.residual = residual


class DatasetError(Error):
    pass


class MissingArtifactError(Error):
    def __init__(self, path: object):
        super().__init__(f"Missing artifact: {path}")
        self.path = path
