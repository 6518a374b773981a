"""Exception types shared across the package."""


class RefSegError(Exception):
    """Base class for every error raised by this package."""


class ConfigError(RefSegError, ValueError):
    pass


class ShapeError(RefSegError, ValueError):
    pass


class EmptyTextError(RefSegError, ValueError):
    pass


class DegenerateError(RefSegError, ValueError):
    pass


class EmptySetError(RefSegError, ValueError):
    pass


class MissingPredictionError(RefSegError, LookupError):
    def __init__(self, missing):
        self.missing = sorted(missing)
        super().__init__("missing predictions for: " + ", ".join(self.missing))


class ManifestError(RefSegError, ValueError):
    def __init__(self, path, lineno, reason):
        self.path = path
        self.lineno = lineno
        super().__init__(f"{path}: line {lineno}: {reason}")


class MissingFileError(RefSegError, FileNotFoundError):
    pass


class SpecError(RefSegError, ValueError):
    pass


class ImageFormatError(RefSegError, ValueError):
    pass


class CheckpointShapeError(RefSegError, ValueError):
    pass


class DivergenceError(RefSegError, RuntimeError):
    pass
