"""Exception types shared across the package."""


class LocalizationError(Exception):
    """Base class for all errors raised by cicoloc."""


class DimensionMismatch(LocalizationError, ValueError):
    pass


class SingularCovariance(LocalizationError, ValueError):
    pass


class SingularInformation(LocalizationError, ValueError):
    pass


class DegenerateFusion(LocalizationError, ValueError):
    pass


class CoincidentPoints(LocalizationError, ValueError):
    pass


class UnknownTarget(LocalizationError, KeyError):
    pass


class SingularInnovation(LocalizationError, ValueError):
    pass


class WeightMismatch(LocalizationError, ValueError):
    pass


class ZeroSelfWeight(LocalizationError, ValueError):
    pass


class IndexOutOfRange(LocalizationError, IndexError):
    pass


class UnknownNode(LocalizationError, KeyError):
    pass


class LengthMismatch(LocalizationError, ValueError):
    pass


class BoundViolation(LocalizationError, ValueError):
    """A configured workspace bound no longer holds, so the upper-bound recursion is invalid."""


class ConfigError(LocalizationError, ValueError):
    pass


class MissingFile(LocalizationError, FileNotFoundError):
    pass


class MalformedLine(LocalizationError, ValueError):
    def __init__(self, path, lineno, line):
        super().__init__(f"{path}:{lineno}: cannot parse {line!r}")
        self.path = path
        self.lineno = lineno
        self.line = line


class EmptyWindow(LocalizationError, ValueError):
    pass
