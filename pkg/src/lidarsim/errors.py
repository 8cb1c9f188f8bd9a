"""Exception hierarchy; each class maps onto one CLI exit code."""


class LidarSimError(Exception):
    exit_code = 1


class InputError(LidarSimError, ValueError):
    """Caller passed inconsistent or malformed arguments."""

    exit_code = 2


class FormatError(LidarSimError):
    """A binary or JSON file is corrupt or has an unexpected layout."""

    exit_code = 3


class QualityError(LidarSimError):
    """Too little usable data to build an asset."""

    exit_code = 4


class EmptyObjectError(QualityError):
    pass


class ResolutionError(LidarSimError, KeyError):
    """A scenario references a map or asset that cannot be found."""

    exit_code = 5

    def __str__(self):
        return Exception.__str__(self)
