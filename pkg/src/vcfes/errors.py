"""Exception hierarchy shared by every module.

Each class carries the CLI exit code it maps to, so the command-line
front end can translate failures without a lookup table.
"""


class VCFeSError(Exception):
    exit_code = 1


class ConfigError(VCFeSError, ValueError):
    exit_code = 2


class IoFailure(VCFeSError, OSError):
    exit_code = 2


class DimensionMismatch(VCFeSError, ValueError):
    exit_code = 2


class BadTarget(VCFeSError, ValueError):
    exit_code = 2


class MissingPrototypes(VCFeSError, ValueError):
    exit_code = 2


class NonFiniteLoss(VCFeSError, ArithmeticError):
    exit_code = 3


class MalformedFile(VCFeSError, ValueError):
    exit_code = 4


class FormatMismatch(VCFeSError, ValueError):
    exit_code = 4


class DuplicateImageId(VCFeSError, ValueError):
    exit_code = 5


class EmptyForeground(VCFeSError, ValueError):
    exit_code = 5


class DegenerateBatch(VCFeSError, ValueError):
    exit_code = 5


class DegenerateDataset(VCFeSError, ValueError):
    exit_code = 5


class EmptyIndex(VCFeSError, ValueError):
    exit_code = 5


class EmptyGallery(EmptyIndex):
    pass


class NoRelevant(VCFeSError, ValueError):
    exit_code = 5
