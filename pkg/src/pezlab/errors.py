"""Exception types raised across pezlab."""


class PezlabError(Exception):
    """Base class for every error raised by this package."""


# embedding / file format
class MalformedHeader(PezlabError, ValueError):
    pass


class NonFiniteEntry(PezlabError, ValueError):
    pass


class DuplicateToken(PezlabError, ValueError):
    pass


class TokenCountMismatch(PezlabError, ValueError):
    pass


class IoFailure(PezlabError, OSError):
    pass


class InvalidDims(PezlabError, ValueError):
    pass


class InvalidLength(PezlabError, ValueError):
    pass


class TableMismatch(PezlabError, ValueError):
    pass


class BadTemplate(PezlabError, ValueError):
    pass


# projection
class ZeroNormQuery(PezlabError, ValueError):
    pass


class EmptyMask(PezlabError, ValueError):
    pass


# objectives
class DegenerateEncoding(PezlabError, ArithmeticError):
    pass


class EmptyBatch(PezlabError, ValueError):
    pass


# optimizers
class ShapeMismatch(PezlabError, ValueError):
    pass


class NonFiniteGrad(PezlabError, ArithmeticError):
    pass


class NonFiniteLoss(PezlabError, ArithmeticError):
    pass


class MissingFluencyModel(PezlabError, ValueError):
    pass


class SearchSpaceTooLarge(PezlabError, ValueError):
    pass


# harness / cli
class MalformedCsv(PezlabError, ValueError):
    pass


class ConfigError(PezlabError, ValueError):
    pass
