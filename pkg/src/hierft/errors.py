"""Exception types shared across the package."""


class HierftError(Exception):
    """Base class for all package errors."""


class ShapeError(HierftError, ValueError):
    pass


class ContractError(HierftError, ValueError):
    """A documented precondition was violated by the caller."""


class FormatError(HierftError, ValueError):
    """Input data or a file does not follow the expected format."""


class SchemaError(FormatError):
    pass


class CorruptionError(FormatError):
    """A container file is truncated or internally inconsistent."""


class CompatibilityError(HierftError):
    """A checkpoint and a corpus were produced from different vocabularies or trees."""
