"""Exception types shared across the package."""


class ValrError(Exception):
    """Base class for user-facing errors (CLI exit code 1)."""


class DimensionError(ValrError):
    pass


class NumericError(ValrError):
    pass


class DegenerateVectorError(NumericError):
    pass


class EmptyLossError(ValrError):
    pass


class PatchGridError(ValrError):
    pass


class FeatureStoreError(ValrError):
    """Malformed feature store file."""


class FeatureLookupError(ValrError, KeyError):
    pass


class InvariantError(ValrError):
    pass


class SequenceLengthError(ValrError):
    pass


class CacheError(ValrError):
    pass


class StructureError(ValrError):
    pass


class CurationError(ValrError):
    pass


class SchemaError(ValrError):
    pass


class ConfigError(ValrError):
    pass


class CheckpointError(ValrError):
    pass
