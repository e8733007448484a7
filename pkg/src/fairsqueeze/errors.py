"""Exception types raised across the package."""


class FairsqueezeError(Exception):
    pass


class DimensionError(FairsqueezeError, ValueError):
    """Array shapes do not line up."""


class ParameterError(FairsqueezeError, ValueError):
    """An argument lies outside its allowed range."""


class IntegrityError(FairsqueezeError):
    """A mask or codebook no longer agrees with the model it describes."""


class LoadError(FairsqueezeError):
    """A manifest row or image could not be ingested."""


class SplitError(FairsqueezeError):
    pass


class PlanError(FairsqueezeError, ValueError):
    """A compression pipeline is ordered in a way that cannot be executed."""


class TrainingError(FairsqueezeError, RuntimeError):
    pass


class FormatError(FairsqueezeError):
    """A model file is malformed."""
