"""Exception types raised across the package."""


class DegenerateInputError(ValueError):
    """Input is structurally too small for the operation (e.g. 1-pixel image)."""


class InsufficientLabelsError(ValueError):
    """Not enough labeled classes/samples to mine triplets."""


class MissingFeatureError(KeyError):
    """External feature provider has no record for the requested segment."""
