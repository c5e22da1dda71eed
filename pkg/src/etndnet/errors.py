"""Exception types raised across the package."""


class ETNDError(Exception):
    """Base class for all package errors."""


class GridTooSmall(ETNDError):
    pass


class SamplingExhausted(ETNDError):
    pass


class ShapeMismatch(ETNDError):
    pass


class LabelOutOfRange(ETNDError):
    pass


class NonFiniteLoss(ETNDError):
    def __init__(self, iteration, values):
        super().__init__(f"non-finite loss at iteration {iteration}: {values}")
        self.iteration = iteration
        self.values = values


class DimensionMismatch(ETNDError):
    pass


class NoValidGallery(ETNDError):
    pass


class MalformedFilename(ETNDError):
    def __init__(self, path):
        super().__init__(f"filename does not match <identity>_c<camera>_<seq>.<ext>: {path}")
        self.path = path


class EmptyDataset(ETNDError):
    pass


class TooFewIdentities(ETNDError):
    pass


class ConfigError(ETNDError):
    def __init__(self, field, message):
        super().__init__(f"{field}: {message}")
        self.field = field
