"""Exception hierarchy shared by every module of the package."""


class AdaptDHMError(Exception):
    """Base class for all package errors."""


class ShapeError(AdaptDHMError, ValueError):
    """Dimension mismatch between arrays that must agree.

    ``layer`` is the index of the offending MLP layer when the mismatch
    happened inside a network, otherwise ``None``.
    """

    def __init__(self, message, layer=None):
        if layer is not None:
            message = f"layer {layer}: {message}"
        super().__init__(message)
        self.layer = layer


class TapeError(AdaptDHMError, ValueError):
    """A backward pass was given a tape that does not belong to the params."""


class LabelError(AdaptDHMError, ValueError):
    """Labels outside {0, 1}."""


class UnknownFieldError(AdaptDHMError, KeyError):
    """A feature field name that the model or schema does not declare."""


class EmptyBatchError(AdaptDHMError, ValueError):
    pass


class RoutingError(AdaptDHMError, ValueError):
    pass


class NonFiniteLossError(AdaptDHMError, FloatingPointError):
    """Training produced NaN/Inf; carries a diagnostics dict."""

    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


class UndefinedMetricError(AdaptDHMError, ValueError):
    """AUC or GAUC requested on input where it is not defined (single class)."""


class SchemaError(AdaptDHMError, ValueError):
    """Malformed dataset file or a dataset/model schema mismatch."""

    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class ConfigError(AdaptDHMError, ValueError):
    pass


class CheckpointError(AdaptDHMError, ValueError):
    pass
