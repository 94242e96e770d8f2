"""Exception types shared across the toolkit."""


class MofheiError(Exception):
    """Base class for all toolkit errors."""


class ShapeError(MofheiError):
    """Tensor shape does not match a layer's declared input shape."""

    def __init__(self, layer_index, expected, actual, message=""):
        self.layer_index = layer_index
        self.expected = tuple(expected) if expected is not None else None
        self.actual = tuple(actual) if actual is not None else None
        detail = message or "shape mismatch"
        super().__init__(
            f"layer {layer_index}: {detail} (expected {self.expected}, got {self.actual})"
        )


class ModelFormatError(MofheiError):
    """Persisted model file is malformed.

    ``offset`` is the byte offset at which parsing failed, when known.
    """

    def __init__(self, message, offset=None):
        self.offset = offset
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)


class VersionError(ModelFormatError):
    """Persisted model uses an unsupported schema version."""

    def __init__(self, found, supported):
        self.found = found
        self.supported = supported
        MofheiError.__init__(
            self, f"unsupported model schema version {found!r}; this build reads {supported!r}"
        )


class DatasetError(MofheiError):
    """Dataset file is malformed; carries offset (binary) or row (CSV) context."""

    def __init__(self, message, offset=None, row=None):
        self.offset = offset
        self.row = row
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        if row is not None:
            message = f"{message} (at row {row})"
        super().__init__(message)


class TrainingDivergedError(MofheiError):
    """Loss became non-finite during training."""

    def __init__(self, epoch, loss_value=None):
        self.epoch = epoch
        self.loss_value = loss_value
        super().__init__(f"training diverged at epoch {epoch} (loss={loss_value})")


class CapacityError(MofheiError):
    """Batch does not fit the configured slot count."""


class DepthBudgetError(MofheiError):
    """Multiplicative depth budget exhausted.

    Raised both statically (program needs more depth than configured) and
    dynamically (an operation would consume a level a ciphertext no longer
    has); ``layer_index`` names the offending layer when known.
    """

    def __init__(self, message, layer_index=None):
        self.layer_index = layer_index
        if layer_index is not None:
            message = f"layer {layer_index}: {message}"
        super().__init__(message)


class NotHeFriendlyError(MofheiError):
    """Model contains a layer the HE engine cannot evaluate."""

    def __init__(self, layer_index, kind):
        self.layer_index = layer_index
        self.kind = kind
        super().__init__(f"layer {layer_index} ({kind}) is not HE-friendly")
