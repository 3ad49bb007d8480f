"""Exception hierarchy shared across the pipeline."""


class FlowLMError(Exception):
    """Base class for all library errors."""


class MalformedRow(FlowLMError):
    """``row_number`` is the 0-based data-row index; ``line`` the 1-based file line when known."""

    def __init__(self, row_number: int, reason: str, line: int | None = None, path: str | None = None):
        where = f"data row {row_number}" if line is None else f"line {line} (data row {row_number})"
        if path:
            where = f"{path}, {where}"
        super().__init__(f"{where}: {reason}")
        self.row_number = row_number
        self.reason = reason
        self.line = line
        self.path = path


class UnknownLabel(FlowLMError):
    pass


class InsufficientLabel(FlowLMError):
    pass


class EmptyFitSet(FlowLMError):
    pass


class FormatVersionMismatch(FlowLMError):
    pass


class EmptyTable(FlowLMError):
    pass


class RaggedBatch(FlowLMError):
    pass


class IdOutOfRange(FlowLMError):
    pass


class ShapeMismatch(FlowLMError):
    pass


class NoMaskedPositions(FlowLMError):
    pass


class NonFiniteGradient(FlowLMError):
    def __init__(self, tensor_name: str):
        super().__init__(f"non-finite gradient in {tensor_name}")
        self.tensor_name = tensor_name


class ConfigMismatch(FlowLMError):
    pass


class FingerprintMismatch(ConfigMismatch):
    """Artifacts were produced from different discretizers."""


class MissingLabels(FlowLMError):
    pass
