"""Exception types shared across the package."""


class QpignnError(Exception):
    """Base class for all errors raised by this package."""


class ParameterError(QpignnError, ValueError):
    """A caller-supplied argument is outside its documented domain."""


class ShapeError(QpignnError, ValueError):
    """Tensor or array operands have incompatible shapes."""


class ContractError(QpignnError, RuntimeError):
    """An internal invariant was broken; indicates misuse or a bug."""


class IngestionError(QpignnError, ValueError):
    """A CSV input could not be parsed or is internally inconsistent."""


class TrainingError(QpignnError, RuntimeError):
    """Training aborted, e.g. because the loss became non-finite."""

    def __init__(self, message: str, epoch: int | None = None,
                 diagnostics: dict | None = None):
        super().__init__(message)
        self.epoch = epoch
        self.diagnostics = dict(diagnostics or {})
