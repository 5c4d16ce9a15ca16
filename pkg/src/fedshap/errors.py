"""Exception hierarchy shared by all fedshap modules."""


class FedShapError(Exception):
    """Base class for every error raised by this package."""


class ConfigurationError(FedShapError, ValueError):
    """Incompatible shapes, layouts, or missing configuration."""


class InputError(FedShapError, ValueError):
    """Invalid or empty input data."""


class CapacityError(FedShapError):
    """Requested computation is too large for the chosen method."""


class LogicError(FedShapError, RuntimeError):
    """Internal bookkeeping invariant violated."""


class IngestionError(FedShapError):
    """Malformed dataset file.

    Carries the name of the offending field and the byte offset at which
    parsing failed.
    """

    def __init__(self, message: str, field: str, offset: int, path=None):
        self.field = field
        self.offset = offset
        self.path = path
        where = f" in {path}" if path is not None else ""
        super().__init__(f"{message}: field '{field}' at byte offset {offset}{where}")


class TrainingError(FedShapError, RuntimeError):
    """Local training diverged (non-finite gradients or parameters)."""

    def __init__(self, message: str, round_index=None, client=None):
        self.round_index = round_index
        self.client = client
        ctx = []
        if round_index is not None:
            ctx.append(f"round={round_index}")
        if client is not None:
            ctx.append(f"client={client}")
        suffix = f" ({', '.join(ctx)})" if ctx else ""
        super().__init__(message + suffix)


class UtilityError(FedShapError, RuntimeError):
    """A coalition utility evaluation failed; ``subset`` names the coalition."""

    def __init__(self, message: str, subset):
        self.subset = tuple(sorted(subset))
        super().__init__(f"{message} (subset={list(self.subset)})")


class RunError(FedShapError, RuntimeError):
    """A simulation aborted; ``records`` holds every completed round."""

    def __init__(self, message: str, round_index: int, records):
        self.round_index = round_index
        self.records = list(records)
        super().__init__(f"run aborted at round {round_index}: {message}")
