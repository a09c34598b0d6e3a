from __future__ import annotations


class MemfuseError(Exception):
    """Base class for every error raised by this package."""


class DimensionError(MemfuseError, ValueError):
    def __init__(self, op: str, *shapes: tuple[int, ...], detail: str = ""):
        self.op = op
        self.shapes = shapes
        shown = " vs ".join(str(tuple(s)) for s in shapes)
        msg = f"{op}: incompatible shapes {shown}"
        if detail:
            msg += f" ({detail})"
        super().__init__(msg)


class DegenerateRowError(MemfuseError, ValueError):
    """A softmax row (or pooled sequence) has no valid position."""


class EmptyReductionError(MemfuseError, ValueError):
    pass


class GraphError(MemfuseError, RuntimeError):
    """Misuse of the gradient tape: non-scalar loss, detached loss, replayed tape."""


class ConfigError(MemfuseError, ValueError):
    def __init__(self, violations: list[str] | str):
        if isinstance(violations, str):
            violations = [violations]
        self.violations = list(violations)
        super().__init__("; ".join(self.violations))


class FormatError(MemfuseError, ValueError):
    """Malformed binary file or checkpoint."""


class ChecksumError(FormatError):
    pass


class TruncationError(FormatError):
    pass


class VersionError(FormatError):
    pass


class ConfigMismatchError(FormatError):
    def __init__(self, mismatches: dict[str, tuple[object, object]]):
        self.mismatches = mismatches
        parts = [f"{k}: checkpoint={a!r} expected={b!r}" for k, (a, b) in mismatches.items()]
        super().__init__("checkpoint config mismatch: " + ", ".join(parts))


class DataError(MemfuseError, ValueError):
    """Bad dataset content: missing files, id collisions, labels out of range."""


class DivergenceError(MemfuseError, ArithmeticError):
    def __init__(self, epoch: int, batch: int, value: float):
        self.epoch = epoch
        self.batch = batch
        self.value = value
        super().__init__(f"non-finite loss {value} at epoch {epoch}, batch {batch}")


class DegenerateStatisticError(MemfuseError, ValueError):
    """Statistic undefined for the given input (e.g. correlation of a constant series)."""


class VariantError(MemfuseError, RuntimeError):
    """A training failure inside the ablation suite, tagged with the variant name."""

    def __init__(self, variant: str, cause: Exception):
        self.variant = variant
        self.cause = cause
        super().__init__(f"variant {variant}: {type(cause).__name__}: {cause}")
