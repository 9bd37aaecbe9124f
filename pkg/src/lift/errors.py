"""Exception hierarchy shared across the pipeline."""


class LiftError(Exception):
    """Base class for pipeline errors (CLI maps these to exit code 1)."""


class UnknownLabel(LiftError, KeyError):
    pass


class EmptyText(LiftError, ValueError):
    pass


class IndexOutOfRange(LiftError, IndexError):
    pass


class BudgetTooSmall(LiftError, ValueError):
    pass


class NotACurriculumDataset(LiftError, ValueError):
    pass


class SpanAlignment(LiftError, ValueError):
    pass


class DimMismatch(LiftError, ValueError):
    pass


class NoTargetsFound(LiftError, ValueError):
    pass


class RankShrink(LiftError, ValueError):
    pass


class NoStampedPosition(LiftError, ValueError):
    pass


class NonFinite(LiftError, FloatingPointError):
    pass


class NonFiniteLoss(NonFinite):
    pass


class EmptyShard(LiftError, ValueError):
    pass


class MissingStageShard(LiftError, FileNotFoundError):
    pass


class MissingCheckpoint(MissingStageShard):
    """A later stage was requested without the earlier stage's checkpoint."""


class InsufficientClassSupport(LiftError, ValueError):
    pass


class NoAttentionCapture(LiftError, RuntimeError):
    pass


class LayerOutOfRange(LiftError, IndexError, ValueError):
    pass


class VocabOverflow(LiftError, ValueError):
    pass


class LengthOverflow(LiftError, ValueError):
    pass
