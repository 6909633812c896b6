"""Exception types shared across the toolkit."""


class DnnaifError(Exception):
    """Base class for all toolkit errors."""


class BudgetExhausted(DnnaifError):
    """The evaluation ledger has no budget left for the requested evaluations."""


class DimensionMismatch(DnnaifError):
    """An input vector's length does not match the expected dimension."""


class EvaluationFailed(DnnaifError):
    """The objective evaluator signalled failure (e.g. returned a non-finite value)."""


class NegativeGap(DnnaifError):
    """An optimality gap came out negative beyond tolerance; the metric is misused."""


class EmptyInput(DnnaifError):
    """An operation that needs at least one element received an empty sequence."""


class HeadMismatch(DnnaifError):
    """The surrogate head is inconsistent with the network output dimension."""


class EmptyDataset(DnnaifError):
    """A training or loss computation received an empty dataset."""


class NonFiniteLoss(DnnaifError):
    """The training loss became non-finite."""


class InvalidInput(DnnaifError):
    """A simulator input violates its invariants and projection is disabled."""


class ParseError(DnnaifError):
    """A configuration file could not be parsed."""


class ValidationError(DnnaifError):
    """A configuration value violates an invariant."""


class IoError(DnnaifError):
    """Reading or writing experiment files failed."""
