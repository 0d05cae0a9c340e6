"""Exception types shared across the library."""


class AnchorBertError(Exception):
    """Base class for all library errors."""


class ShapeError(AnchorBertError):
    """Operands have incompatible shapes."""


class ConfigError(AnchorBertError):
    """A model or run configuration violates a constraint."""


class InputError(AnchorBertError):
    """User-supplied data is unusable (empty corpus, no masked positions, ...)."""


class ContractError(AnchorBertError):
    """An operation was called outside its contract (wrong mode, non-scalar backward, ...)."""


class TrainingError(AnchorBertError):
    """The training loop hit an unrecoverable condition (NaN gradient, exhausted data)."""
