"""Shared exception types."""


class ShapeError(ValueError):
    """Operands have incompatible shapes or dimensions."""


class ConfigError(ValueError):
    """A configuration violates one or more of its invariants."""


class FormatError(ValueError):
    """An on-disk artifact (checkpoint, tokenizer, corpus, matrix) is malformed."""
