"""Exception types shared across the toolkit."""


class ShapeError(ValueError):
    """Operands have incompatible shapes."""


class ContractError(ValueError):
    """A caller violated an operation's precondition."""


class NumericError(ArithmeticError):
    """Non-finite values where finite ones are required."""


class VocabError(ValueError):
    """A token, label or id falls outside the known vocabulary."""


class CorpusError(ValueError):
    """A corpus file is malformed or violates the record schema."""


class CheckpointError(RuntimeError):
    """A checkpoint file cannot be written, read or validated."""
