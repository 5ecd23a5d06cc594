"""Exception hierarchy shared by every module."""


class WindowDiffusionError(Exception):
    """Base class for all errors raised by this package."""


class DimensionError(WindowDiffusionError, ValueError):
    pass


class NumericInputError(WindowDiffusionError, ValueError):
    pass


class UndefinedSimilarityError(WindowDiffusionError, ValueError):
    pass


class InputError(WindowDiffusionError, ValueError):
    pass


class ConfigError(WindowDiffusionError, ValueError):
    pass


class ContractError(WindowDiffusionError):
    """A caller violated an operation's precondition."""


class CacheMissError(WindowDiffusionError, KeyError):
    """Read of a KV entry that is not valid.

    Inside the scheduler this always means a role-assignment bug.
    """

    def __init__(self, layer: int, position: int):
        self.layer = layer
        self.position = position
        super().__init__(f"KV cache miss at layer {layer}, position {position}")

    def __str__(self) -> str:
        return self.args[0]


class InvariantError(WindowDiffusionError, AssertionError):
    """An internal invariant failed (scheduler bug or corrupted state)."""
