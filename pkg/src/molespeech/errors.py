"""Exception types shared across the package.

Each class marks one failure family so callers (and the CLI exit-code
mapping) can tell validation problems apart from numeric blow-ups.
"""


class ShapeError(ValueError):
    """Tensor or grid extents do not line up."""


class ContractError(ValueError):
    """A documented precondition was violated by the caller."""


class DataError(ValueError):
    """A dataset or corpus is empty, too small, or malformed."""


class ConfigError(ValueError):
    """A configuration document failed validation."""


class FormatError(ValueError):
    """A serialized artifact (checkpoint, delayed grid, WAV) is malformed."""


class NumericError(ArithmeticError):
    """A non-finite value appeared where the math requires finite ones."""


class DependencyError(RuntimeError):
    """A pipeline step is missing an artifact produced by an earlier step."""


class AlphabetError(ValueError):
    """Text contains a character outside the renderable tone alphabet."""


class FramingError(ValueError):
    """Waveform length is not compatible with the frame/block layout."""


class SynthesisError(RuntimeError):
    """Speech synthesis produced no usable output."""
