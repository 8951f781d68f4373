"""Exception hierarchy shared across the package.

The command-line interface maps these onto distinct exit codes, so user-facing
failures should raise one of the classes below rather than bare ValueErrors:

* ``ConfigError``   -- bad settings, shapes that cannot work, contract misuse.
* ``FormatError``   -- malformed files (checkpoints, datasets, records).
* ``NumericError``  -- non-finite values or numerically impossible requests.
"""


class MambaLrpError(Exception):
    """Base class for every error raised deliberately by this package."""


class ConfigError(MambaLrpError):
    """A configuration value or call contract was violated."""


class ShapeError(ConfigError):
    """Operands with incompatible shapes were passed to a tensor operation."""


class VocabularyError(ConfigError):
    """A token id falls outside the model's vocabulary."""


class FormatError(MambaLrpError):
    """A file on disk does not match its documented format."""


class NumericError(MambaLrpError):
    """A computation produced or would produce non-finite values."""


class TrainingError(NumericError):
    """Training diverged (non-finite loss)."""
