"""Exception types shared across the package.

The CLI maps these onto exit codes: ConfigError -> 2, NumericError and
TrainingError -> 3. Precondition violations raise plain ValueError.
"""


class ConfigError(ValueError):
    """Invalid configuration: bad schedule parameters, mismatched files, unknown tokens."""


class VocabError(ConfigError):
    """A prompt token is not in the vocabulary."""


class CacheError(KeyError):
    """Identity token cache is missing a required entry or has inconsistent shapes."""


class NumericError(ArithmeticError):
    """Non-finite values where finite ones are required."""


class TrainingError(RuntimeError):
    """Training diverged or otherwise failed; carries the epoch index when known."""

    def __init__(self, message, epoch=None):
        super().__init__(message)
        self.epoch = epoch
