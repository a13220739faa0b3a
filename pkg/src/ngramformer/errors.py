class ConfigError(ValueError):
    """Invalid architecture or experiment configuration.

    ``key`` carries the dotted path of the offending setting when known.
    """

    def __init__(self, message: str, key: str | None = None):
        super().__init__(f"{key}: {message}" if key else message)
        self.message = message
        self.key = key


class DivergenceError(RuntimeError):
    """Training produced a non-finite loss or gradient."""


class CheckpointError(ValueError):
    """A checkpoint file is unreadable, corrupted, or inconsistent."""
