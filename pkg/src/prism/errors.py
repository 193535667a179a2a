class PrismError(Exception):
    pass


class ConfigError(PrismError):
    """Bad configuration or usage (CLI exit 1)."""


class DatasetError(PrismError):
    def __init__(self, message: str, line: int | None = None, field: str | None = None):
        self.line = line
        self.field = field
        where = []
        if line is not None:
            where.append(f"line {line}")
        if field is not None:
            where.append(f"field {field!r}")
        super().__init__(f"{', '.join(where)}: {message}" if where else message)


class TransientError(PrismError):
    """Upstream failure that may succeed on retry (429, 5xx, timeouts, dropped connections)."""


class PermanentError(PrismError):
    """Upstream or storage failure that will not go away by retrying."""


class GenerationFailed(PrismError):
    pass


class IntegrityError(PrismError):
    """Digest mismatch or corrupt run file (CLI exit 3)."""


class RunAborted(PrismError):
    """A run stopped early because of a PermanentError (CLI exit 2)."""
