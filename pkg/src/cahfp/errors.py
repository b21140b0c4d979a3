"""Exception types shared across the simulator."""


class ConfigError(ValueError):
    """Invalid architecture, shape, or experiment configuration."""

    def __init__(self, message, key=None):
        super().__init__(message if key is None else f"{key}: {message}")
        self.key = key


class NumericFault(FloatingPointError):
    """A non-finite loss, gradient, or parameter appeared during training."""

    def __init__(self, message, round_index=None, client=None):
        where = []
        if round_index is not None:
            where.append(f"round {round_index}")
        if client is not None:
            where.append(f"client {client}")
        prefix = f"[{', '.join(where)}] " if where else ""
        super().__init__(prefix + message)
        self.round_index = round_index
        self.client = client


class IngestionError(ValueError):
    """Malformed external data file."""

    def __init__(self, message, field):
        super().__init__(f"{field}: {message}")
        self.field = field


class PartitionError(RuntimeError):
    pass
