"""Exception hierarchy shared by all modules."""


class FedPeftError(Exception):
    """Base class for errors raised by this package."""


class ConfigError(FedPeftError, ValueError):
    """Invalid configuration value; ``key`` names the offending field."""

    def __init__(self, key: str, message: str):
        self.key = key
        super().__init__(f"{key}: {message}")


class InputError(FedPeftError, ValueError):
    """Malformed or out-of-range input data."""


class ContractError(FedPeftError, RuntimeError):
    """A caller broke an operation's contract, e.g. sent a gradient for a frozen tensor."""


class ProtocolError(FedPeftError, RuntimeError):
    """Client and server disagree on the exchanged tensor schema."""


class DomainError(FedPeftError, ValueError):
    """A quantity is mathematically undefined for the given inputs."""
