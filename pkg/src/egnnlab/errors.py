class ConfigError(ValueError):
    """Invalid configuration or arguments; surfaced by the CLI as exit code 2."""


class InputError(ValueError):
    """Rejected input data (non-finite coordinates, bad shapes)."""


class SingularConfigurationError(InputError):
    """Two atoms share a position; the pair potential is undefined."""


class GenerationError(RuntimeError):
    pass


class ExtxyzError(ValueError):
    def __init__(self, message: str, lineno: int):
        super().__init__(f"line {lineno}: {message}")
        self.lineno = lineno


class AccountingError(RuntimeError):
    """Memory ledger received a free larger than the live bytes."""


class ProtocolError(RuntimeError):
    """Collective called with inconsistent inputs."""


class ConsistencyError(RuntimeError):
    """Worker replicas diverged after a data-parallel step."""


class ReportError(ValueError):
    pass
