"""Exception taxonomy shared across the package."""


class SplitSimError(Exception):
    """Base class for all splitsim errors."""


class ConfigError(SplitSimError):
    """Invalid configuration, model description, or out-of-range setting."""


class UsageError(SplitSimError):
    """API misuse: stale caches, unknown variants, malformed ledger records."""


class DataError(SplitSimError):
    """Bad data: labels out of range, corrupt or truncated dataset files."""


class ProtocolError(SplitSimError):
    """Engine-level contract violation, e.g. aggregating incongruent models."""
