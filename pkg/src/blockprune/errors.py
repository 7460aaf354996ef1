"""Exception types shared across the package, with CLI exit codes."""


class BlockPruneError(Exception):
    """Base class for all package errors."""

    exit_code = 1


class ConfigError(BlockPruneError):
    """Invalid or unparseable run configuration."""

    exit_code = 2


class BudgetInfeasibleError(BlockPruneError):
    """Requested keep ratio cannot be satisfied under the configured floors."""

    exit_code = 3


class NumericError(BlockPruneError):
    """Non-finite value encountered where finiteness is required."""

    exit_code = 4


class DataFormatError(BlockPruneError):
    """Malformed external file (dataset, checkpoint, metrics)."""

    exit_code = 5
