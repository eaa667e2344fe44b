"""Exception types shared across the package and mapped to CLI exit codes."""


class ShapeError(ValueError):
    """Tensor operation called with incompatible shapes."""


class ConfigError(ValueError):
    """Invalid or inconsistent run configuration."""


class DataError(ValueError):
    """Corpus or instance stream cannot satisfy the pipeline contract."""


class CheckpointError(ValueError):
    """Checkpoint file is malformed or inconsistent with its manifest."""


class DivergenceError(RuntimeError):
    """Training produced a non-finite loss; a diagnostic checkpoint was written."""


class NumericsError(RuntimeError):
    """A numeric check could not be evaluated (e.g. non-finite loss in gradcheck)."""
