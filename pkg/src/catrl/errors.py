class ConfigError(ValueError):
    """Invalid configuration; raised at setup time, never mid-training."""


class TrainingError(RuntimeError):
    """Numerical failure during training (non-finite loss, gradient or action)."""


class IncompatibleCheckpointError(ConfigError):
    pass
