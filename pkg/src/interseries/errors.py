"""Exception hierarchy.

Every error carries a short ``category`` used by the command line to emit
``error:<category>:<message>`` lines.
"""


class ForecastError(Exception):
    category = "internal"


class ShapeError(ForecastError, ValueError):
    category = "shape"


class MaskError(ForecastError, ValueError):
    category = "mask"


class ContractError(ForecastError, ValueError):
    category = "contract"


class SchemaError(ForecastError, ValueError):
    category = "schema"


class PanelError(ForecastError, ValueError):
    category = "panel"


class FitError(ForecastError, ValueError):
    category = "fit"


class ConfigError(ForecastError, ValueError):
    category = "config"


class CheckpointError(ForecastError, ValueError):
    category = "checkpoint"


class CompatibilityError(ForecastError, ValueError):
    category = "compat"


class TrainingError(ForecastError, RuntimeError):
    category = "training"


class UndefinedMetricError(ForecastError, ValueError):
    category = "metric"
