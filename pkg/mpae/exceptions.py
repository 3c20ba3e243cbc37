class MPAEError(Exception):
    def __init__(self, message: str):
        self.message = message

    def __str__(self):
        return self.message


class DimensionError(MPAEError, ValueError):
    """DimensionError."""


class ConfigError(MPAEError, ValueError):
    """ConfigError."""


class FormatError(MPAEError, ValueError):
    """FormatError."""


class RepresentationError(MPAEError, ValueError):
    """RepresentationError."""


class StatsError(MPAEError, ValueError):
    """StatsError."""


class UsageError(MPAEError, RuntimeError):
    """UsageError."""


class TrainingDivergedError(MPAEError, FloatingPointError):
    def __init__(self, epoch: int, batch: int, parameter_norms: dict[str, float]):
        self.epoch = epoch
        self.batch = batch
        self.parameter_norms = parameter_norms

    def __str__(self):
        largest = sorted(
            self.parameter_norms.items(), key=lambda x: -abs(x[1])
        )[:3]
        response = f"Loss became NaN at epoch {self.epoch}, batch {self.batch}. "
        response += "Largest parameter norms: "
        response += ", ".join(f"{name}={norm:.3g}" for name, norm in largest)
        return response

    @property
    def snapshot(self) -> dict:
        return {
            "epoch": self.epoch,
            "batch": self.batch,
            "parameter_norms": dict(self.parameter_norms),
        }


class EvaluationError(MPAEError):
    def __init__(self, sample_id: str, message: str):
        self.sample_id = sample_id
        self.message = message

    def __str__(self):
        return f"Evaluation of sample '{self.sample_id}' failed: {self.message}"
