"""
Exception hierarchy for the FuseSR pipeline
"""


class FuseSRError(Exception):
    """Base class for every error raised by the pipeline"""


class ShapeError(FuseSRError, ValueError):
    """Tensor shapes or channel counts do not match"""


class AlignmentError(FuseSRError, ValueError):
    """Spatial size or channel count not divisible by the shuffle factor"""


class SchemaError(FuseSRError, ValueError):
    """A required G-buffer or bundle channel is missing or malformed"""


class ConfigError(FuseSRError, ValueError):
    """Invalid or inconsistent configuration"""


class FormatError(FuseSRError, ValueError):
    """Corrupt, truncated or mismatching binary/file container"""


class GradCheckError(FuseSRError, RuntimeError):
    """Analytic gradients disagree with finite differences"""

    def __init__(self, message: str, report=None):
        super().__init__(message)
        self.report = report


class TrainingDivergedError(FuseSRError, RuntimeError):
    """Loss became NaN or infinite during training"""

    def __init__(self, message: str, step: int, layer_norms=None):
        super().__init__(message)
        self.step = step
        self.layer_norms = layer_norms or {}


class TrendError(FuseSRError, RuntimeError):
    """Trained ablation variants do not show the expected quality ordering"""
