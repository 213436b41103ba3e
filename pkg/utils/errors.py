"""
Exception hierarchy shared by every service. Each error carries a short
machine code so the CLI can print a single parseable line.
"""


class StCorrError(Exception):
    """Base error for the toolkit"""
    code = "error"

    def __init__(self, message: str):
        super().__init__(message)
        self.message = message

    def one_line(self) -> str:
        text = " ".join(self.message.split())
        return f"{self.code}: {text}"


class ShapeError(StCorrError, ValueError):
    code = "shape"


class TensorFormatError(StCorrError, ValueError):
    code = "tensor-format"


class ConfigError(StCorrError, ValueError):
    code = "config"


class AnnotationError(StCorrError, ValueError):
    code = "annotation"

    def __init__(self, message: str, video_id=None):
        if video_id is not None:
            message = f"video {video_id}: {message}"
        super().__init__(message)
        self.video_id = video_id


class ClipError(StCorrError, ValueError):
    code = "clip"


class EvaluationError(StCorrError, ValueError):
    code = "evaluation"


class UnimplementedMatcherError(StCorrError):
    code = "unimplemented"


class TrainingDivergedError(StCorrError, ArithmeticError):
    code = "diverged"


class KeypointError(StCorrError, ValueError):
    code = "keypoint"


class GradientCheckError(StCorrError):
    code = "gradcheck"
