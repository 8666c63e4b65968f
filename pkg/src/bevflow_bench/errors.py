class BevFlowError(Exception):
    """
    Base class for all errors raised by bevflow-bench.
    """


class EstimatorDivergedError(BevFlowError):
    """
    The training loss of the motion estimator became non-finite.
    """


class MessageFormatError(BevFlowError):
    """
    A binary message, message log or params file is truncated or corrupt.
    """


class PipelineError(BevFlowError):
    """
    Wraps an error raised while processing one ego frame of one scene.
    """

    def __init__(self, scene_id: int, timestamp: float, cause: Exception):
        super().__init__(
            f"Scene {scene_id} at ego time {timestamp:.3f}s failed: {cause}"
        )
        self.scene_id = scene_id
        self.timestamp = timestamp
        self.cause = cause
