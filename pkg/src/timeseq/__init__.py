"""Next-event prediction with time-dependent event representations."""

from .dataio import EventSequence, EventToken, RawEvent, Vocabulary
from .model import Model, ModelConfig, predict_topk
from .train import EvalReport, TrainConfig, evaluate, train

__all__ = [
    "EventSequence", "EventToken", "RawEvent", "Vocabulary",
    "Model", "ModelConfig", "predict_topk",
    "EvalReport", "TrainConfig", "evaluate", "train",
]
__version__ = "0.1.0"
