from driftguard.nn.model import (
    LN5,
    Architecture,
    BNMode,
    ForwardResult,
    Prediction,
    SleepNet,
    as_micro_batch,
    entropy,
    entropy_from_logits,
    forward,
    log_softmax,
    mean_entropy_loss,
)
from driftguard.nn.layers import softmax

__all__ = [
    "LN5",
    "Architecture",
    "BNMode",
    "ForwardResult",
    "Prediction",
    "SleepNet",
    "as_micro_batch",
    "entropy",
    "entropy_from_logits",
    "forward",
    "log_softmax",
    "mean_entropy_loss",
    "softmax",
]
