from roomnet.engine import ops
from roomnet.engine.optim import SGD, OptimizerState, he_init, sgd_step
from roomnet.engine.tensor import DecisionRecorder, Tape, Tensor, as_tensor, backward

__all__ = [
    "ops",
    "SGD",
    "OptimizerState",
    "he_init",
    "sgd_step",
    "DecisionRecorder",
    "Tape",
    "Tensor",
    "as_tensor",
    "backward",
]
