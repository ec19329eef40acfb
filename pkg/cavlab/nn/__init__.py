from cavlab.nn.model import (
    LAYER_IDS,
    LOGITS,
    ActivationTensor,
    ElementsNet,
    TrainedModel,
    activation_gradients,
    build_network,
    continue_forward,
    eligible_layers,
    evaluate,
    forward_capture,
    grad_logit_wrt_activation,
    logit_gradients,
    logits,
)
from cavlab.nn.train import train

__all__ = [
    "LAYER_IDS",
    "LOGITS",
    "ActivationTensor",
    "ElementsNet",
    "TrainedModel",
    "activation_gradients",
    "build_network",
    "continue_forward",
    "eligible_layers",
    "evaluate",
    "forward_capture",
    "grad_logit_wrt_activation",
    "logit_gradients",
    "logits",
    "train",
]
