from ifdetect.model.checkpoint import load_checkpoint, save_checkpoint
from ifdetect.model.core import (
    ArchitectureSpec,
    LayerSlot,
    ModelParameters,
    PerSampleGradient,
    forward,
    grad,
    grad_last_layer,
    init_params,
    iter_per_sample_grads,
    last_layer_grads,
    last_layer_input_dim,
    last_layer_inputs,
    loss,
    losses,
    mean_loss_and_grad,
    per_sample_grads,
    predict_proba,
)

__all__ = [
    "ArchitectureSpec",
    "LayerSlot",
    "ModelParameters",
    "PerSampleGradient",
    "forward",
    "grad",
    "grad_last_layer",
    "init_params",
    "iter_per_sample_grads",
    "last_layer_grads",
    "last_layer_input_dim",
    "last_layer_inputs",
    "load_checkpoint",
    "loss",
    "losses",
    "mean_loss_and_grad",
    "per_sample_grads",
    "predict_proba",
    "save_checkpoint",
]
