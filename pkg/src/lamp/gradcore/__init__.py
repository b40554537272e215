"""Minimal dense-tensor engine with reverse-mode autodiff."""

from lamp.gradcore.check import grad_check, grad_check_params, numerical_grad
from lamp.gradcore.nn import (
    MLP,
    Embedding,
    LayerNorm,
    Linear,
    Module,
    MultiHeadAttention,
    Parameter,
    attention,
    gate,
    modulate,
    multi_head_attention,
    sinusoidal_embedding,
)
from lamp.gradcore.optim import AdamW, OptimizerState, adamw_step, clip_grad_norm, cosine_with_min_lr
from lamp.gradcore.rng import Rng
from lamp.gradcore.tensor import (
    Tensor,
    add,
    as_tensor,
    concat,
    default_dtype,
    embedding,
    expand,
    gelu,
    get_default_dtype,
    getitem,
    layer_norm,
    matmul,
    mean,
    mse,
    mul,
    no_grad,
    reshape,
    set_default_dtype,
    sigmoid,
    silu,
    softmax,
    sub,
    sum_,
    transpose,
)
