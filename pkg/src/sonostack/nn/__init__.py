"""Minimal reverse-mode autodiff, layers and optimizers."""

from .layers import (
    BatchNorm,
    ClsPool,
    ClsPosEmbed,
    Conv2D,
    Dense,
    Dropout,
    GELU,
    GlobalAvgPool,
    LayerNorm,
    MaxPool2D,
    Module,
    MultiHeadAttention,
    PatchEmbed,
    ReLU,
    TransformerBlock,
)
from .optim import Adam, AdamW, OptimizerState, adam_step, cosine_schedule
from .tensor import (
    Tensor,
    batchnorm,
    conv2d,
    dropout,
    gelu,
    global_avg_pool,
    layernorm,
    maxpool2d,
    no_grad,
    one_hot,
    relu,
    softmax,
    softmax_cross_entropy,
)
