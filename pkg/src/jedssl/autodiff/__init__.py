from .tensor import (
    Tensor,
    ShapeError,
    add,
    backward,
    build_tape,
    concat,
    conv1d,
    div,
    dropout,
    embedding,
    exp,
    gelu,
    getitem,
    is_grad_enabled,
    layer_norm,
    log,
    log_softmax,
    masked_fill,
    matmul,
    mean,
    mul,
    no_grad,
    relu,
    reshape,
    softmax,
    sub,
    sum,
    transpose,
)
from .nn import scaled_dot_product_attention, sinusoidal_positions
from .optim import Adam, AdamState, WarmupSchedule, adam_step, lr_at_step
from .gradcheck import gradcheck, numerical_grad, relative_error

__all__ = [name for name in dir() if not name.startswith("_") and name != "sum"]
