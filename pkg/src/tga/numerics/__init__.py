from .autodiff import (
    OpCounter,
    ShapeError,
    Tape,
    TapeError,
    Tensor,
    add,
    as_tensor,
    bce_with_logits,
    concat,
    count_ops,
    einsum,
    grouped_linear,
    layer_norm,
    linear,
    masked_softmax,
    matmul,
    mean,
    mul,
    relu,
    reshape,
    scale,
    scatter,
    sigmoid,
    sub,
    take,
    total,
    transpose,
)
from .checkpoint import CheckpointError, load_checkpoint, read_header, save_checkpoint
from .gradcheck import GradCheckReport, grad_check, relative_error
from .params import ParameterStore
