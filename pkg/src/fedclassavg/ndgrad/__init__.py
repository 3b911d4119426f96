"""Small dense-tensor core with reverse-mode differentiation."""

from . import kernels
from .gradcheck import check_param_gradient, finite_difference_check
from .io import SnapshotFormatError, decode_weights, encode_weights, load_weights, save_weights
from .ops import (
    OP_KINDS,
    add,
    bias_add,
    concat_rows,
    exp,
    forward_op,
    gather_rows,
    l2_normalize_rows,
    log,
    log_softmax,
    matmul,
    mean,
    mul,
    mul_scalar,
    relu,
    sqrt,
    sub,
    sum,
    transpose,
)
from .tensor import (
    ComputationTape,
    GradError,
    NumericError,
    ShapeError,
    Tensor,
    backward,
    get_default_dtype,
    precision,
)
