from . import checkpoint
from .batchnorm import BatchNormState, BNMode, DegenerateBatchError, batchnorm
from .gradcheck import GradCheckReport, grad_check
from .optim import AdamW, LrSchedule, cosine_lr, ema_update
from .tensor import (
    NumericalError,
    Tensor,
    check_finite,
    concat,
    gather_rows,
    linear,
    mean_entropy,
    relu,
    scale,
    mean_all,
    sum_all,
    add,
    matmul,
    segment_softmax_pool,
    sigmoid,
    sigmoid_bce,
    softmax,
    softmax_cross_entropy,
    sparse_matmul,
)
