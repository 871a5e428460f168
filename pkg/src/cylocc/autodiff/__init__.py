from .gradcheck import GradcheckReport, gradcheck, rel_error
from .params import SGD, Params, he_normal, init_conv, init_linear
from .tensor import (
    Graph,
    Node,
    ShapeError,
    Tensor,
    add,
    as_tensor,
    backward,
    bilinear_sample,
    bilinear_weights,
    broadcast_to,
    concat,
    conv2d,
    exp,
    gather,
    grad_enabled,
    linear,
    log,
    matmul,
    max_reduce,
    mean_reduce,
    mul,
    no_grad,
    record,
    relu,
    reshape,
    scale,
    sigmoid,
    slice_,
    softmax,
    softplus,
    sub,
    sum_reduce,
    transpose,
)
