"""Dense tensors, a replayable reverse-mode tape, and a scalar gradient oracle."""

from snnlm.numcore.tensor import (
    DEFAULT_DTYPE,
    DimensionError,
    DomainError,
    NumericError,
    Tape,
    Tensor,
    absval,
    add,
    broadcast_to,
    cross_entropy_logits,
    cumsum_exclusive,
    div,
    embedding_lookup,
    exp,
    log,
    matmul,
    mean_along,
    mean_all,
    mul,
    neg,
    record_op,
    accumulate_grad,
    reshape,
    set_finite_checks,
    sigmoid,
    softplus,
    sqrt,
    sub,
    sum_along,
    sum_all,
    transpose,
)
from snnlm.numcore.oracle import Value, oracle_grad, finite_difference_grad

__all__ = [
    "DEFAULT_DTYPE",
    "accumulate_grad",
    "record_op",
    "DimensionError",
    "DomainError",
    "NumericError",
    "Tape",
    "Tensor",
    "Value",
    "absval",
    "add",
    "broadcast_to",
    "cross_entropy_logits",
    "cumsum_exclusive",
    "div",
    "embedding_lookup",
    "exp",
    "finite_difference_grad",
    "log",
    "matmul",
    "mean_along",
    "mean_all",
    "mul",
    "neg",
    "oracle_grad",
    "reshape",
    "set_finite_checks",
    "sigmoid",
    "softplus",
    "sqrt",
    "sub",
    "sum_along",
    "sum_all",
    "transpose",
]
