from .core import (
    GraphError,
    Node,
    ShapeError,
    add,
    as_node,
    backward,
    concat,
    constant,
    detach,
    div,
    exp,
    log,
    matmul,
    mean_axis,
    mul,
    param,
    relu,
    reshape,
    sigmoid,
    slice_,
    sq_norm,
    square,
    sub,
    sum_,
    tanh,
    var_axis,
)
from .gradcheck import numeric_grad, check_grads
from .layers import MLP, GRUCell, Linear, ParamSet
from .optim import NonFiniteGradient, optimizer_step

FORWARD_OPS = {
    "matmul": matmul,
    "add": add,
    "mul": mul,
    "tanh": tanh,
    "relu": relu,
    "sigmoid": sigmoid,
    "mean_axis": mean_axis,
    "var_axis": var_axis,
    "sum": sum_,
    "sq_norm": sq_norm,
    "concat": lambda *xs, axis=-1: concat(xs, axis=axis),
    "slice": slice_,
}


def forward_op(kind: str, *inputs, **kw) -> Node:
    try:
        fn = FORWARD_OPS[kind]
    except KeyError:
        raise ValueError(f"unknown op kind {kind!r}") from None
    return fn(*inputs, **kw)
