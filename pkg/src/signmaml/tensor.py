"""Tape-based reverse-mode autodiff over dense float64 arrays.

The engine supports double backward: gradients produced with
``create_graph=True`` are recorded on the same tape and can be
differentiated once more, which is all a Hessian-vector product needs.
Backward rules are written in terms of the ops themselves, so first- and
second-order passes share one code path; for plain passes recording is
switched off and the same rules run on constants.

The ``sign`` op is special: its backward rule contributes nothing at all
(not an approximate zero - no accumulation happens), so any update built
from ``sign`` of a gradient is invisible to outer differentiation.

A tape and its tensors belong to one thread; there is no global state, so
independent tapes can run concurrently.
"""

from __future__ import annotations

import numpy as np

from . import kernels


class AutodiffError(Exception):
    """Base class for engine errors."""


class ShapeError(AutodiffError):
    """Operand shapes invalid for an op."""


class ProvenanceError(AutodiffError):
    """A tensor does not belong to the tape it is used with."""


class ContractError(AutodiffError):
    """An operation was called outside its contract."""


class CapabilityError(AutodiffError):
    """A differentiation order beyond the tape's capability was requested."""


class DataError(AutodiffError):
    """Input data violates an op's requirements (e.g. label out of range)."""


class Tensor:
    """Dense float64 value, optionally recorded on a tape.

    A tensor without a tape reference is a constant and takes no part in
    gradient computation.
    """

    __slots__ = ("data", "tape", "node_id")

    def __init__(self, data, tape=None, node_id=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.tape = tape
        self.node_id = node_id

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(()))

    def __repr__(self):
        rec = f" node={self.node_id}" if self.tape is not None else ""
        return f"Tensor(shape={self.data.shape}{rec})"


def constant(values) -> Tensor:
    """Wrap values as a constant tensor (no tape, no gradient)."""
    return Tensor(values)


class Node:
    __slots__ = ("op", "input_ids", "inputs", "out", "extra", "depth")

    def __init__(self, op, input_ids, inputs, out, extra, depth):
        self.op = op
        self.input_ids = input_ids
        self.inputs = inputs
        self.out = out
        self.extra = extra
        self.depth = depth


class Tape:
    """Append-only recording of ops, topological by construction.

    ``order`` is the supported differentiation depth: an order-1 tape only
    produces plain gradients, an order-2 tape additionally supports one
    ``create_graph`` backward (enough for Hessian-vector products and
    differentiating through unrolled inner loops). Anything deeper is
    rejected.
    """

    __slots__ = ("nodes", "order", "_recording", "_grad_depth")

    def __init__(self, order: int = 1):
        if order not in (1, 2):
            raise CapabilityError(
                f"tape order must be 1 or 2, got {order}; higher-order "
                "differentiation is not supported"
            )
        self.nodes: list[Node] = []
        self.order = order
        self._recording = True
        self._grad_depth = 0

    def leaf(self, values) -> Tensor:
        """Record a leaf variable on this tape."""
        data = np.asarray(values, dtype=np.float64)
        out = Tensor(data, self, len(self.nodes))
        self.nodes.append(Node("leaf", (), (), out, None, 0))
        return out


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _record(op: str, out_data: np.ndarray, inputs: tuple[Tensor, ...], extra=None) -> Tensor:
    tape = None
    for t in inputs:
        if t.tape is not None:
            if tape is None:
                tape = t.tape
            elif tape is not t.tape:
                raise ProvenanceError(f"{op}: inputs recorded on different tapes")
    if tape is None or not tape._recording:
        return Tensor(out_data)
    input_ids = tuple(t.node_id if t.tape is tape else -1 for t in inputs)
    out = Tensor(out_data, tape, len(tape.nodes))
    tape.nodes.append(Node(op, input_ids, inputs, out, extra, tape._grad_depth))
    return out


# ---------------------------------------------------------------------------
# ops
# ---------------------------------------------------------------------------

def _check_same_shape(op, a, b):
    if a.data.shape != b.data.shape:
        raise ShapeError(f"{op}: operands must share a shape, got {a.data.shape} and {b.data.shape}")


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_same_shape("add", a, b)
    return _record("add", a.data + b.data, (a, b))


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_same_shape("sub", a, b)
    return _record("sub", a.data - b.data, (a, b))


def scalar_mul(a, c: float) -> Tensor:
    a = _as_tensor(a)
    c = float(c)
    return _record("scalar_mul", c * a.data, (a,), c)


def mul(a, b) -> Tensor:
    """Elementwise product; shapes must match exactly."""
    a, b = _as_tensor(a), _as_tensor(b)
    _check_same_shape("elementwise-mul", a, b)
    return _record("mul", a.data * b.data, (a, b))


def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.data.shape} and {b.data.shape}")
    return _record("matmul", a.data @ b.data, (a, b))


def transpose(a) -> Tensor:
    a = _as_tensor(a)
    if a.data.ndim != 2:
        raise ShapeError(f"transpose: need a 2-d operand, got shape {a.data.shape}")
    return _record("transpose", np.ascontiguousarray(a.data.T), (a,))


def relu(a) -> Tensor:
    a = _as_tensor(a)
    # mask saved at forward time; it is a constant of the backward pass
    # (derivative at the kink is taken as 0)
    return _record("relu", kernels.relu_fwd(a.data), (a,), kernels.relu_mask(a.data))


def sign(a) -> Tensor:
    a = _as_tensor(a)
    return _record("sign", kernels.sign_fwd(a.data), (a,))


def reduce_sum(a) -> Tensor:
    a = _as_tensor(a)
    return _record("reduce_sum", np.asarray(a.data.sum()), (a,))


def reduce_mean(a) -> Tensor:
    a = _as_tensor(a)
    return _record("reduce_mean", np.asarray(a.data.mean()), (a,), a.data.size)


def expand(a, shape) -> Tensor:
    """Broadcast a scalar (shape ()) tensor to the given shape."""
    a = _as_tensor(a)
    if a.data.shape != ():
        raise ShapeError(f"expand: need a 0-d scalar, got shape {a.data.shape}")
    shape = tuple(shape)
    return _record("expand", np.full(shape, a.data), (a,), shape)


def softmax(a) -> Tensor:
    """Row-wise softmax with max-shift stabilization."""
    a = _as_tensor(a)
    if a.data.ndim != 2:
        raise ShapeError(f"softmax: need a 2-d operand, got shape {a.data.shape}")
    return _record("softmax", kernels.softmax_fwd(a.data), (a,))


def softmax_cross_entropy(logits, labels) -> Tensor:
    """Mean cross-entropy of row-wise softmax against integer labels.

    Fused with log-sum-exp stabilization. Returns a 0-d scalar.
    """
    logits = _as_tensor(logits)
    if logits.data.ndim != 2:
        raise ShapeError(
            f"softmax-cross-entropy: logits must be 2-d, got shape {logits.data.shape}"
        )
    labels = np.asarray(labels)
    if labels.ndim != 1 or labels.shape[0] != logits.data.shape[0]:
        raise ShapeError(
            "softmax-cross-entropy: labels must be 1-d with one entry per row, "
            f"got {labels.shape} for logits {logits.data.shape}"
        )
    labels = labels.astype(np.int64)
    n_classes = logits.data.shape[1]
    if labels.min(initial=0) < 0 or labels.max(initial=0) >= n_classes:
        raise DataError(
            f"softmax-cross-entropy: label out of range for {n_classes} classes"
        )
    onehot = np.zeros(logits.data.shape)
    onehot[np.arange(labels.shape[0]), labels] = 1.0
    value = np.asarray(kernels.xent_fwd(logits.data, labels))
    return _record("softmax_xent", value, (logits,), (labels, onehot))


def squared_error(pred, target) -> Tensor:
    """Mean squared error over all elements. Composed from primitive ops."""
    pred, target = _as_tensor(pred), _as_tensor(target)
    _check_same_shape("squared-error", pred, target)
    d = sub(pred, target)
    return reduce_mean(mul(d, d))


_FORWARD_OPS = {
    "add": add,
    "sub": sub,
    "scalar-mul": scalar_mul,
    "elementwise-mul": mul,
    "matmul": matmul,
    "relu": relu,
    "sign": sign,
    "reduce-mean": reduce_mean,
    "reduce-sum": reduce_sum,
    "softmax-cross-entropy": softmax_cross_entropy,
    "squared-error": squared_error,
    "transpose": transpose,
    "softmax": softmax,
    "expand": expand,
}


def forward_op(op: str, *inputs, **kwargs) -> Tensor:
    """Apply an op by name. Extra arguments (scalar factor, labels, target
    shape) are passed through as keywords/positionals of the named op."""
    if op not in _FORWARD_OPS:
        raise ContractError(f"unknown op kind: {op!r}")
    return _FORWARD_OPS[op](*inputs, **kwargs)


# ---------------------------------------------------------------------------
# backward rules
#
# Each rule maps (node, output adjoint, needed flags) to per-input adjoints;
# None means "no contribution". Rules are built from the ops above, so they
# are recorded (and hence differentiable once more) during create_graph
# passes and run on constants otherwise.
# ---------------------------------------------------------------------------

def _vjp_add(node, g, needed):
    return (g, g)


def _vjp_sub(node, g, needed):
    return (g, scalar_mul(g, -1.0) if needed[1] else None)


def _vjp_scalar_mul(node, g, needed):
    return (scalar_mul(g, node.extra),)


def _vjp_mul(node, g, needed):
    a, b = node.inputs
    return (
        mul(g, b) if needed[0] else None,
        mul(g, a) if needed[1] else None,
    )


def _vjp_matmul(node, g, needed):
    a, b = node.inputs
    return (
        matmul(g, transpose(b)) if needed[0] else None,
        matmul(transpose(a), g) if needed[1] else None,
    )


def _vjp_transpose(node, g, needed):
    return (transpose(g),)


def _vjp_relu(node, g, needed):
    return (mul(g, constant(node.extra)),)


def _vjp_sign(node, g, needed):
    # the derivative of sign is identically zero away from jumps; nothing
    # is propagated, so the contribution is exactly zero
    return (None,)


def _vjp_reduce_sum(node, g, needed):
    (a,) = node.inputs
    return (expand(g, a.data.shape),)


def _vjp_reduce_mean(node, g, needed):
    (a,) = node.inputs
    return (expand(scalar_mul(g, 1.0 / node.extra), a.data.shape),)


def _vjp_expand(node, g, needed):
    return (reduce_sum(g),)


def _vjp_softmax(node, g, needed):
    s = node.out
    n = s.data.shape[1]
    t = mul(g, s)
    row_sums = matmul(t, constant(np.ones((n, 1))))
    spread = matmul(row_sums, constant(np.ones((1, n))))
    return (mul(s, sub(g, spread)),)


def _vjp_softmax_xent(node, g, needed):
    (logits,) = node.inputs
    _, onehot = node.extra
    batch = logits.data.shape[0]
    s = softmax(logits)
    diff = sub(s, constant(onehot))
    coeff = scalar_mul(g, 1.0 / batch)
    return (mul(diff, expand(coeff, logits.data.shape)),)


_VJPS = {
    "add": _vjp_add,
    "sub": _vjp_sub,
    "scalar_mul": _vjp_scalar_mul,
    "mul": _vjp_mul,
    "matmul": _vjp_matmul,
    "transpose": _vjp_transpose,
    "relu": _vjp_relu,
    "sign": _vjp_sign,
    "reduce_sum": _vjp_reduce_sum,
    "reduce_mean": _vjp_reduce_mean,
    "expand": _vjp_expand,
    "softmax": _vjp_softmax,
    "softmax_xent": _vjp_softmax_xent,
}


def backward(tape: Tape, output: Tensor, wrt: list[Tensor], create_graph: bool = False) -> list[Tensor]:
    """Reverse-mode gradients of a scalar output with respect to ``wrt``.

    With ``create_graph`` the returned gradients are recorded on the tape
    and support one further (plain) backward; this needs an order-2 tape.
    A constant output, or a wrt tensor the output does not depend on,
    yields exact zeros.
    """
    if output.data.size != 1:
        raise ContractError(f"backward needs a scalar output, got shape {output.data.shape}")
    for t in wrt:
        if t.tape is not tape or t.node_id is None:
            raise ProvenanceError("wrt tensor was not recorded on this tape")
    if create_graph and tape.order < 2:
        raise CapabilityError("create_graph requires a tape of order 2")
    if output.tape is None:
        return [constant(np.zeros(t.data.shape)) for t in wrt]
    if output.tape is not tape:
        raise ProvenanceError("output was recorded on a different tape")

    nodes = tape.nodes
    ancestors = set()
    stack = [output.node_id]
    while stack:
        i = stack.pop()
        if i in ancestors:
            continue
        ancestors.add(i)
        for j in nodes[i].input_ids:
            if j >= 0 and j not in ancestors:
                stack.append(j)

    wrt_ids = {t.node_id for t in wrt}
    needs = set(wrt_ids)
    for i in sorted(ancestors):
        if i in needs:
            continue
        for j in nodes[i].input_ids:
            if j in needs:
                needs.add(i)
                break

    adjoints: dict[int, Tensor] = {output.node_id: constant(np.ones(output.data.shape))}
    prev_recording, prev_depth = tape._recording, tape._grad_depth
    if create_graph:
        tape._grad_depth = 1
    else:
        tape._recording = False
    try:
        for i in sorted(ancestors, reverse=True):
            g = adjoints.get(i)
            if g is None:
                continue
            node = nodes[i]
            needed = tuple(
                inp.tape is tape and inp.node_id in needs for inp in node.inputs
            )
            if not any(needed):
                continue
            if create_graph and node.depth >= 1:
                raise CapabilityError(
                    "third-order differentiation requested; tapes support "
                    "orders 1 and 2 only"
                )
            grads_in = _VJPS[node.op](node, g, needed)
            for inp, gi, need in zip(node.inputs, grads_in, needed):
                if not need or gi is None:
                    continue
                j = inp.node_id
                cur = adjoints.get(j)
                adjoints[j] = gi if cur is None else add(cur, gi)
    finally:
        tape._recording, tape._grad_depth = prev_recording, prev_depth

    return [
        adjoints[t.node_id] if t.node_id in adjoints else constant(np.zeros(t.data.shape))
        for t in wrt
    ]


def hvp(tape: Tape, scalar_loss: Tensor, wrt: Tensor, v) -> Tensor:
    """Hessian-vector product (d2 loss / d wrt2) . v via double backward."""
    if tape.order < 2:
        raise CapabilityError("Hessian-vector products require a tape of order 2")
    v = _as_tensor(v)
    if v.data.shape != wrt.data.shape:
        raise ShapeError(
            f"hvp: direction shape {v.data.shape} must match wrt shape {wrt.data.shape}"
        )
    (grad,) = backward(tape, scalar_loss, [wrt], create_graph=True)
    directional = reduce_sum(mul(grad, constant(v.data)))
    (result,) = backward(tape, directional, [wrt])
    return result
