"""Small differentiable models and losses.

Multi-layer perceptrons (relu hidden layers, identity output) for N-way
classification and scalar regression, plus a quadratic/linear diagnostic
objective whose meta-gradient has a closed form. Both are exposed through
the same Problem interface the bilevel solvers consume: bind a ParamVector
onto a tape, then build support/query losses from the bound weights.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np

from .params import ParamVector, Segment
from .tensor import (
    Tape,
    Tensor,
    constant,
    add,
    sub,
    mul,
    matmul,
    relu,
    reduce_sum,
    scalar_mul,
    softmax_cross_entropy,
    squared_error,
)


class LossKind(Enum):
    CROSS_ENTROPY = "softmax-cross-entropy"
    MSE = "mean-squared-error"


@dataclass(frozen=True)
class MlpSpec:
    """Layer widths from input to output. Hidden activations are relu,
    the output is linear."""

    widths: tuple[int, ...]

    def __post_init__(self):
        if len(self.widths) < 2:
            raise ValueError(f"an MLP needs at least input and output widths, got {self.widths}")
        if any(w < 1 for w in self.widths):
            raise ValueError(f"all widths must be >= 1, got {self.widths}")

    @property
    def n_params(self) -> int:
        return sum(
            fi * fo + fo for fi, fo in zip(self.widths[:-1], self.widths[1:])
        )


def init_params(spec: MlpSpec, seed: int) -> ParamVector:
    """Glorot-uniform weights, zero biases. Deterministic in the seed.

    Biases are stored with shape (1, width) so bias addition is a rank-one
    matmul against a column of ones.
    """
    rng = np.random.default_rng(seed)
    named = []
    for i, (fi, fo) in enumerate(zip(spec.widths[:-1], spec.widths[1:])):
        limit = np.sqrt(6.0 / (fi + fo))
        named.append((f"w{i}", rng.uniform(-limit, limit, size=(fi, fo))))
        named.append((f"b{i}", np.zeros((1, fo))))
    return ParamVector.from_arrays(named)


def bind(tape: Tape | None, params: ParamVector) -> list[Tensor]:
    """Put each parameter segment on the tape as a leaf (or as constants
    when tape is None, for pure inference)."""
    if tape is None:
        return [constant(arr) for _, arr in params.named_arrays()]
    return [tape.leaf(arr) for _, arr in params.named_arrays()]


def forward_logits(weights: list[Tensor], inputs) -> Tensor:
    """Run the MLP on a (batch, features) matrix of inputs.

    ``weights`` alternates w0, b0, w1, b1, ... as produced by bind().
    """
    x = inputs if isinstance(inputs, Tensor) else constant(inputs)
    batch = x.data.shape[0]
    ones_col = constant(np.ones((batch, 1)))
    n_layers = len(weights) // 2
    h = x
    for i in range(n_layers):
        w, b = weights[2 * i], weights[2 * i + 1]
        h = add(matmul(h, w), matmul(ones_col, b))
        if i < n_layers - 1:
            h = relu(h)
    return h


def loss_from_weights(weights: list[Tensor], kind: LossKind, inputs, targets) -> Tensor:
    """Mean loss of the MLP over a batch, built on whatever tape the
    weights live on."""
    out = forward_logits(weights, inputs)
    if kind is LossKind.CROSS_ENTROPY:
        return softmax_cross_entropy(out, targets)
    return squared_error(out, constant(targets))


def loss(params: ParamVector, spec: MlpSpec, kind: LossKind, inputs, targets, tape: Tape) -> Tensor:
    """Bind params on the tape and return the mean batch loss."""
    del spec  # architecture is implied by the parameter segmentation
    return loss_from_weights(bind(tape, params), kind, inputs, targets)


def accuracy(params: ParamVector, spec: MlpSpec, inputs, labels) -> float:
    """Fraction of argmax(logits) == label; ties break to the lowest class."""
    del spec
    logits = forward_logits(bind(None, params), inputs).data
    predicted = np.argmax(logits, axis=1)
    return float(np.mean(predicted == np.asarray(labels)))


class MlpProblem:
    """Adapts the MLP + loss pair to the solver-facing Problem interface."""

    def __init__(self, spec: MlpSpec, kind: LossKind):
        self.spec = spec
        self.kind = kind

    def init(self, seed: int) -> ParamVector:
        return init_params(self.spec, seed)

    def bind(self, tape: Tape | None, params: ParamVector) -> list[Tensor]:
        return bind(tape, params)

    def support_loss(self, weights: list[Tensor], task) -> Tensor:
        return loss_from_weights(weights, self.kind, task.support_x, task.support_y)

    def query_loss(self, weights: list[Tensor], task) -> Tensor:
        return loss_from_weights(weights, self.kind, task.query_x, task.query_y)

    def query_loss_value(self, params: ParamVector, task) -> float:
        return self.query_loss(self.bind(None, params), task).item()

    def query_accuracy(self, params: ParamVector, task) -> float | None:
        if self.kind is not LossKind.CROSS_ENTROPY:
            return None
        return accuracy(params, self.spec, task.query_x, task.query_y)


class QuadraticLinearProblem:
    """Quadratic support loss 0.5 (y-c)' A (y-c) with linear query loss g'y.

    The inner Hessian is the constant matrix A, so the exact meta-gradient
    after m gradient steps has the closed form (I - beta*A)^m g. Used as a
    diagnostic instance where the solvers can be checked against plain
    matrix arithmetic. Task arguments are ignored; the data lives in the
    problem itself.
    """

    def __init__(self, quad: np.ndarray, center: np.ndarray, slope: np.ndarray):
        self.quad = np.asarray(quad, dtype=np.float64)
        n = self.quad.shape[0]
        self.center = np.asarray(center, dtype=np.float64).reshape(n, 1)
        self.slope = np.asarray(slope, dtype=np.float64).reshape(n, 1)
        self.n = n

    def init(self, seed: int) -> ParamVector:
        rng = np.random.default_rng(seed)
        return self.vector(rng.standard_normal(self.n))

    def vector(self, values) -> ParamVector:
        flat = np.asarray(values, dtype=np.float64).ravel()
        return ParamVector((Segment("y", (self.n, 1), 0),), flat)

    def bind(self, tape: Tape | None, params: ParamVector) -> list[Tensor]:
        arr = params.values.reshape(self.n, 1)
        return [constant(arr)] if tape is None else [tape.leaf(arr)]

    def support_loss(self, weights: list[Tensor], task=None) -> Tensor:
        (y,) = weights
        d = sub(y, constant(self.center))
        return scalar_mul(reduce_sum(mul(d, matmul(constant(self.quad), d))), 0.5)

    def query_loss(self, weights: list[Tensor], task=None) -> Tensor:
        (y,) = weights
        return reduce_sum(mul(constant(self.slope), y))

    def query_loss_value(self, params: ParamVector, task=None) -> float:
        return self.query_loss(self.bind(None, params), task).item()

    def query_accuracy(self, params: ParamVector, task=None):
        return None
