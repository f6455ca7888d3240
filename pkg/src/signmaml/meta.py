"""Bilevel solvers: inner-loop unrolling and meta-gradient engines.

Inner loop: m full-batch steps on the support loss, either plain gradient
descent or sign descent (each coordinate moves by exactly -beta * sign of
its gradient). Outer loop: four interchangeable meta-gradient engines.

  maml-product   explicit chain rule: the query gradient at the adapted
                 weights, pulled back through the product of
                 (I - beta * support Hessian) factors, one per inner step,
                 applied newest to oldest via Hessian-vector products.
  maml-autodiff  the same quantity obtained by recording the whole unroll
                 on one order-2 tape and backpropagating the query loss
                 to the initialization.
  fo-maml        the query gradient at the adapted weights with all
                 second-order terms assumed zero.
  sign-maml      the query gradient at the sign-descent iterate; because
                 the sign op has an exactly-zero derivative, this IS the
                 full derivative of the unrolled objective, not an
                 approximation.

The two maml engines are implemented independently and their agreement is
a correctness check, not a given.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass
from enum import Enum

import numpy as np

from . import kernels
from .params import ParamVector
from .tensor import Tape, Tensor, add, backward, constant, mul, reduce_sum, scalar_mul, sign, sub

SGD = "sgd"
SIGNSGD = "signsgd"


class MetaMethod(Enum):
    MAML_PRODUCT = "maml-product"
    MAML_AUTODIFF = "maml-autodiff"
    FO_MAML = "fo-maml"
    SIGN_MAML = "sign-maml"

    @property
    def inner_kind(self) -> str:
        return SIGNSGD if self is MetaMethod.SIGN_MAML else SGD


class DivergenceError(RuntimeError):
    """Non-finite loss or gradient during adaptation."""

    def __init__(self, message, step: int | None = None, task: int | None = None):
        super().__init__(message)
        self.step = step
        self.task = task


class MethodMismatchError(ValueError):
    """A trace produced by one inner optimizer was fed to an engine that
    requires the other."""


@dataclass(frozen=True)
class InnerOptimizer:
    """Lower-level optimizer: kind, learning rate and step count.

    beta = 0 is tolerated (it freezes the iterates) so that degenerate
    configurations remain expressible for diagnostics; training configs
    should use beta > 0.
    """

    kind: str
    beta: float
    steps: int

    def __post_init__(self):
        if self.kind not in (SGD, SIGNSGD):
            raise ValueError(f"inner optimizer kind must be sgd or signsgd, got {self.kind!r}")
        if not math.isfinite(self.beta) or self.beta < 0:
            raise ValueError(f"inner learning rate must be finite and >= 0, got {self.beta}")
        if self.steps < 0:
            raise ValueError(f"step count must be >= 0, got {self.steps}")


@dataclass(frozen=True)
class MetaConfig:
    """Upper-level configuration for one meta-training run."""

    alpha: float
    inner: InnerOptimizer
    method: MetaMethod
    meta_batch: int = 4
    m_test: int = 10

    def __post_init__(self):
        if not math.isfinite(self.alpha) or self.alpha < 0:
            raise ValueError(f"meta learning rate must be finite and >= 0, got {self.alpha}")
        if self.meta_batch < 1:
            raise ValueError(f"meta batch must be >= 1, got {self.meta_batch}")
        if self.m_test < 0:
            raise ValueError(f"test-time step count must be >= 0, got {self.m_test}")
        if self.inner.kind != self.method.inner_kind:
            raise ValueError(
                f"{self.method.value} requires the {self.method.inner_kind} inner "
                f"optimizer, got {self.inner.kind}"
            )


@dataclass
class AdaptStep:
    """One inner step's recorded computation, kept for second-order replay."""

    tape: Tape
    weights: list[Tensor]
    loss: Tensor


@dataclass
class AdaptTrace:
    """Inner-loop iterates y(0)..y(m) plus per-step tapes."""

    iterates: list[ParamVector]
    steps: list[AdaptStep]
    kind: str
    beta: float

    def __post_init__(self):
        if len(self.iterates) != len(self.steps) + 1:
            raise ValueError("a trace holds one more iterate than steps")

    @property
    def final(self) -> ParamVector:
        return self.iterates[-1]


@dataclass
class RunRecord:
    """Per-meta-iteration record: loss, optional accuracy, wall time."""

    iteration: int
    query_loss: float
    query_accuracy: float | None
    seconds: float
    val_accuracy: float | None = None


def _flatten(tensors: list[Tensor]) -> np.ndarray:
    return np.concatenate([t.data.ravel() for t in tensors])


def _check_finite(value, what: str, step: int):
    arr = value.data if isinstance(value, Tensor) else value
    if not np.all(np.isfinite(arr)):
        raise DivergenceError(f"non-finite {what} at inner step {step}", step=step)


def _support_grad(problem, params: ParamVector, task, step: int) -> tuple[np.ndarray, AdaptStep]:
    tape = Tape(order=2)
    weights = problem.bind(tape, params)
    loss = problem.support_loss(weights, task)
    _check_finite(loss, "support loss", step)
    grads = backward(tape, loss, weights)
    flat = _flatten(grads)
    _check_finite(flat, "support gradient", step)
    return flat, AdaptStep(tape, weights, loss)


def _unroll(problem, x: ParamVector, task, beta: float, m: int, kind: str) -> AdaptTrace:
    iterates = [x]
    steps = []
    y = x
    for j in range(m):
        grad, step = _support_grad(problem, y, task, j)
        if kind == SGD:
            y = y.with_values(kernels.sgd_step(y.values, grad, beta))
        else:
            y = y.with_values(kernels.sign_step(y.values, grad, beta))
        steps.append(step)
        iterates.append(y)
    return AdaptTrace(iterates, steps, kind, beta)


def unroll_sgd(problem, x: ParamVector, task, beta: float, m: int) -> AdaptTrace:
    """m full-batch gradient steps on the support loss."""
    return _unroll(problem, x, task, beta, m, SGD)


def unroll_signsgd(problem, x: ParamVector, task, beta: float, m: int) -> AdaptTrace:
    """m sign-descent steps: each coordinate moves by exactly -beta * sign
    of its support gradient; zero-gradient coordinates stay put."""
    return _unroll(problem, x, task, beta, m, SIGNSGD)


def query_grad(problem, params: ParamVector, task) -> np.ndarray:
    """Plain query-set gradient at the given weights, on a fresh tape."""
    tape = Tape(order=1)
    weights = problem.bind(tape, params)
    loss = problem.query_loss(weights, task)
    _check_finite(loss, "query loss", -1)
    flat = _flatten(backward(tape, loss, weights))
    _check_finite(flat, "query gradient", -1)
    return flat


def _multi_hvp(step: AdaptStep, v: np.ndarray) -> np.ndarray:
    """Support-loss Hessian at a recorded step, applied to a flat vector."""
    tape = step.tape
    grads = backward(tape, step.loss, step.weights, create_graph=True)
    directional = None
    offset = 0
    for g, w in zip(grads, step.weights):
        piece = constant(v[offset : offset + w.data.size].reshape(w.data.shape))
        offset += w.data.size
        term = reduce_sum(mul(g, piece))
        directional = term if directional is None else add(directional, term)
    hv = backward(tape, directional, step.weights)
    return _flatten(hv)


def meta_grad_maml_product(problem, trace: AdaptTrace, task) -> ParamVector:
    """Exact meta-gradient via the explicit Hessian-product chain.

    Starts from the query gradient at y(m) and applies
    v <- v - beta * H(y(n)) v for n = m-1 down to 0.
    """
    if trace.kind != SGD:
        raise MethodMismatchError("maml-product needs a gradient-descent trace")
    v = query_grad(problem, trace.final, task)
    for step in reversed(trace.steps):
        v = v - trace.beta * _multi_hvp(step, v)
    return trace.final.with_values(v)


def _autodiff_unroll(problem, x: ParamVector, task, beta: float, m: int, kind: str):
    """Record the whole unroll on one order-2 tape; return the leaves, the
    final weight tensors, and the query loss."""
    tape = Tape(order=2)
    leaves = problem.bind(tape, x)
    ys = leaves
    for j in range(m):
        loss = problem.support_loss(ys, task)
        _check_finite(loss, "support loss", j)
        grads = backward(tape, loss, ys, create_graph=True)
        for g in grads:
            _check_finite(g, "support gradient", j)
        if kind == SIGNSGD:
            grads = [sign(g) for g in grads]
        ys = [sub(y, scalar_mul(g, beta)) for y, g in zip(ys, grads)]
    qloss = problem.query_loss(ys, task)
    _check_finite(qloss, "query loss", m)
    return tape, leaves, ys, qloss


def meta_grad_maml_autodiff(problem, x: ParamVector, task, inner: InnerOptimizer) -> ParamVector:
    """Meta-gradient by backpropagating the query loss through the whole
    recorded unroll. The signsgd variant exists so the first-order collapse
    can be verified rather than assumed."""
    tape, leaves, _, qloss = _autodiff_unroll(problem, x, task, inner.beta, inner.steps, inner.kind)
    grads = backward(tape, qloss, leaves)
    return x.with_values(_flatten(grads))


def _meta_grad_autodiff_full(problem, x, task, inner) -> tuple[ParamVector, ParamVector, float]:
    tape, leaves, ys, qloss = _autodiff_unroll(problem, x, task, inner.beta, inner.steps, inner.kind)
    grads = backward(tape, qloss, leaves)
    y_final = x.with_values(np.concatenate([y.data.ravel() for y in ys]))
    return x.with_values(_flatten(grads)), y_final, qloss.item()


def meta_grad_fomaml(problem, trace: AdaptTrace, task) -> ParamVector:
    """First-order meta-gradient: the query gradient at the adapted
    weights, second-order terms dropped."""
    if trace.kind != SGD:
        raise MethodMismatchError("fo-maml needs a gradient-descent trace")
    return trace.final.with_values(query_grad(problem, trace.final, task))


def meta_grad_signmaml(problem, trace: AdaptTrace, task) -> ParamVector:
    """Meta-gradient for sign-descent adaptation: the query gradient at
    y(m). Equal to differentiating through the unroll because sign has an
    exactly-zero derivative."""
    if trace.kind != SIGNSGD:
        raise MethodMismatchError("sign-maml needs a sign-descent trace")
    return trace.final.with_values(query_grad(problem, trace.final, task))


def _task_meta_grad(problem, x: ParamVector, task, cfg: MetaConfig):
    """Meta-gradient plus the adapted weights (and query loss when the
    engine already computed it)."""
    inner = cfg.inner
    method = cfg.method
    if method is MetaMethod.MAML_AUTODIFF:
        grad, y_final, qloss = _meta_grad_autodiff_full(problem, x, task, inner)
        return grad, y_final, qloss
    if method is MetaMethod.MAML_PRODUCT:
        trace = unroll_sgd(problem, x, task, inner.beta, inner.steps)
        return meta_grad_maml_product(problem, trace, task), trace.final, None
    if method is MetaMethod.FO_MAML:
        trace = unroll_sgd(problem, x, task, inner.beta, inner.steps)
        return meta_grad_fomaml(problem, trace, task), trace.final, None
    trace = unroll_signsgd(problem, x, task, inner.beta, inner.steps)
    return meta_grad_signmaml(problem, trace, task), trace.final, None


def meta_step(problem, x: ParamVector, episode: list, cfg: MetaConfig, iteration: int = 0):
    """One upper-level step over an episode of tasks.

    Meta-gradients are averaged over the episode in fixed task order and
    applied as x - alpha * mean. The timed region covers adaptation,
    meta-gradients and the update; the loss/accuracy instrumentation runs
    after the clock stops.
    """
    if len(episode) != cfg.meta_batch:
        raise ValueError(
            f"episode holds {len(episode)} tasks but the config expects {cfg.meta_batch}"
        )
    start = time.perf_counter()
    accum = None
    finals = []
    losses = []
    for idx, task in enumerate(episode):
        try:
            grad, y_final, qloss = _task_meta_grad(problem, x, task, cfg)
        except DivergenceError as err:
            raise DivergenceError(f"task {idx}: {err}", step=err.step, task=idx) from err
        accum = grad.values.copy() if accum is None else accum + grad.values
        finals.append(y_final)
        losses.append(qloss)
    mean_grad = accum / cfg.meta_batch
    x_next = x.with_values(kernels.sgd_step(x.values, mean_grad, cfg.alpha))
    seconds = time.perf_counter() - start

    # instrumentation (untimed): mean query loss/accuracy at the adapted weights
    loss_values = []
    acc_values = []
    for task, y_final, qloss in zip(episode, finals, losses):
        loss_values.append(qloss if qloss is not None else problem.query_loss_value(y_final, task))
        acc = problem.query_accuracy(y_final, task)
        if acc is not None:
            acc_values.append(acc)
    record = RunRecord(
        iteration=iteration,
        query_loss=float(np.mean(loss_values)),
        query_accuracy=float(np.mean(acc_values)) if acc_values else None,
        seconds=seconds,
    )
    return x_next, record


def adapt(problem, x: ParamVector, task, kind: str, beta: float, m: int) -> ParamVector:
    """Convenience: run the inner loop and return the adapted weights."""
    if kind == SGD:
        return unroll_sgd(problem, x, task, beta, m).final
    return unroll_signsgd(problem, x, task, beta, m).final
