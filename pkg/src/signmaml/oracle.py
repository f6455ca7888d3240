"""Independent ground truth for the solvers.

Everything numerical here is straight-line numpy, written separately from
the tape engine (hand-derived layer gradients, explicit unroll loops), so
agreement between the two is evidence rather than tautology. The module
provides:

  * finite-difference meta-gradients of the unrolled query loss,
    with a guard that rejects instances sitting too close to a relu or
    sign kink;
  * the closed-form meta-gradient of the quadratic/linear bilevel
    instance, (I - beta*A)^m g by repeated multiplication;
  * the first-order collapse check for sign-descent unrolling, run as a
    measurement (max relative deviation), not an assumption;
  * a seeded verification sweep that emits a flat key=value report.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .meta import (
    SGD,
    SIGNSGD,
    InnerOptimizer,
    meta_grad_fomaml,
    meta_grad_maml_autodiff,
    meta_grad_maml_product,
    meta_grad_signmaml,
    unroll_sgd,
    unroll_signsgd,
)
from .models import LossKind, MlpProblem, MlpSpec, init_params
from .params import ParamVector
from .tasks import Task
from .tensor import ContractError


class ResampleRequest(RuntimeError):
    """An instance came within the guard distance of a kink; finite
    differences would straddle the discontinuity, so sample a fresh one."""


@dataclass(frozen=True)
class FdSpec:
    epsilon: float = 1e-4
    scheme: str = "central"
    mode: str = "coordinate-wise"
    guard: float = 1e-6

    def __post_init__(self):
        if self.epsilon <= 0:
            raise ValueError(f"epsilon must be positive, got {self.epsilon}")
        if self.scheme != "central":
            raise ValueError(f"only the central scheme is implemented, got {self.scheme!r}")
        if self.mode not in ("coordinate-wise", "random-direction"):
            raise ValueError(f"unknown direction mode {self.mode!r}")


# ---------------------------------------------------------------------------
# straight-line MLP (independent of the tape engine)
# ---------------------------------------------------------------------------

def _unflatten(widths, flat):
    layers = []
    offset = 0
    for fi, fo in zip(widths[:-1], widths[1:]):
        w = flat[offset : offset + fi * fo].reshape(fi, fo)
        offset += fi * fo
        b = flat[offset : offset + fo].reshape(1, fo)
        offset += fo
        layers.append((w, b))
    return layers


def mlp_loss(widths, flat, inputs, targets, kind: LossKind):
    """Mean batch loss, the smallest |pre-activation| met at a relu, and
    the relu on/off pattern (which smooth piece the evaluation sits on)."""
    layers = _unflatten(widths, flat)
    h = inputs
    margin = math.inf
    masks = []
    for i, (w, b) in enumerate(layers):
        z = h @ w + b
        if i < len(layers) - 1:
            margin = min(margin, float(np.min(np.abs(z))) if z.size else math.inf)
            masks.append(z > 0.0)
            h = np.maximum(z, 0.0)
        else:
            h = z
    if kind is LossKind.CROSS_ENTROPY:
        m = h.max(axis=1, keepdims=True)
        lse = np.log(np.exp(h - m).sum(axis=1, keepdims=True)) + m
        picked = h[np.arange(h.shape[0]), targets][:, None]
        value = float(np.mean(lse - picked))
    else:
        value = float(np.mean((h - targets) ** 2))
    pattern = (
        np.concatenate([m.ravel() for m in masks]) if masks else np.zeros(0, dtype=bool)
    )
    return value, margin, pattern


def mlp_loss_grad(widths, flat, inputs, targets, kind: LossKind):
    """Hand-coded backprop. Returns (loss, flat gradient, kink margin,
    relu pattern)."""
    layers = _unflatten(widths, flat)
    acts = [inputs]
    pre = []
    margin = math.inf
    masks = []
    h = inputs
    for i, (w, b) in enumerate(layers):
        z = h @ w + b
        pre.append(z)
        if i < len(layers) - 1:
            margin = min(margin, float(np.min(np.abs(z))) if z.size else math.inf)
            masks.append(z > 0.0)
            h = np.maximum(z, 0.0)
        else:
            h = z
        acts.append(h)

    batch = inputs.shape[0]
    if kind is LossKind.CROSS_ENTROPY:
        m = h.max(axis=1, keepdims=True)
        e = np.exp(h - m)
        probs = e / e.sum(axis=1, keepdims=True)
        lse = np.log(e.sum(axis=1, keepdims=True)) + m
        picked = h[np.arange(batch), targets][:, None]
        value = float(np.mean(lse - picked))
        dz = probs.copy()
        dz[np.arange(batch), targets] -= 1.0
        dz /= batch
    else:
        value = float(np.mean((h - targets) ** 2))
        dz = 2.0 * (h - targets) / (h.size)

    grads = []
    for i in range(len(layers) - 1, -1, -1):
        w, _ = layers[i]
        a_in = acts[i]
        dw = a_in.T @ dz
        db = dz.sum(axis=0, keepdims=True)
        grads.append((dw, db))
        if i > 0:
            dz = (dz @ w.T) * (pre[i - 1] > 0.0)
    grads.reverse()
    flat_grad = np.concatenate([np.concatenate([dw.ravel(), db.ravel()]) for dw, db in grads])
    pattern = (
        np.concatenate([m.ravel() for m in masks]) if masks else np.zeros(0, dtype=bool)
    )
    return value, flat_grad, margin, pattern


def unrolled_query_loss(widths, kind, x_flat, task: Task, opt_kind, beta, m, guard=0.0):
    """F(x): query loss after m inner steps from x, all computed here.

    Returns (value, margin, signature): margin is the smallest distance to
    a relu or sign kink encountered anywhere along the unroll, and
    signature identifies the smooth piece (relu patterns of every forward
    pass plus, for sign descent, the gradient sign patterns). Raises
    ResampleRequest when the margin falls below the guard.
    """
    y = np.asarray(x_flat, dtype=np.float64)
    margin = math.inf
    pieces = []
    for _ in range(m):
        _, grad, mz, pattern = mlp_loss_grad(widths, y, task.support_x, task.support_y, kind)
        margin = min(margin, mz)
        pieces.append(pattern.tobytes())
        if opt_kind == SIGNSGD:
            margin = min(margin, float(np.min(np.abs(grad))))
            pieces.append(np.sign(grad).tobytes())
            y = y - beta * np.sign(grad)
        else:
            y = y - beta * grad
    value, mq, pattern = mlp_loss(widths, y, task.query_x, task.query_y, kind)
    pieces.append(pattern.tobytes())
    margin = min(margin, mq)
    if margin < guard:
        raise ResampleRequest(f"kink margin {margin:.2e} below guard {guard:.2e}")
    return value, margin, b"".join(pieces)


def central_diff(fn, x: np.ndarray, eps: float) -> np.ndarray:
    """Coordinate-wise central differences of a scalar function."""
    out = np.empty_like(x)
    for i in range(x.size):
        step = np.zeros_like(x)
        step[i] = eps
        out[i] = (fn(x + step) - fn(x - step)) / (2.0 * eps)
    return out


def central_diff_directional(fn, x: np.ndarray, direction: np.ndarray, eps: float) -> float:
    d = direction / np.linalg.norm(direction)
    return (fn(x + eps * d) - fn(x - eps * d)) / (2.0 * eps)


def fd_meta_grad(
    x: ParamVector,
    task: Task,
    inner: InnerOptimizer,
    fd: FdSpec,
    spec: MlpSpec,
    kind: LossKind,
    directions: int = 8,
    rng: np.random.Generator | None = None,
):
    """Finite-difference estimate of d F / d x for the unrolled objective.

    Coordinate-wise mode returns the full gradient vector; random-direction
    mode returns a list of (unit direction, directional slope) pairs.
    Raises ResampleRequest when any evaluation point is within the guard
    distance of a kink, or when a stencil point lands on a different
    relu/sign activation pattern than the center (the difference quotient
    would straddle the discontinuity).
    """
    _, _, center_sig = unrolled_query_loss(
        spec.widths, kind, x.values, task, inner.kind, inner.beta, inner.steps, guard=fd.guard
    )

    def f(flat):
        value, _, sig = unrolled_query_loss(
            spec.widths, kind, flat, task, inner.kind, inner.beta, inner.steps, guard=fd.guard
        )
        if sig != center_sig:
            raise ResampleRequest("finite-difference stencil crosses a kink")
        return value

    if fd.mode == "coordinate-wise":
        return central_diff(f, x.values, fd.epsilon)
    rng = rng or np.random.default_rng(0)
    out = []
    for _ in range(directions):
        u = rng.standard_normal(x.values.shape)
        u /= np.linalg.norm(u)
        out.append((u, central_diff_directional(f, x.values, u, fd.epsilon)))
    return out


# ---------------------------------------------------------------------------
# closed-form quadratic bilevel instance
# ---------------------------------------------------------------------------

def quadratic_bilevel_oracle(quad: np.ndarray, center, slope, beta: float, m: int) -> np.ndarray:
    """Exact meta-gradient (I - beta*A)^m g for support loss
    0.5 (y-c)' A (y-c) and query loss g'y, by repeated multiplication."""
    a = np.asarray(quad, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] != a.shape[1] or not np.array_equal(a, a.T):
        raise ContractError("quadratic oracle needs a symmetric matrix")
    del center  # the Hessian is constant; the center does not enter
    v = np.asarray(slope, dtype=np.float64).ravel().copy()
    for _ in range(m):
        v = v - beta * (a @ v)
    return v


# ---------------------------------------------------------------------------
# first-order collapse measurement
# ---------------------------------------------------------------------------

def collapse_check(problem, x: ParamVector, task, beta: float, m: int) -> float:
    """Max relative coordinate deviation between backprop-through-the-
    sign-unroll and the direct first-order update."""
    inner = InnerOptimizer(SIGNSGD, beta, m)
    through = meta_grad_maml_autodiff(problem, x, task, inner).values
    trace = unroll_signsgd(problem, x, task, beta, m)
    direct = meta_grad_signmaml(problem, trace, task).values
    return max_rel_deviation(through, direct)


def max_rel_deviation(a: np.ndarray, b: np.ndarray) -> float:
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), 1e-300)
    return float(np.max(np.abs(a - b) / denom)) if a.size else 0.0


# ---------------------------------------------------------------------------
# seeded random instances + verification sweep
# ---------------------------------------------------------------------------

def random_mlp_instance(seed: int, max_params: int = 200, classification: bool | None = None):
    """Small random problem + initialization + task for cross-checks."""
    rng = np.random.default_rng(seed)
    if classification is None:
        classification = bool(rng.integers(2))
    d = int(rng.integers(2, 5))
    hidden = [int(rng.integers(3, 7)) for _ in range(int(rng.integers(1, 3)))]
    if classification:
        n_way = int(rng.integers(2, 4))
        widths = (d, *hidden, n_way)
        k, q = int(rng.integers(1, 3)), int(rng.integers(2, 4))
        support_x = rng.standard_normal((n_way * k, d))
        query_x = rng.standard_normal((n_way * q, d))
        support_y = np.repeat(np.arange(n_way, dtype=np.int64), k)
        query_y = np.repeat(np.arange(n_way, dtype=np.int64), q)
        kind = LossKind.CROSS_ENTROPY
        task = Task(support_x, support_y, query_x, query_y, kind, n_way, k, q)
    else:
        widths = (d, *hidden, 1)
        k, q = int(rng.integers(2, 5)), int(rng.integers(2, 5))
        support_x = rng.standard_normal((k, d))
        query_x = rng.standard_normal((q, d))
        support_y = rng.standard_normal((k, 1))
        query_y = rng.standard_normal((q, 1))
        kind = LossKind.MSE
        task = Task(support_x, support_y, query_x, query_y, kind, 1, k, q)
    spec = MlpSpec(widths)
    assert spec.n_params <= max_params, f"instance too large: {spec.n_params}"
    problem = MlpProblem(spec, kind)
    x = init_params(spec, int(rng.integers(2**31)))
    beta = float(rng.uniform(0.005, 0.05))
    return problem, spec, kind, x, task, beta


def run_verification(
    seed: int = 0,
    collapse_tasks: int = 1000,
    equiv_instances: int = 500,
    fd_instances: int = 100,
    quad_instances: int = 50,
) -> dict:
    """Run the oracle suite; returns a flat dict of measurements."""
    from . import kernels
    from .models import QuadraticLinearProblem

    results: dict[str, object] = {"backend": kernels.BACKEND, "seed": seed}

    # first-order collapse across sign-descent unroll depths
    collapse_ms = (0, 1, 3, 10)
    worst = 0.0
    for i in range(collapse_tasks):
        problem, _, _, x, task, beta = random_mlp_instance(seed * 1_000_003 + i)
        m = collapse_ms[i % len(collapse_ms)]
        worst = max(worst, collapse_check(problem, x, task, beta, m))
    results["collapse_tasks"] = collapse_tasks
    results["collapse_max_rel"] = worst
    results["collapse_threshold"] = 1e-12

    # product engine vs backprop through the unroll
    worst = 0.0
    for i in range(equiv_instances):
        problem, _, _, x, task, beta = random_mlp_instance(7_777_777 + seed + i)
        m = i % 4
        trace = unroll_sgd(problem, x, task, beta, m)
        via_product = meta_grad_maml_product(problem, trace, task).values
        via_autodiff = meta_grad_maml_autodiff(
            problem, x, task, InnerOptimizer(SGD, beta, m)
        ).values
        scale = max(float(np.linalg.norm(via_autodiff)), 1e-300)
        worst = max(worst, float(np.linalg.norm(via_product - via_autodiff)) / scale)
    results["equiv_instances"] = equiv_instances
    results["equiv_max_rel"] = worst
    results["equiv_threshold"] = 1e-8

    # finite differences of the unrolled objective vs backprop
    fd = FdSpec(epsilon=1e-4)
    worst = 0.0
    done = 0
    attempt = 0
    while done < fd_instances:
        problem, spec, kind, x, task, beta = random_mlp_instance(31_337 + seed + attempt)
        attempt += 1
        m = attempt % 4
        inner = InnerOptimizer(SGD, beta, m)
        try:
            numeric = fd_meta_grad(x, task, inner, fd, spec, kind)
        except ResampleRequest:
            continue
        exact = meta_grad_maml_autodiff(problem, x, task, inner).values
        scale = max(float(np.linalg.norm(exact)), 1e-300)
        worst = max(worst, float(np.linalg.norm(numeric - exact)) / scale)
        done += 1
    results["fd_instances"] = fd_instances
    results["fd_max_rel"] = worst
    results["fd_threshold"] = 1e-4

    # quadratic/linear closed form, plus the first-order error witness
    worst = 0.0
    fo_worst = 0.0
    gap_min = math.inf
    rng = np.random.default_rng(seed + 99)
    for i in range(quad_instances):
        n = int(rng.integers(2, 6))
        b = rng.standard_normal((n, n))
        a = b + b.T + 2.0 * n * np.eye(n)
        c = rng.standard_normal(n)
        g = rng.standard_normal(n)
        beta = float(rng.uniform(0.01, 0.2))
        m = int(rng.integers(1, 4))
        problem = QuadraticLinearProblem(a, c, g)
        x = problem.vector(rng.standard_normal(n))
        trace = unroll_sgd(problem, x, None, beta, m)
        via_product = meta_grad_maml_product(problem, trace, None).values
        closed = quadratic_bilevel_oracle(a, c, g, beta, m)
        scale = max(float(np.linalg.norm(closed)), 1e-300)
        worst = max(worst, float(np.linalg.norm(via_product - closed)) / scale)
        fo = meta_grad_fomaml(problem, trace, task=None).values
        fo_worst = max(fo_worst, float(np.max(np.abs(fo - g.ravel()))))
        gap_min = min(gap_min, float(np.linalg.norm(closed - g.ravel())))
    results["quad_instances"] = quad_instances
    results["quad_product_max_rel"] = worst
    results["quad_product_threshold"] = 1e-10
    results["quad_fo_max_abs"] = fo_worst
    results["quad_fo_threshold"] = 0.0
    results["quad_fo_gap_min"] = gap_min

    return results


def checks_from_report(results: dict) -> list[tuple[str, float, float, bool]]:
    """(name, measured, threshold, passed) for keys carrying a threshold."""
    checks = []
    for key, value in results.items():
        if not key.endswith("_threshold"):
            continue
        name = key[: -len("_threshold")]
        for suffix in ("_max_rel", "_max_abs"):
            if name + suffix in results:
                measured = float(results[name + suffix])
                checks.append((name, measured, float(value), measured <= float(value)))
                break
    return checks


def write_report(results: dict, path) -> None:
    with open(path, "w") as fh:
        for key, value in results.items():
            if isinstance(value, float):
                fh.write(f"{key}={value!r}\n")
            else:
                fh.write(f"{key}={value}\n")


def read_report(path) -> dict:
    out = {}
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            key, _, value = line.partition("=")
            try:
                out[key] = int(value)
            except ValueError:
                try:
                    out[key] = float(value)
                except ValueError:
                    out[key] = value
    return out
