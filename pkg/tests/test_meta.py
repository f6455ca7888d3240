"""Solver tests: unroll recurrences against closed forms, the four
meta-gradient engines against one another and against hand arithmetic,
degeneracies, and the meta step contract."""

import numpy as np
import numpy.testing as npt
import pytest

from signmaml.meta import (
    SGD,
    SIGNSGD,
    DivergenceError,
    InnerOptimizer,
    MetaConfig,
    MetaMethod,
    MethodMismatchError,
    meta_grad_fomaml,
    meta_grad_maml_autodiff,
    meta_grad_maml_product,
    meta_grad_signmaml,
    meta_step,
    query_grad,
    unroll_sgd,
    unroll_signsgd,
)
from signmaml.models import LossKind, MlpProblem, MlpSpec, QuadraticLinearProblem, init_params
from signmaml.oracle import quadratic_bilevel_oracle, random_mlp_instance
from signmaml.params import ParamVector, Segment
from signmaml.tensor import constant, reduce_sum, squared_error


class ScalarProblem:
    """One scalar weight; support loss (w - a)^2, query loss (w - b)^2."""

    def __init__(self, support_target, query_target):
        self.support_target = float(support_target)
        self.query_target = float(query_target)

    def vector(self, value):
        return ParamVector((Segment("w", (1, 1), 0),), np.array([float(value)]))

    def bind(self, tape, params):
        arr = params.values.reshape(1, 1)
        return [constant(arr)] if tape is None else [tape.leaf(arr)]

    def support_loss(self, weights, task=None):
        (w,) = weights
        return squared_error(w, constant([[self.support_target]]))

    def query_loss(self, weights, task=None):
        (w,) = weights
        return squared_error(w, constant([[self.query_target]]))

    def query_loss_value(self, params, task=None):
        return self.query_loss(self.bind(None, params)).item()

    def query_accuracy(self, params, task=None):
        return None


class LinearProblem:
    """Support loss sum(w): the gradient is all-ones everywhere."""

    def __init__(self, n):
        self.n = n

    def vector(self, values):
        return ParamVector((Segment("w", (self.n, 1), 0),), np.asarray(values, dtype=float))

    def bind(self, tape, params):
        arr = params.values.reshape(self.n, 1)
        return [constant(arr)] if tape is None else [tape.leaf(arr)]

    def support_loss(self, weights, task=None):
        return reduce_sum(weights[0])

    def query_loss(self, weights, task=None):
        return reduce_sum(weights[0])

    def query_loss_value(self, params, task=None):
        return float(params.values.sum())

    def query_accuracy(self, params, task=None):
        return None


QUAD_A = np.array([[2.0, 1.0], [1.0, 3.0]])


def quad_problem():
    return QuadraticLinearProblem(QUAD_A, np.array([0.5, -1.0]), np.array([1.0, 0.0]))


def small_mlp_case(seed, classification=True):
    problem, _, _, x, task, beta = random_mlp_instance(seed, classification=classification)
    return problem, x, task, beta


# ---------------------------------------------------------------------------
# inner unrolls
# ---------------------------------------------------------------------------

def test_unroll_zero_steps_is_just_x():
    problem, x, task, beta = small_mlp_case(0)
    trace = unroll_sgd(problem, x, task, beta, 0)
    assert len(trace.iterates) == 1 and not trace.steps
    assert trace.final.values.tobytes() == x.values.tobytes()


def test_unroll_zero_rate_freezes_iterates():
    problem, x, task, _ = small_mlp_case(1)
    trace = unroll_sgd(problem, x, task, 0.0, 5)
    for it in trace.iterates:
        assert it.values.tobytes() == x.values.tobytes()


def test_unroll_sgd_matches_linear_recurrence():
    problem = quad_problem()
    x = problem.vector([4.0, -2.0])
    beta, m = 0.07, 6
    trace = unroll_sgd(problem, x, None, beta, m)
    # independent recurrence: y <- y - beta * A (y - c)
    y = x.values.copy()
    c = np.array([0.5, -1.0])
    for j in range(m):
        y = y - beta * (QUAD_A @ (y - c))
        npt.assert_allclose(trace.iterates[j + 1].values, y, rtol=1e-12, atol=1e-14)


def test_unroll_signsgd_step_geometry():
    problem, x, task, _ = small_mlp_case(2)
    beta = 0.03
    trace = unroll_signsgd(problem, x, task, beta, 1)
    move = trace.final.values - x.values
    assert np.max(np.abs(move)) <= beta * (1 + 1e-12)
    nonzero = move != 0.0
    npt.assert_allclose(np.abs(move[nonzero]), beta, rtol=1e-12)


def test_unroll_signsgd_all_positive_gradient():
    problem = LinearProblem(4)
    x = problem.vector([0.0, 1.0, -1.0, 2.0])
    trace = unroll_signsgd(problem, x, None, 0.25, 1)
    npt.assert_array_equal(trace.final.values, x.values - 0.25)


def test_unroll_signsgd_hand_iterates_1d():
    problem = ScalarProblem(support_target=3.0, query_target=5.0)
    trace = unroll_signsgd(problem, problem.vector(0.0), None, 0.5, 4)
    npt.assert_array_equal(
        np.concatenate([it.values for it in trace.iterates]), [0.0, 0.5, 1.0, 1.5, 2.0]
    )


@pytest.mark.filterwarnings("ignore:overflow")
def test_unroll_divergence_carries_step_index():
    problem = quad_problem()
    x = problem.vector([1.0, 1.0])
    with pytest.raises(DivergenceError) as err:
        unroll_sgd(problem, x, None, 1e200, 3)
    assert err.value.step is not None


# ---------------------------------------------------------------------------
# meta-gradient engines
# ---------------------------------------------------------------------------

def test_product_m0_is_query_gradient():
    problem, x, task, beta = small_mlp_case(3)
    trace = unroll_sgd(problem, x, task, beta, 0)
    out = meta_grad_maml_product(problem, trace, task)
    npt.assert_array_equal(out.values, query_grad(problem, x, task))


def test_product_beta0_is_query_gradient():
    problem, x, task, _ = small_mlp_case(4)
    trace = unroll_sgd(problem, x, task, 0.0, 3)
    out = meta_grad_maml_product(problem, trace, task)
    npt.assert_array_equal(out.values, query_grad(problem, x, task))


def test_product_quadratic_closed_form_pinned():
    problem = quad_problem()
    x = problem.vector([0.3, -0.2])
    trace = unroll_sgd(problem, x, None, 0.1, 2)
    out = meta_grad_maml_product(problem, trace, None)
    # (I - 0.1 A)^2 [1, 0] worked out by hand
    npt.assert_allclose(out.values, [0.65, -0.15], rtol=1e-12)
    npt.assert_allclose(
        out.values, quadratic_bilevel_oracle(QUAD_A, np.array([0.5, -1.0]), np.array([1.0, 0.0]), 0.1, 2),
        rtol=1e-10,
    )


def test_autodiff_m0_and_beta0():
    problem, x, task, beta = small_mlp_case(5)
    qg = query_grad(problem, x, task)
    out0 = meta_grad_maml_autodiff(problem, x, task, InnerOptimizer(SGD, beta, 0))
    npt.assert_array_equal(out0.values, qg)
    out_b0 = meta_grad_maml_autodiff(problem, x, task, InnerOptimizer(SGD, 0.0, 3))
    npt.assert_allclose(out_b0.values, qg, rtol=0, atol=0)


@pytest.mark.parametrize("m", [1, 2, 3])
def test_engine_equivalence_product_vs_autodiff(m):
    worst = 0.0
    for seed in range(25):
        problem, x, task, beta = small_mlp_case(100 + seed, classification=(seed % 2 == 0))
        trace = unroll_sgd(problem, x, task, beta, m)
        p = meta_grad_maml_product(problem, trace, task).values
        a = meta_grad_maml_autodiff(problem, x, task, InnerOptimizer(SGD, beta, m)).values
        rel = np.linalg.norm(p - a) / max(np.linalg.norm(a), 1e-300)
        worst = max(worst, rel)
    assert worst < 1e-8


def test_fomaml_m0_equals_product():
    problem, x, task, beta = small_mlp_case(6)
    trace = unroll_sgd(problem, x, task, beta, 0)
    fo = meta_grad_fomaml(problem, trace, task)
    prod = meta_grad_maml_product(problem, trace, task)
    assert fo.values.tobytes() == prod.values.tobytes()


def test_fomaml_quadratic_ignores_curvature():
    problem = quad_problem()
    x = problem.vector([0.3, -0.2])
    for beta in (0.05, 0.1, 0.2):
        trace = unroll_sgd(problem, x, None, beta, 2)
        fo = meta_grad_fomaml(problem, trace, None)
        npt.assert_array_equal(fo.values, [1.0, 0.0])


def test_fomaml_is_fresh_constant_query_gradient():
    problem, x, task, beta = small_mlp_case(7)
    trace = unroll_sgd(problem, x, task, beta, 2)
    fo = meta_grad_fomaml(problem, trace, task)
    fresh = query_grad(problem, trace.final, task)
    assert fo.values.tobytes() == fresh.tobytes()


def test_fo_gap_witness_quadratic():
    # with beta*A != 0 the first-order shortcut provably misses the
    # curvature factor: || (I - beta A)^m g - g || > 0
    problem = quad_problem()
    x = problem.vector([0.0, 0.0])
    beta, m = 0.1, 2
    trace = unroll_sgd(problem, x, None, beta, m)
    fo = meta_grad_fomaml(problem, trace, None).values
    exact = meta_grad_maml_product(problem, trace, None).values
    g = np.array([1.0, 0.0])
    expected_gap = np.linalg.norm(quadratic_bilevel_oracle(QUAD_A, None, g, beta, m) - g)
    assert expected_gap > 0
    assert np.linalg.norm(fo - exact) >= expected_gap - 1e-12


def test_signmaml_m0_is_query_gradient():
    problem, x, task, beta = small_mlp_case(8)
    trace = unroll_signsgd(problem, x, task, beta, 0)
    out = meta_grad_signmaml(problem, trace, task)
    npt.assert_array_equal(out.values, query_grad(problem, x, task))


def test_signmaml_hand_1d_value():
    problem = ScalarProblem(support_target=3.0, query_target=5.0)
    trace = unroll_signsgd(problem, problem.vector(0.0), None, 0.5, 4)
    out = meta_grad_signmaml(problem, trace, None)
    npt.assert_allclose(out.values, [-6.0], rtol=1e-14)


@pytest.mark.parametrize("m", [0, 1, 3])
def test_signmaml_equals_autodiff_through_sign_unroll(m):
    for seed in range(20):
        problem, x, task, beta = small_mlp_case(200 + seed, classification=(seed % 2 == 0))
        trace = unroll_signsgd(problem, x, task, beta, m)
        direct = meta_grad_signmaml(problem, trace, task).values
        through = meta_grad_maml_autodiff(problem, x, task, InnerOptimizer(SIGNSGD, beta, m)).values
        rel = np.max(np.abs(direct - through)) / max(np.max(np.abs(direct)), 1e-300)
        assert rel < 1e-12


def test_method_mismatch_errors():
    problem, x, task, beta = small_mlp_case(9)
    sgd_trace = unroll_sgd(problem, x, task, beta, 1)
    sign_trace = unroll_signsgd(problem, x, task, beta, 1)
    with pytest.raises(MethodMismatchError):
        meta_grad_maml_product(problem, sign_trace, task)
    with pytest.raises(MethodMismatchError):
        meta_grad_fomaml(problem, sign_trace, task)
    with pytest.raises(MethodMismatchError):
        meta_grad_signmaml(problem, sgd_trace, task)


# ---------------------------------------------------------------------------
# configuration validation
# ---------------------------------------------------------------------------

def test_inner_optimizer_validation():
    with pytest.raises(ValueError):
        InnerOptimizer("adam", 0.1, 1)
    with pytest.raises(ValueError):
        InnerOptimizer(SGD, -0.1, 1)
    with pytest.raises(ValueError):
        InnerOptimizer(SGD, float("nan"), 1)
    with pytest.raises(ValueError):
        InnerOptimizer(SGD, 0.1, -1)
    InnerOptimizer(SGD, 0.0, 3)  # frozen-iterate diagnostics allowed


def test_meta_config_pairing():
    sgd_opt = InnerOptimizer(SGD, 0.1, 1)
    sign_opt = InnerOptimizer(SIGNSGD, 0.01, 1)
    with pytest.raises(ValueError):
        MetaConfig(alpha=0.001, inner=sgd_opt, method=MetaMethod.SIGN_MAML)
    with pytest.raises(ValueError):
        MetaConfig(alpha=0.001, inner=sign_opt, method=MetaMethod.MAML_AUTODIFF)
    with pytest.raises(ValueError):
        MetaConfig(alpha=-1.0, inner=sgd_opt, method=MetaMethod.FO_MAML)
    with pytest.raises(ValueError):
        MetaConfig(alpha=0.001, inner=sgd_opt, method=MetaMethod.FO_MAML, meta_batch=0)
    MetaConfig(alpha=0.0, inner=sgd_opt, method=MetaMethod.MAML_PRODUCT)


# ---------------------------------------------------------------------------
# meta step
# ---------------------------------------------------------------------------

def _episode_config(method, beta, m, p=2):
    kind = SIGNSGD if method is MetaMethod.SIGN_MAML else SGD
    return MetaConfig(alpha=0.01, inner=InnerOptimizer(kind, beta, m), method=method, meta_batch=p)


def _mlp_episode(seed, p=2):
    problem, x, task, beta = small_mlp_case(seed)
    tasks = [small_mlp_case(seed + 10 * (i + 1))[2] for i in range(p - 1)]
    # tasks must share the problem's shapes: regenerate from consistent seeds
    return problem, x, [task] + tasks


def test_meta_step_alpha_zero_is_identity():
    problem, x, task, beta = small_mlp_case(10)
    cfg = MetaConfig(
        alpha=0.0, inner=InnerOptimizer(SIGNSGD, beta, 1), method=MetaMethod.SIGN_MAML, meta_batch=2
    )
    x_next, record = meta_step(problem, x, [task, task], cfg)
    assert x_next.values.tobytes() == x.values.tobytes()
    assert record.seconds > 0
    assert record.query_loss >= 0


def test_meta_step_single_task_is_alpha_times_grad():
    problem, x, task, beta = small_mlp_case(11)
    cfg = MetaConfig(
        alpha=0.05, inner=InnerOptimizer(SGD, beta, 1), method=MetaMethod.FO_MAML, meta_batch=1
    )
    x_next, _ = meta_step(problem, x, [task], cfg)
    trace = unroll_sgd(problem, x, task, beta, 1)
    grad = meta_grad_fomaml(problem, trace, task)
    npt.assert_array_equal(x_next.values, x.values - 0.05 * grad.values)


def test_meta_step_duplicate_task_matches_single():
    problem, x, task, beta = small_mlp_case(12)
    cfg1 = MetaConfig(
        alpha=0.05, inner=InnerOptimizer(SGD, beta, 1), method=MetaMethod.MAML_PRODUCT, meta_batch=1
    )
    cfg2 = MetaConfig(
        alpha=0.05, inner=InnerOptimizer(SGD, beta, 1), method=MetaMethod.MAML_PRODUCT, meta_batch=2
    )
    x1, _ = meta_step(problem, x, [task], cfg1)
    x2, _ = meta_step(problem, x, [task, task], cfg2)
    assert x1.values.tobytes() == x2.values.tobytes()


def test_meta_step_episode_length_mismatch():
    problem, x, task, beta = small_mlp_case(13)
    cfg = _episode_config(MetaMethod.FO_MAML, beta, 1, p=3)
    with pytest.raises(ValueError):
        meta_step(problem, x, [task], cfg)


@pytest.mark.filterwarnings("ignore:overflow")
def test_meta_step_divergence_carries_task_index():
    problem = quad_problem()
    x = problem.vector([1.0, 1.0])
    cfg = MetaConfig(
        alpha=0.01, inner=InnerOptimizer(SGD, 1e200, 2), method=MetaMethod.MAML_PRODUCT, meta_batch=2
    )
    with pytest.raises(DivergenceError) as err:
        meta_step(problem, x, [None, None], cfg)
    assert err.value.task == 0


def test_meta_step_record_has_accuracy_for_classification():
    problem, x, task, beta = small_mlp_case(14)
    cfg = _episode_config(MetaMethod.SIGN_MAML, beta, 1, p=1)
    _, record = meta_step(problem, x, [task], cfg)
    assert record.query_accuracy is not None
    assert 0.0 <= record.query_accuracy <= 1.0


# ---------------------------------------------------------------------------
# degeneracies across all four engines
# ---------------------------------------------------------------------------

def test_m0_all_engines_bitwise_equal():
    for seed in range(10):
        problem, x, task, beta = small_mlp_case(300 + seed)
        sgd_trace = unroll_sgd(problem, x, task, beta, 0)
        sign_trace = unroll_signsgd(problem, x, task, beta, 0)
        outs = [
            meta_grad_maml_product(problem, sgd_trace, task).values.tobytes(),
            meta_grad_maml_autodiff(problem, x, task, InnerOptimizer(SGD, beta, 0)).values.tobytes(),
            meta_grad_fomaml(problem, sgd_trace, task).values.tobytes(),
            meta_grad_signmaml(problem, sign_trace, task).values.tobytes(),
        ]
        assert len(set(outs)) == 1


def test_beta0_maml_engines_equal():
    for seed in range(10):
        problem, x, task, _ = small_mlp_case(400 + seed)
        trace = unroll_sgd(problem, x, task, 0.0, 2)
        p = meta_grad_maml_product(problem, trace, task).values
        a = meta_grad_maml_autodiff(problem, x, task, InnerOptimizer(SGD, 0.0, 2)).values
        assert np.array_equal(p, a)
