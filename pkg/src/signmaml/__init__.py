"""Meta-learning with MAML, FO-MAML and Sign-MAML on a tape-based
higher-order autodiff engine, plus synthetic few-shot tasks, independent
oracles and an experiment harness."""

from .kernels import BACKEND
from .params import ParamVector, Segment
from .tensor import (
    AutodiffError,
    CapabilityError,
    ContractError,
    DataError,
    ProvenanceError,
    ShapeError,
    Tape,
    Tensor,
    backward,
    constant,
    forward_op,
    hvp,
)
from .models import LossKind, MlpProblem, MlpSpec, QuadraticLinearProblem, accuracy, init_params, loss
from .tasks import StreamKey, Task, TaskDistribution, sample_episode, sample_task
from .meta import (
    SGD,
    SIGNSGD,
    AdaptTrace,
    DivergenceError,
    InnerOptimizer,
    MetaConfig,
    MetaMethod,
    MethodMismatchError,
    RunRecord,
    adapt,
    meta_grad_fomaml,
    meta_grad_maml_autodiff,
    meta_grad_maml_product,
    meta_grad_signmaml,
    meta_step,
    unroll_sgd,
    unroll_signsgd,
)

__version__ = "0.1.0"

__all__ = [
    "BACKEND",
    "ParamVector",
    "Segment",
    "AutodiffError",
    "CapabilityError",
    "ContractError",
    "DataError",
    "ProvenanceError",
    "ShapeError",
    "Tape",
    "Tensor",
    "backward",
    "constant",
    "forward_op",
    "hvp",
    "LossKind",
    "MlpProblem",
    "MlpSpec",
    "QuadraticLinearProblem",
    "accuracy",
    "init_params",
    "loss",
    "StreamKey",
    "Task",
    "TaskDistribution",
    "sample_episode",
    "sample_task",
    "SGD",
    "SIGNSGD",
    "AdaptTrace",
    "DivergenceError",
    "InnerOptimizer",
    "MetaConfig",
    "MetaMethod",
    "MethodMismatchError",
    "RunRecord",
    "adapt",
    "meta_grad_fomaml",
    "meta_grad_maml_autodiff",
    "meta_grad_maml_product",
    "meta_grad_signmaml",
    "meta_step",
    "unroll_sgd",
    "unroll_signsgd",
    "__version__",
]
