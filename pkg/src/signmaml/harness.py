"""Experiment harness: configuration, meta-training, evaluation, learning
rate grid search, sweeps, and CSV/JSON reporting.

Outputs of a training run (all under the configured output directory):

  loss.csv       iteration, train query loss, seconds, validation score
  results.csv    one row: method, N, K, m_train, m_test, beta, accuracy,
                 ci95, time_mean_s, time_std_s, seed, train_loss_mean,
                 train_loss_final (for sinusoid runs the accuracy/ci95
                 columns hold the test MSE and its interval)
  summary.json   the same numbers plus the config echo
  eval_tasks.csv per-test-task score, so the CI is recomputable
  checkpoint.bin final parameters (flat binary layout)

Every emitted number except the wall-clock columns is a deterministic
function of (seed, config). Confidence intervals are 1.96 * sample std /
sqrt(n); per-iteration time statistics exclude the first ``warmup_iters``
iterations so JIT and allocator warm-up do not pollute method comparisons.
"""

from __future__ import annotations

import csv
import json
import math
import os
from dataclasses import asdict, dataclass, field, replace
from typing import Iterable

import numpy as np

from . import kernels
from .meta import (
    DivergenceError,
    InnerOptimizer,
    MetaConfig,
    MetaMethod,
    RunRecord,
    adapt,
    meta_step,
)
from .models import LossKind, MlpProblem, MlpSpec, init_params
from .params import ParamVector
from .taskio import save_params
from .tasks import (
    DOMAIN_TEST,
    DOMAIN_TRAIN,
    DOMAIN_VAL,
    StreamKey,
    TaskDistribution,
    sample_episode,
    sample_task,
)

RESULTS_COLUMNS = [
    "method",
    "N",
    "K",
    "m_train",
    "m_test",
    "beta",
    "accuracy",
    "ci95",
    "time_mean_s",
    "time_std_s",
    "seed",
    "train_loss_mean",
    "train_loss_final",
]


@dataclass(frozen=True)
class ExperimentConfig:
    # task distribution
    task_kind: str = "gaussian-blobs"
    input_dim: int = 8
    n_way: int = 5
    k_shot: int = 1
    n_query: int = 15
    separation: float = 5.0
    noise: float = 1.0
    amp_min: float = 0.1
    amp_max: float = 5.0
    phase_min: float = 0.0
    phase_max: float = math.pi
    # model
    hidden: tuple[int, ...] = (32, 32)
    # meta-optimization
    method: str = "sign-maml"
    alpha: float = 0.001
    beta: float = 0.01
    m_train: int = 1
    m_test: int = 10
    meta_batch: int = 4
    # schedule and evaluation
    meta_iters: int = 2000
    val_interval: int = 0
    val_tasks: int = 200
    test_tasks: int = 1000
    warmup_iters: int = 10
    seed: int = 0
    out_dir: str = "runs/run"
    # sweep extras
    sweep_methods: tuple[str, ...] = ("sign-maml", "fo-maml")
    method_betas: dict = field(default_factory=dict)

    # -- derived pieces ----------------------------------------------------

    def distribution(self) -> TaskDistribution:
        return TaskDistribution(
            kind=self.task_kind,
            input_dim=self.input_dim,
            n_way=self.n_way,
            k_shot=self.k_shot,
            n_query=self.n_query,
            separation=self.separation,
            noise=self.noise,
            amp_min=self.amp_min,
            amp_max=self.amp_max,
            phase_min=self.phase_min,
            phase_max=self.phase_max,
        )

    def loss_kind(self) -> LossKind:
        return self.distribution().loss_kind

    def mlp_spec(self) -> MlpSpec:
        if self.task_kind == "gaussian-blobs":
            return MlpSpec((self.input_dim, *self.hidden, self.n_way))
        return MlpSpec((1, *self.hidden, 1))

    def problem(self) -> MlpProblem:
        return MlpProblem(self.mlp_spec(), self.loss_kind())

    def meta_method(self) -> MetaMethod:
        return MetaMethod(self.method)

    def meta_config(self) -> MetaConfig:
        method = self.meta_method()
        inner = InnerOptimizer(method.inner_kind, self.beta, self.m_train)
        return MetaConfig(
            alpha=self.alpha,
            inner=inner,
            method=method,
            meta_batch=self.meta_batch,
            m_test=self.m_test,
        )

    # -- (de)serialization ---------------------------------------------------

    def to_dict(self) -> dict:
        out = asdict(self)
        out["hidden"] = list(self.hidden)
        out["sweep_methods"] = list(self.sweep_methods)
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        data = dict(data)
        if "hidden" in data:
            data["hidden"] = tuple(int(w) for w in data["hidden"])
        if "sweep_methods" in data:
            data["sweep_methods"] = tuple(data["sweep_methods"])
        return cls(**data)

    @classmethod
    def from_file(cls, path) -> "ExperimentConfig":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))

    def with_overrides(self, overrides: dict[str, str]) -> "ExperimentConfig":
        """Apply command-line key=value overrides with type coercion."""
        changes = {}
        for key, raw in overrides.items():
            if key not in self.__dataclass_fields__:
                raise ValueError(f"unknown config key {key!r}")
            current = getattr(self, key)
            if key == "hidden":
                changes[key] = tuple(int(v) for v in str(raw).split(",") if v)
            elif key == "sweep_methods":
                changes[key] = tuple(str(raw).split(","))
            elif key == "method_betas":
                changes[key] = json.loads(raw) if isinstance(raw, str) else raw
            elif isinstance(current, bool):
                changes[key] = str(raw).lower() in ("1", "true", "yes")
            elif isinstance(current, int):
                changes[key] = int(raw)
            elif isinstance(current, float):
                changes[key] = float(raw)
            else:
                changes[key] = raw
        return replace(self, **changes)


@dataclass
class EvalResult:
    """Per-task scores of a test/validation evaluation."""

    scores: list[float]
    metric: str  # "accuracy" or "mse"

    @property
    def mean(self) -> float:
        return float(np.mean(self.scores))

    @property
    def ci95(self) -> float:
        n = len(self.scores)
        if n < 2:
            return 0.0
        return 1.96 * float(np.std(self.scores, ddof=1)) / math.sqrt(n)


@dataclass
class TrainResult:
    params: ParamVector
    records: list[RunRecord]
    evaluation: EvalResult | None


def time_stats(records: Iterable[RunRecord], warmup: int = 10) -> tuple[float, float]:
    """Mean/std of per-iteration wall time, first ``warmup`` iterations
    excluded (falls back to all records for very short runs)."""
    seconds = [r.seconds for r in records]
    if len(seconds) > warmup + 1:
        seconds = seconds[warmup:]
    if not seconds:
        return 0.0, 0.0
    if len(seconds) == 1:
        return float(seconds[0]), 0.0
    return float(np.mean(seconds)), float(np.std(seconds, ddof=1))


def evaluate(
    params: ParamVector,
    cfg: ExperimentConfig,
    domain: int = DOMAIN_TEST,
    n_tasks: int | None = None,
) -> EvalResult:
    """Adapt on fresh tasks for m_test steps and score the query set.

    Classification scores are accuracies; regression scores are query MSE.
    The inner optimizer matches the configured method (sign descent for
    sign-maml, gradient descent otherwise).
    """
    dist = cfg.distribution()
    problem = cfg.problem()
    kind = cfg.meta_method().inner_kind
    count = cfg.test_tasks if n_tasks is None else n_tasks
    classification = cfg.loss_kind() is LossKind.CROSS_ENTROPY
    scores = []
    for i in range(count):
        task = sample_task(dist, StreamKey(cfg.seed, domain, 0, i))
        adapted = adapt(problem, params, task, kind, cfg.beta, cfg.m_test)
        if classification:
            scores.append(problem.query_accuracy(adapted, task))
        else:
            scores.append(problem.query_loss_value(adapted, task))
    return EvalResult(scores, "accuracy" if classification else "mse")


def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _write_loss_csv(path, records: list[RunRecord]):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["iteration", "loss", "seconds", "val_score"])
        for r in records:
            writer.writerow([r.iteration, _fmt(r.query_loss), _fmt(r.seconds), _fmt(r.val_accuracy)])


def _results_row(cfg: ExperimentConfig, records, evaluation: EvalResult | None) -> dict:
    mean_s, std_s = time_stats(records, cfg.warmup_iters)
    losses = [r.query_loss for r in records]
    return {
        "method": cfg.method,
        "N": cfg.n_way if cfg.task_kind == "gaussian-blobs" else "",
        "K": cfg.k_shot,
        "m_train": cfg.m_train,
        "m_test": cfg.m_test,
        "beta": _fmt(cfg.beta),
        "accuracy": _fmt(evaluation.mean) if evaluation else "",
        "ci95": _fmt(evaluation.ci95) if evaluation else "",
        "time_mean_s": _fmt(mean_s),
        "time_std_s": _fmt(std_s),
        "seed": cfg.seed,
        "train_loss_mean": _fmt(float(np.mean(losses))) if losses else "",
        "train_loss_final": _fmt(losses[-1]) if losses else "",
    }


def write_results_csv(path, rows: list[dict], extra_columns: tuple[str, ...] = ()):
    columns = RESULTS_COLUMNS + [c for c in extra_columns if c not in RESULTS_COLUMNS]
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=columns, extrasaction="ignore")
        writer.writeheader()
        for row in rows:
            writer.writerow({k: row.get(k, "") for k in columns})


def train(cfg: ExperimentConfig, write: bool = True) -> TrainResult:
    """Meta-train per the config; optionally write the output files.

    Each iteration samples an episode, runs one meta step, and logs the
    record. Validation (when val_interval > 0) scores a fixed set of
    val_tasks tasks. A divergence aborts the run but flushes the records
    collected so far.
    """
    dist = cfg.distribution()
    problem = cfg.problem()
    mcfg = cfg.meta_config()
    params = init_params(cfg.mlp_spec(), cfg.seed)
    records: list[RunRecord] = []
    classification = cfg.loss_kind() is LossKind.CROSS_ENTROPY

    if write:
        os.makedirs(cfg.out_dir, exist_ok=True)

    try:
        for k in range(cfg.meta_iters):
            episode = sample_episode(dist, cfg.meta_batch, StreamKey(cfg.seed, DOMAIN_TRAIN, k))
            params, record = meta_step(problem, params, episode, mcfg, iteration=k)
            if cfg.val_interval and (k + 1) % cfg.val_interval == 0:
                val = evaluate(params, cfg, domain=DOMAIN_VAL, n_tasks=cfg.val_tasks)
                record.val_accuracy = val.mean
            records.append(record)
    except DivergenceError as err:
        if write:
            _write_loss_csv(os.path.join(cfg.out_dir, "loss.csv"), records)
        raise DivergenceError(
            f"meta-iteration {len(records)}: {err}", step=err.step, task=err.task
        ) from err

    evaluation = evaluate(params, cfg) if cfg.test_tasks > 0 else None

    if write:
        _write_loss_csv(os.path.join(cfg.out_dir, "loss.csv"), records)
        save_params(os.path.join(cfg.out_dir, "checkpoint.bin"), params)
        row = _results_row(cfg, records, evaluation)
        write_results_csv(os.path.join(cfg.out_dir, "results.csv"), [row])
        if evaluation is not None:
            with open(os.path.join(cfg.out_dir, "eval_tasks.csv"), "w", newline="") as fh:
                writer = csv.writer(fh)
                writer.writerow(["task_index", "score"])
                for i, s in enumerate(evaluation.scores):
                    writer.writerow([i, _fmt(s)])
        mean_s, std_s = time_stats(records, cfg.warmup_iters)
        summary = {
            "config": cfg.to_dict(),
            "backend": kernels.BACKEND,
            "metric": "accuracy" if classification else "mse",
            "test_score": evaluation.mean if evaluation else None,
            "test_ci95": evaluation.ci95 if evaluation else None,
            "test_tasks": len(evaluation.scores) if evaluation else 0,
            "time_mean_s": mean_s,
            "time_std_s": std_s,
            "train_loss_final": records[-1].query_loss if records else None,
        }
        with open(os.path.join(cfg.out_dir, "summary.json"), "w") as fh:
            json.dump(summary, fh, indent=2)

    return TrainResult(params, records, evaluation)


def interleaved_method_times(
    cfg: ExperimentConfig,
    methods: dict[str, float],
    iters: int = 400,
    warmup: int | None = None,
    max_attempts: int = 5,
    cv_bound: float = 0.5,
) -> dict[str, tuple[float, float]]:
    """Per-iteration time (mean, std) for several methods measured in strict
    iteration-level interleaving, so that machine-load drift hits every
    method equally.

    ``methods`` maps method name to its inner learning rate. Method timing
    comparisons need a quiet machine; a measurement block whose per-method
    coefficient of variation exceeds ``cv_bound`` is treated as corrupted
    by external load and retried (up to ``max_attempts``; the last block is
    returned regardless, so a persistently noisy host shows up as such
    rather than being hidden).
    """
    warmup = cfg.warmup_iters if warmup is None else warmup
    dist = cfg.distribution()
    stats: dict[str, tuple[float, float]] = {}
    for _ in range(max_attempts):
        setups = {}
        for method, beta in methods.items():
            run_cfg = replace(cfg, method=method, beta=beta, test_tasks=0)
            setups[method] = (run_cfg.problem(), run_cfg.meta_config())
        params = {m: init_params(cfg.mlp_spec(), cfg.seed) for m in methods}
        records: dict[str, list[RunRecord]] = {m: [] for m in methods}
        for k in range(iters):
            episode = sample_episode(dist, cfg.meta_batch, StreamKey(cfg.seed, DOMAIN_TRAIN, k))
            for method, (problem, mcfg) in setups.items():
                params[method], rec = meta_step(problem, params[method], episode, mcfg, iteration=k)
                records[method].append(rec)
        stats = {m: time_stats(records[m], warmup) for m in methods}
        if all(std <= cv_bound * mean for mean, std in stats.values() if mean > 0):
            break
    return stats


@dataclass
class GridSearchResult:
    best_beta: float
    rows: list[tuple[float, float]]  # (beta, validation score) in evaluation order
    extensions: int
    warning: bool


def grid_search_beta(cfg: ExperimentConfig, candidates: list[float]) -> GridSearchResult:
    """Train+validate at each candidate rate; extend the grid past an
    endpoint optimum by the terminal spacing, at most five times.

    Scores are validation accuracy (classification) or negated validation
    MSE (regression), so bigger is always better.
    """
    candidates = [float(b) for b in candidates]
    if len(candidates) < 2:
        raise ValueError("grid search needs at least two candidate rates")
    if sorted(candidates) != candidates:
        raise ValueError("candidate rates must be sorted ascending")

    classification = cfg.loss_kind() is LossKind.CROSS_ENTROPY
    scores: dict[float, float] = {}
    rows: list[tuple[float, float]] = []

    def score(beta: float) -> float:
        if beta not in scores:
            run_cfg = replace(cfg, beta=beta, test_tasks=0)
            result = train(run_cfg, write=False)
            val = evaluate(result.params, run_cfg, domain=DOMAIN_VAL, n_tasks=cfg.val_tasks)
            scores[beta] = val.mean if classification else -val.mean
            rows.append((beta, scores[beta]))
        return scores[beta]

    grid = list(candidates)
    extensions = 0
    warning = False
    while True:
        values = [score(b) for b in grid]
        best = int(np.argmax(values))
        if 0 < best < len(grid) - 1:
            break
        if extensions >= 5:
            warning = True
            break
        extensions += 1
        if best == 0:
            spacing = grid[1] - grid[0]
            new = grid[0] - spacing
            if new <= 0:
                new = grid[0] / 2.0
            grid.insert(0, new)
        else:
            spacing = grid[-1] - grid[-2]
            grid.append(grid[-1] + spacing)

    best_beta = max(scores, key=scores.get)
    return GridSearchResult(best_beta, rows, extensions, warning)


SWEEP_AXES = ("way", "shot", "steps")


def sweep(cfg: ExperimentConfig, axis: str, values: list, write: bool = True) -> list[dict]:
    """Full train+evaluate per (value, method) cell.

    The ``steps`` axis sets both training and test-time fine-tuning step
    counts. Each row carries the results.csv columns plus the axis value;
    rows of the sign-maml method additionally carry the accuracy delta
    against fo-maml at the same value. Failed cells are recorded with an
    error note and the sweep continues.
    """
    if axis not in SWEEP_AXES:
        raise ValueError(f"axis must be one of {SWEEP_AXES}, got {axis!r}")
    if not values:
        raise ValueError("sweep needs at least one value")

    rows = []
    for value in values:
        per_method: dict[str, dict] = {}
        for method in cfg.sweep_methods:
            changes = {"method": method, "beta": float(cfg.method_betas.get(method, cfg.beta))}
            if axis == "way":
                changes["n_way"] = int(value)
            elif axis == "shot":
                changes["k_shot"] = int(value)
            else:
                changes["m_train"] = int(value)
                changes["m_test"] = int(value)
            cell_cfg = replace(cfg, **changes)
            row = {"axis": axis, "value": value}
            try:
                result = train(cell_cfg, write=False)
                row.update(_results_row(cell_cfg, result.records, result.evaluation))
            except Exception as err:  # cell failure: record and continue
                row.update({"method": method, "error": str(err)})
            per_method[method] = row
            rows.append(row)
        sign_row = per_method.get("sign-maml")
        fo_row = per_method.get("fo-maml")
        if sign_row and fo_row and sign_row.get("accuracy") and fo_row.get("accuracy"):
            delta = float(sign_row["accuracy"]) - float(fo_row["accuracy"])
            sign_row["delta_vs_fomaml"] = _fmt(delta)

    if write:
        os.makedirs(cfg.out_dir, exist_ok=True)
        path = os.path.join(cfg.out_dir, "sweep.csv")
        columns = ["axis", "value"] + RESULTS_COLUMNS + ["delta_vs_fomaml", "error"]
        with open(path, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=columns, extrasaction="ignore")
            writer.writeheader()
            for row in rows:
                writer.writerow({k: row.get(k, "") for k in columns})
    return rows
