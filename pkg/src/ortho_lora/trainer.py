"""The training loop: per-task gradients, surgery, merge, AdamW update.

Four modes:

* SINGLE_TASK      - one independent model per task, each trained on its own
                     task only (the per-task upper bound; T times the params)
* JOINT            - one shared model updated with the gradient of the summed
                     loss, computed in a single fused backward pass
* ORTHO_FLAT       - per-task gradients, conditional projection over each
                     task's flattened adapter vector, merge, update
* ORTHO_STRUCTURED - same, but projecting each adapter matrix independently

Head gradients bypass projection in every mode. All modes draw identical
batch sequences for a given seed: data order, task generation, model init
and the surgery shuffle each consume their own named substream.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from statistics import fmean

from .config import (
    JOINT,
    ORTHO_FLAT,
    ORTHO_STRUCTURED,
    SINGLE_TASK,
    VALID_MODES,
    ExperimentConfig,
)
from .dense import Rng
from .errors import ParameterError
from .model import (
    MultiTaskModel,
    TaskBatch,
    build_model,
    eval_metric,
    joint_gradient,
    task_loss_and_gradient,
)
from .optim import AdamWState, adamw_step, linear_decay_lr
from .surgery import FLAT, ConflictReport, SurgeryStats, build_conflict_report, merge, surgery
from .tasks import SyntheticTaskSet, make_conflict_set, subset_batch

# Substream indices off the master seed; fixed so that consuming one stream
# (e.g. the surgery shuffle) can never perturb another (e.g. batch order).
STREAM_INIT = 0
STREAM_TASKS = 1
STREAM_DATA = 2
STREAM_SURGERY = 3

AVG_TASK = "avg"


@dataclass
class StepRecord:
    step: int
    task: int
    loss: float
    lr: float


@dataclass
class EvalRecord:
    epoch: int
    mode: str
    task: str  # task index as a string, or "avg"
    metric: float


@dataclass
class MetricsLog:
    mode: str
    steps: list[StepRecord] = field(default_factory=list)
    conflicts: list[ConflictReport] = field(default_factory=list)
    evals: list[EvalRecord] = field(default_factory=list)

    def final_metrics(self) -> dict[str, float]:
        """Metric per task label from the last recorded epoch."""
        if not self.evals:
            raise ParameterError(f"log for mode {self.mode} has no eval records")
        last = max(r.epoch for r in self.evals)
        return {r.task: r.metric for r in self.evals if r.epoch == last}


def count_backward_passes(mode: str, num_tasks: int) -> int:
    """Backward sweeps through the shared stack that one train step costs.

    JOINT fuses all tasks into one backward; the per-task modes need one per
    task. Diagnostic conflict recording during JOINT adds num_tasks more, but
    that is off the algorithm's critical path and excluded here.
    """
    if mode == JOINT:
        return 1
    if mode in (ORTHO_FLAT, ORTHO_STRUCTURED, SINGLE_TASK):
        return num_tasks
    raise ParameterError(f"unknown mode {mode!r}; expected one of {VALID_MODES}")


def resolve_scope(mode: str, structured_scope: str) -> str:
    """Projection scope for a mode; non-ORTHO modes use it for diagnostics only."""
    if mode == ORTHO_FLAT:
        return FLAT
    return structured_scope


def train_step(
    mode: str,
    models: list[MultiTaskModel],
    batches: list[TaskBatch],
    opt_states: list[AdamWState],
    step: int,
    lr: float,
    surgery_rng: Rng,
    scope: str,
    project_against: str = "original",
    record_conflicts: bool = True,
    stats: SurgeryStats | None = None,
) -> tuple[list[StepRecord], ConflictReport | None]:
    """One optimization step; returns per-task loss records and the conflict
    report (ORTHO always, JOINT only when diagnostics are on)."""
    num_tasks = models[0].num_tasks
    expected = num_tasks if mode == SINGLE_TASK else 1
    if len(models) != expected or len(opt_states) != expected:
        raise ParameterError(
            f"mode {mode} needs {expected} model(s)/state(s), got {len(models)}/{len(opt_states)}"
        )
    ordered = sorted(batches, key=lambda b: b.task_id)

    report: ConflictReport | None = None
    if mode == JOINT:
        model = models[0]
        merged, losses = joint_gradient(model, ordered)
        if record_conflicts:
            diag = [task_loss_and_gradient(model, b)[1] for b in ordered]
            report = build_conflict_report(step, diag, scope)
        _apply(model, merged, opt_states[0], lr)
    elif mode in (ORTHO_FLAT, ORTHO_STRUCTURED):
        model = models[0]
        losses = []
        grads = []
        for b in ordered:
            loss, g = task_loss_and_gradient(model, b)
            losses.append(loss)
            grads.append(g)
        report = build_conflict_report(step, grads, scope)
        projected = surgery(grads, scope, surgery_rng, project_against, stats=stats)
        _apply(model, merge(projected), opt_states[0], lr)
    elif mode == SINGLE_TASK:
        losses = []
        for b in ordered:
            loss, g = task_loss_and_gradient(models[b.task_id], b)
            losses.append(loss)
            _apply(models[b.task_id], g.blocks, opt_states[b.task_id], lr)
    else:
        raise ParameterError(f"unknown mode {mode!r}; expected one of {VALID_MODES}")

    records = [
        StepRecord(step=step, task=b.task_id, loss=loss, lr=lr)
        for b, loss in zip(ordered, losses)
    ]
    return records, report


def _apply(model: MultiTaskModel, update, opt_state: AdamWState, lr: float) -> None:
    adamw_step(model.trainable_blocks(), update, opt_state, lr)


@dataclass
class ExperimentResult:
    config: ExperimentConfig
    task_set: SyntheticTaskSet
    logs: dict[str, MetricsLog]
    models: dict[str, list[MultiTaskModel]]

    def final_average(self, mode: str) -> float:
        return self.logs[mode].final_metrics()[AVG_TASK]


def build_task_set(config: ExperimentConfig) -> SyntheticTaskSet:
    t = config.tasks
    return make_conflict_set(
        kinds=t.kinds,
        in_dim=t.in_dim,
        out_dim=t.out_dim,
        conflict_level=t.conflict_level,
        noise_sigma=t.noise_sigma,
        n_train=t.n_train,
        n_eval=t.n_eval,
        rng=Rng(config.seed).child(STREAM_TASKS),
        shared_scale=t.shared_scale,
    )


def run_mode(config: ExperimentConfig, mode: str,
             task_set: SyntheticTaskSet | None = None) -> tuple[MetricsLog, list[MultiTaskModel]]:
    """Train one mode from config; deterministic in (config, mode)."""
    if mode not in VALID_MODES:
        raise ParameterError(f"unknown mode {mode!r}; expected one of {VALID_MODES}")
    master = Rng(config.seed)
    if task_set is None:
        task_set = build_task_set(config)
    num_tasks = task_set.num_tasks

    base = build_model(
        config.model.layer_dims,
        config.model.rank,
        config.model.alpha,
        config.model.sigma_init,
        task_set.specs,
        master.child(STREAM_INIT),
    )
    models = [base.copy() for _ in range(num_tasks)] if mode == SINGLE_TASK else [base]
    opt_states = [AdamWState(hyper=config.optimizer) for _ in models]
    data_rng = master.child(STREAM_DATA)
    surgery_rng = master.child(STREAM_SURGERY)
    scope = resolve_scope(mode, config.surgery.scope)

    log = MetricsLog(mode=mode)

    def evaluate(epoch: int) -> None:
        metrics = []
        for t in range(num_tasks):
            model = models[t] if mode == SINGLE_TASK else models[0]
            metric = eval_metric(model, task_set.eval[t])
            metrics.append(metric)
            log.evals.append(EvalRecord(epoch=epoch, mode=mode, task=str(t), metric=metric))
        log.evals.append(EvalRecord(epoch=epoch, mode=mode, task=AVG_TASK, metric=fmean(metrics)))

    evaluate(0)
    spe = config.steps_per_epoch()
    total_steps = config.total_steps()
    batch_size = config.schedule.batch_size
    n_train = config.tasks.n_train
    step = 0
    for epoch in range(1, config.schedule.epochs + 1):
        orders = [data_rng.permutation(n_train) for _ in range(num_tasks)]
        cursors = [0] * num_tasks
        for _ in range(spe):
            batches = []
            for t in range(num_tasks):
                if cursors[t] + batch_size > n_train:
                    orders[t] = data_rng.permutation(n_train)
                    cursors[t] = 0
                idx = orders[t][cursors[t] : cursors[t] + batch_size]
                cursors[t] += batch_size
                batches.append(subset_batch(task_set.train[t], idx))
            lr = linear_decay_lr(step, total_steps, config.optimizer.lr_base)
            records, report = train_step(
                mode, models, batches, opt_states, step, lr, surgery_rng, scope,
                project_against=config.surgery.project_against,
                record_conflicts=config.surgery.record_conflicts,
            )
            log.steps.extend(records)
            if report is not None:
                log.conflicts.append(report)
            step += 1
        evaluate(epoch)
    return log, models


def run_experiment(config: ExperimentConfig) -> ExperimentResult:
    """Run every configured mode on the same task set, model init and batches."""
    task_set = build_task_set(config)
    logs: dict[str, MetricsLog] = {}
    models: dict[str, list[MultiTaskModel]] = {}
    for mode in config.modes:
        log, mode_models = run_mode(config, mode, task_set=task_set)
        logs[mode] = log
        models[mode] = mode_models
    return ExperimentResult(config=config, task_set=task_set, logs=logs, models=models)


def measure_surgery_floats(model: MultiTaskModel, batches: list[TaskBatch],
                           scope: str, seed: int = 0) -> int:
    """Instrumented float count for one surgery pass on this model's gradients."""
    grads = [task_loss_and_gradient(model, b)[1] for b in sorted(batches, key=lambda b: b.task_id)]
    stats = SurgeryStats()
    surgery(grads, scope, Rng(seed), stats=stats)
    return stats.floats_touched
