"""Per-task training loop with Adam, early stopping and baseline modes.

Modes:
    lwp       composite loss with distillation and the masked preservation
              term (mask optional via config)
    lwf       distillation only (lambda_d forced to 0)
    naive_ft  plain sequential fine-tuning (lambda_o = lambda_d = 0)
    stl       one independent model per task

Each task first freezes the previous model as a teacher (where the mode
needs one) and adds a new head; every mini-batch then combines the current
task loss, the teacher-matching loss of all old heads, and the preservation
loss between student and teacher representations of the same inputs.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import losses as lo
from .autodiff import Node, NonFiniteError, backward, new_rng
from .metrics import accuracy, ece, gram_deviation
from .model import ModelState, TeacherSnapshot, save_checkpoint
from .tasks import TaskSplit, TaskStream

MODES = ("lwp", "lwf", "naive_ft", "stl")

GRAM_PROBE_ROWS = 256

_KEY_MODEL = 21
_KEY_HEAD = 22
_KEY_SHUFFLE = 23


@dataclass
class TrainConfig:
    """Hyperparameters of one training run."""

    epochs: int = 20
    batch_size: int = 64
    lr: float = 1e-3
    weights: lo.LossWeights = field(default_factory=lo.LossWeights)
    variant: lo.DistanceVariant = field(default_factory=lo.DistanceVariant)
    mask: bool = True
    temperature: float = 1.0
    patience: int = 5
    seed: int = 0
    mode: str = "lwp"
    distill: str = "soft"
    hidden: tuple = (64, 64)
    latent: int = 16
    activation: str = "tanh"

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.distill not in ("soft", "hard"):
            raise ValueError(f"distill must be 'soft' or 'hard', got {self.distill!r}")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.temperature <= 0:
            raise ValueError("temperature must be > 0")
        if self.patience < 1:
            raise ValueError("patience must be >= 1")
        if self.lr <= 0:
            raise ValueError("lr must be > 0")
        preservation = self.mode == "lwp" and self.weights.lambda_d > 0
        if self.batch_size < (2 if preservation else 1):
            raise ValueError("batch_size must be >= 2 when preservation is active")


@dataclass
class RunRecord:
    """Per-task training trace."""

    task: int
    train_losses: list = field(default_factory=list)
    val_losses: list = field(default_factory=list)
    best_epoch: int = 0
    early_stopped: bool = False
    wall_clock: float = 0.0


@dataclass
class ExperimentResult:
    """Outcome of a full task sequence for one (mode, seed)."""

    mode: str
    seed: int
    accuracy_matrix: list
    records: list
    ece_per_task: list
    gram_deviation_trace: list
    final_average_accuracy: float
    bwt: float | None


class Adam:
    """Adam over a fixed parameter list; moments mirror parameter shapes."""

    def __init__(self, params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        if lr <= 0:
            raise ValueError("lr must be > 0")
        self.params = list(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.value) for p in self.params]
        self.v = [np.zeros_like(p.value) for p in self.params]

    def zero_grad(self):
        for p in self.params:
            p.grad.fill(0.0)

    def step(self):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        for i, p in enumerate(self.params):
            g = p.grad
            if not np.isfinite(g).all():
                raise NonFiniteError("Adam: non-finite gradient")
            self.m[i] = b1 * self.m[i] + (1.0 - b1) * g
            self.v[i] = b2 * self.v[i] + (1.0 - b2) * (g * g)
            m_hat = self.m[i] / (1.0 - b1**self.t)
            v_hat = self.v[i] / (1.0 - b2**self.t)
            new_value = p.value - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)
            if not np.isfinite(new_value).all():
                raise NonFiniteError("Adam: non-finite parameter update")
            p.value = new_value


def effective_weights(w: lo.LossWeights, mode: str) -> lo.LossWeights:
    """Mode-specific composite weights (lwf drops the preservation term,
    naive_ft and stl drop both auxiliary terms)."""
    if mode == "lwp":
        return w
    if mode == "lwf":
        return lo.LossWeights(w.lambda_c, w.lambda_o, 0.0)
    return lo.LossWeights(w.lambda_c, 0.0, 0.0)


def early_stop(val_losses, patience: int) -> bool:
    """True when the best value has not improved for `patience` epochs."""
    if patience < 1:
        raise ValueError("patience must be >= 1")
    if not val_losses:
        return False
    best = int(np.argmin(val_losses))
    return (len(val_losses) - 1 - best) >= patience


def _compose_loss(m, teacher, x, y, task, cfg, eff):
    """Build the composite loss graph for one batch; returns the total node."""
    z = m.encode(x)
    logits = m.head_logits(z, task)
    l_cur = lo.current_task_loss(logits, lo.onehot(y, m.heads[task].classes))
    l_old = Node(np.zeros((1, 1)), op="const")
    l_dwdp = Node(np.zeros((1, 1)), op="const")
    if teacher is not None and task > 0:
        z_teacher = teacher.encode_values(x)
        if eff.lambda_o > 0:
            student_logits = [m.head_logits(z, o) for o in range(task)]
            teacher_logits = [teacher.head_values(z_teacher, o) for o in range(task)]
            l_old = lo.old_task_loss(
                student_logits, teacher_logits, cfg.temperature, hard=cfg.distill == "hard"
            )
        if eff.lambda_d > 0:
            mask = lo.dwdp_mask(y) if cfg.mask else np.ones((x.shape[0], x.shape[0]))
            l_dwdp = lo.dwdp_loss(z, z_teacher, mask, cfg.variant)
    return lo.lwp_total(l_cur, l_old, l_dwdp, eff)


def _snapshot_values(params):
    return [p.value.copy() for p in params]


def _restore_values(params, values):
    for p, v in zip(params, values):
        p.value = v.copy()


def train_task(
    m: ModelState,
    teacher: TeacherSnapshot | None,
    task_data: TaskSplit,
    cfg: TrainConfig,
    task_index: int,
) -> RunRecord:
    """Train `m` on one task; returns the loss trace.

    The teacher must be present for modes lwp/lwf on any task after the
    first. Validation uses the composite loss on the full val split; the
    model always rolls back to the best-validation-epoch weights.
    Trailing mini-batches with fewer than 2 samples are dropped.
    """
    eff = effective_weights(cfg.weights, cfg.mode)
    needs_teacher = cfg.mode in ("lwp", "lwf") and task_index > 0
    if needs_teacher and teacher is None:
        raise ValueError(f"mode {cfg.mode} requires a teacher for task {task_index}")
    if task_data.x_train.shape[0] == 0:
        raise ValueError("train split is empty")
    start = time.perf_counter()
    record = RunRecord(task=task_index)
    params = m.parameters()
    opt = Adam(params, lr=cfg.lr)
    shuffle_rng = new_rng(cfg.seed, _KEY_SHUFFLE, task_index)
    n = task_data.x_train.shape[0]
    best_val = np.inf
    best_params = _snapshot_values(params)
    for epoch in range(cfg.epochs):
        perm = shuffle_rng.permutation(n)
        batch_losses = []
        for lo_idx in range(0, n, cfg.batch_size):
            sel = perm[lo_idx : lo_idx + cfg.batch_size]
            if sel.size < 2:
                continue
            xb = task_data.x_train[sel]
            yb = task_data.y_train[sel]
            total = _compose_loss(m, teacher, xb, yb, task_index, cfg, eff)
            opt.zero_grad()
            backward(total)
            opt.step()
            batch_losses.append(total.value[0, 0])
        record.train_losses.append(float(np.mean(batch_losses)))
        val_total = _compose_loss(
            m, teacher, task_data.x_val, task_data.y_val, task_index, cfg, eff
        )
        val_loss = float(val_total.value[0, 0])
        record.val_losses.append(val_loss)
        if val_loss < best_val:
            best_val = val_loss
            record.best_epoch = epoch
            best_params = _snapshot_values(params)
        if early_stop(record.val_losses, cfg.patience):
            record.early_stopped = True
            break
    _restore_values(params, best_params)
    record.wall_clock = time.perf_counter() - start
    return record


def run_sequence(stream: TaskStream, cfg: TrainConfig, checkpoint_dir=None) -> ExperimentResult:
    """Run the full task sequence and fill the accuracy matrix.

    Before each task after the first, the previous model is frozen (teacher
    for lwp/lwf, drift reference for every mode) and a new head is added.
    After each task every seen task is re-evaluated on its test split.
    """
    if len(stream) < 1:
        raise ValueError("stream has no tasks")
    stl = cfg.mode == "stl"
    models: list[ModelState] = []
    matrix = []
    records = []
    gram_trace = []
    m = None
    for t, task in enumerate(stream.tasks):
        if stl or t == 0:
            m = ModelState(
                stream.input_dim,
                cfg.hidden,
                cfg.latent,
                cfg.activation,
                new_rng(cfg.seed, _KEY_MODEL, t if stl else 0),
            )
            m.add_head(task.classes, new_rng(cfg.seed, _KEY_HEAD, t))
            ref = m.snapshot() if t > 0 else None
            teacher = None
        else:
            ref = m.snapshot()
            teacher = ref if cfg.mode in ("lwp", "lwf") else None
            m.add_head(task.classes, new_rng(cfg.seed, _KEY_HEAD, t))
        records.append(train_task(m, teacher, task, cfg, 0 if stl else t))
        if stl:
            models.append(m)
        if t > 0:
            probe = task.x_test[:GRAM_PROBE_ROWS]
            gram_trace.append(
                gram_deviation(m.encode_values(probe), ref.encode_values(probe), cfg.variant)
            )
        row = []
        for i in range(t + 1):
            prev = stream.tasks[i]
            if stl:
                logits = models[i].predict_values(prev.x_test, 0)
            else:
                logits = m.predict_values(prev.x_test, i)
            row.append(accuracy(logits, prev.y_test))
        matrix.append(row)
        if checkpoint_dir is not None:
            save_checkpoint(m, f"{checkpoint_dir}/checkpoint_task{t}.json")
    ece_per_task = []
    for i, task in enumerate(stream.tasks):
        if stl:
            logits = models[i].predict_values(task.x_test, 0)
        else:
            logits = m.predict_values(task.x_test, i)
        ece_per_task.append(ece(logits, task.y_test, bins=10))
    final_avg = float(np.mean(matrix[-1]))
    bwt = None
    if len(stream) >= 2:
        from .metrics import backward_transfer

        bwt = backward_transfer(matrix)
    return ExperimentResult(
        mode=cfg.mode,
        seed=cfg.seed,
        accuracy_matrix=matrix,
        records=records,
        ece_per_task=ece_per_task,
        gram_deviation_trace=gram_trace,
        final_average_accuracy=final_avg,
        bwt=bwt,
    )
