"""Task streams: synthetic generators and CSV ingestion.

All tasks in a stream share one input space; each task contributes only its
own label column. Generators are pure functions of their seed (PCG64, see
`autodiff.new_rng`), and train/val/test splits partition the sample indices
so they are disjoint by construction.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .autodiff import new_rng

SPLIT_FRACTIONS = (0.70, 0.15, 0.15)

# sub-stream keys for SeedSequence spawning
_KEY_INPUTS = 11
_KEY_LABELS = 12
_KEY_SPLIT = 13
_KEY_NOISE = 14
_KEY_SHIFT = 15


@dataclass
class TaskSplit:
    """One task's data: disjoint train/val/test with integer class labels."""

    name: str
    classes: int
    x_train: np.ndarray
    y_train: np.ndarray
    x_val: np.ndarray
    y_val: np.ndarray
    x_test: np.ndarray
    y_test: np.ndarray

    def __post_init__(self):
        for split, x, y in (
            ("train", self.x_train, self.y_train),
            ("val", self.x_val, self.y_val),
            ("test", self.x_test, self.y_test),
        ):
            if x.shape[0] != y.shape[0]:
                raise ValueError(f"{self.name}/{split}: feature/label row mismatch")
            if y.size and (y < 0).any() or y.size and (y >= self.classes).any():
                raise ValueError(f"{self.name}/{split}: label outside [0, {self.classes})")


@dataclass
class TaskStream:
    """Ordered tasks over one shared input dimension."""

    tasks: list[TaskSplit]
    input_dim: int
    stationary: bool = True

    def __post_init__(self):
        for t in self.tasks:
            for x in (t.x_train, t.x_val, t.x_test):
                if x.shape[1] != self.input_dim:
                    raise ValueError(f"task {t.name}: input dim {x.shape[1]} != {self.input_dim}")

    def __len__(self):
        return len(self.tasks)


def split_indices(n: int, seed: int, fractions=SPLIT_FRACTIONS):
    """Seeded permutation of range(n) partitioned into train/val/test.

    Every split gets at least one sample when n >= 3.
    """
    rng = new_rng(seed, _KEY_SPLIT)
    perm = rng.permutation(n)
    n_train = int(math.floor(fractions[0] * n))
    n_val = int(math.floor(fractions[1] * n))
    if n >= 3:
        n_train = max(n_train, 1)
        n_val = max(n_val, 1)
        while n_train + n_val >= n:
            n_train -= 1
    return perm[:n_train], perm[n_train : n_train + n_val], perm[n_train + n_val :]


def _make_split(name, classes, x, y, idx):
    tr, va, te = idx
    y = y.reshape(-1, 1).astype(np.float64)
    return TaskSplit(
        name,
        classes,
        x[tr].copy(),
        y[tr].copy(),
        x[va].copy(),
        y[va].copy(),
        x[te].copy(),
        y[te].copy(),
    )


def gen_toy_xor_circles(n: int, noise: float, seed: int, circles_first: bool = True) -> TaskStream:
    """Two binary tasks over one batch of 2-D points.

    Points are uniform on [-1, 1]^2. The xor task labels quadrant-sign
    disagreement (label 1 when the coordinate signs differ); the circles
    task labels points outside radius sqrt(2/pi), which splits the square
    50/50. Labels come from the clean coordinates; Gaussian `noise` is then
    added to the shared inputs. Default task order is circles then xor.

    Args:
        n: number of points (>= 8).
        noise: stddev of input jitter, >= 0.
        seed: stream seed.
        circles_first: task order flag.
    """
    if n < 8:
        raise ValueError("toy stream needs n >= 8")
    if noise < 0:
        raise ValueError("noise must be >= 0")
    rng = new_rng(seed, _KEY_INPUTS)
    x_clean = rng.uniform(-1.0, 1.0, size=(n, 2))
    y_xor = ((x_clean[:, 0] >= 0) != (x_clean[:, 1] >= 0)).astype(np.int64)
    radius_sq = 2.0 / math.pi
    y_circ = (np.sum(x_clean * x_clean, axis=1) > radius_sq).astype(np.int64)
    x = x_clean + new_rng(seed, _KEY_NOISE).normal(0.0, noise, size=(n, 2)) if noise > 0 else x_clean
    idx = split_indices(n, seed)
    circles = _make_split("circles", 2, x, y_circ, idx)
    xor = _make_split("xor", 2, x, y_xor, idx)
    tasks = [circles, xor] if circles_first else [xor, circles]
    return TaskStream(tasks, 2, stationary=True)


def _mixture_inputs(n: int, dim: int, seed: int, components: int = 4) -> np.ndarray:
    rng = new_rng(seed, _KEY_INPUTS)
    means = rng.normal(0.0, 1.5, size=(components, dim))
    scales = rng.uniform(0.6, 1.4, size=(components, dim))
    comp = rng.integers(0, components, size=n)
    return means[comp] + rng.normal(0.0, 1.0, size=(n, dim)) * scales[comp]


def _hyperplane_labels(x: np.ndarray, task: int, n_tasks: int, seed: int) -> np.ndarray:
    """Sign of a random hyperplane over task-specific coordinates.

    Task t owns coordinates {t, t+T, t+2T, ...}, so label functions of
    different tasks use disjoint subspaces. The threshold is the median of
    the projection, which balances the classes.
    """
    dim = x.shape[1]
    rng = new_rng(seed, _KEY_LABELS, task)
    w = np.zeros(dim)
    coords = np.arange(task, dim, n_tasks)
    w[coords] = rng.normal(0.0, 1.0, size=coords.size)
    proj = x @ w
    return (proj > np.median(proj)).astype(np.int64)


def gen_attribute_stream(n: int, dim: int, n_tasks: int, seed: int, components: int = 4) -> TaskStream:
    """Stationary stream: shared Gaussian-mixture inputs, per-task labels.

    All tasks see the same input matrix and the same split partition; each
    task's binary label is the sign of a seeded random hyperplane over a
    task-specific coordinate subspace, revealed one task at a time.
    """
    if n_tasks < 2:
        raise ValueError("attribute stream needs >= 2 tasks")
    if dim < n_tasks:
        raise ValueError(f"need dim >= n_tasks, got dim={dim} tasks={n_tasks}")
    x = _mixture_inputs(n, dim, seed, components)
    idx = split_indices(n, seed)
    tasks = []
    for t in range(n_tasks):
        y = _hyperplane_labels(x, t, n_tasks, seed)
        tasks.append(_make_split(f"attr{t}", 2, x, y, idx))
    return TaskStream(tasks, dim, stationary=True)


def gen_shift_stream(
    n: int,
    dim: int,
    n_tasks: int,
    seed: int,
    shift_scale: float,
    components: int = 4,
) -> TaskStream:
    """Non-stationary stream: each task's inputs drift from the base mixture.

    Task t translates a seeded half of the coordinates by t * shift_scale
    and widens the input spread around the sample mean by a factor
    (1 + 0.1 * t * shift_scale). Task 0 and the shift_scale == 0 case reuse
    the base inputs unchanged, so a zero shift reproduces the stationary
    stream exactly. Labels are re-thresholded per task, which keeps them
    balanced and linearly separable under shift.
    """
    if shift_scale < 0:
        raise ValueError("shift_scale must be >= 0")
    if n_tasks < 2:
        raise ValueError("shift stream needs >= 2 tasks")
    if dim < n_tasks:
        raise ValueError(f"need dim >= n_tasks, got dim={dim} tasks={n_tasks}")
    x_base = _mixture_inputs(n, dim, seed, components)
    idx = split_indices(n, seed)
    shift_rng = new_rng(seed, _KEY_SHIFT)
    shifted_coords = shift_rng.permutation(dim)[: max(1, dim // 2)]
    direction = np.zeros(dim)
    direction[shifted_coords] = 1.0
    col_means = x_base.mean(axis=0)
    tasks = []
    for t in range(n_tasks):
        if t == 0 or shift_scale == 0.0:
            x_t = x_base
        else:
            widen = 1.0 + 0.1 * t * shift_scale
            x_t = (x_base - col_means) * widen + col_means + (t * shift_scale) * direction
        y = _hyperplane_labels(x_t, t, n_tasks, seed)
        tasks.append(_make_split(f"shift{t}", 2, x_t, y, idx))
    return TaskStream(tasks, dim, stationary=shift_scale == 0.0)


def _read_csv(path, features, label, classes):
    xs, ys = [], []
    with open(path, "r", encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ValueError(f"{path}: empty file") from None
        missing = [c for c in [*features, label] if c not in header]
        if missing:
            raise ValueError(f"{path}: missing columns {missing}")
        fcols = [header.index(c) for c in features]
        lcol = header.index(label)
        for i, row in enumerate(reader, start=2):
            if len(row) != len(header):
                raise ValueError(f"{path}: line {i}: expected {len(header)} fields, got {len(row)}")
            try:
                xs.append([float(row[c]) for c in fcols])
            except ValueError:
                raise ValueError(f"{path}: line {i}: non-numeric feature") from None
            try:
                lab = int(float(row[lcol]))
            except ValueError:
                raise ValueError(f"{path}: line {i}: non-numeric label {row[lcol]!r}") from None
            if not 0 <= lab < classes:
                raise ValueError(f"{path}: line {i}: label {lab} outside [0, {classes})")
            ys.append(lab)
    return np.array(xs, dtype=np.float64), np.array(ys, dtype=np.int64)


def load_csv_stream(paths, schema, seed: int | None = None) -> TaskStream:
    """Build a stream from CSV files, one task per file.

    Files share the feature columns named in the schema; each supplies one
    task's label column. Features of every task are z-scored with the first
    task's train statistics (stddev floored at 1e-12 for constant columns).
    With seed None the split follows file order; otherwise rows are
    partitioned by a seeded permutation.

    Args:
        paths: CSV file paths, task order.
        schema: dict or JSON path with {"features": [...], "label": name,
            "classes": k}.
        seed: optional split seed.
    """
    if isinstance(schema, (str, Path)):
        with open(schema, "r", encoding="utf-8") as fh:
            schema = json.load(fh)
    features = list(schema["features"])
    label = schema["label"]
    classes = int(schema["classes"])
    if classes < 2:
        raise ValueError("schema: classes must be >= 2")
    if not paths:
        raise ValueError("no CSV paths given")

    tasks = []
    stats = None
    for path in paths:
        x, y = _read_csv(path, features, label, classes)
        n = x.shape[0]
        if seed is None:
            n_train = max(int(math.floor(SPLIT_FRACTIONS[0] * n)), 1)
            n_val = max(int(math.floor(SPLIT_FRACTIONS[1] * n)), 1)
            while n_train + n_val >= n and n_train > 1:
                n_train -= 1
            order = np.arange(n)
            idx = (order[:n_train], order[n_train : n_train + n_val], order[n_train + n_val :])
        else:
            idx = split_indices(n, seed)
        split = _make_split(Path(path).stem, classes, x, y, idx)
        for part in ("x_train", "x_val", "x_test"):
            if getattr(split, part).shape[0] == 0:
                raise ValueError(f"{path}: empty {part[2:]} split")
        if stats is None:
            mean = split.x_train.mean(axis=0)
            sd = np.maximum(split.x_train.std(axis=0), 1e-12)
            stats = (mean, sd)
        for part in ("x_train", "x_val", "x_test"):
            setattr(split, part, (getattr(split, part) - stats[0]) / stats[1])
        tasks.append(split)
    return TaskStream(tasks, len(features), stationary=True)


def save_stream_csv(stream: TaskStream, out_dir) -> list[Path]:
    """Dump a stream for inspection: one CSV per task plus a schema file.

    Rows are the concatenated train/val/test splits with a `split` column.
    Returns the written paths.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    dim = stream.input_dim
    features = [f"f{j}" for j in range(dim)]
    written = []
    for t, task in enumerate(stream.tasks):
        path = out / f"task{t}_{task.name}.csv"
        with open(path, "w", encoding="utf-8", newline="") as fh:
            fh.write(",".join([*features, "label", "split"]) + "\n")
            for split_name, x, y in (
                ("train", task.x_train, task.y_train),
                ("val", task.x_val, task.y_val),
                ("test", task.x_test, task.y_test),
            ):
                for row, lab in zip(x, y):
                    vals = ",".join(repr(float(v)) for v in row)
                    fh.write(f"{vals},{int(lab[0])},{split_name}\n")
        written.append(path)
    schema_path = out / "schema.json"
    with open(schema_path, "w", encoding="utf-8") as fh:
        json.dump(
            {"features": features, "label": "label", "classes": stream.tasks[0].classes},
            fh,
            indent=2,
            sort_keys=True,
        )
        fh.write("\n")
    written.append(schema_path)
    return written
