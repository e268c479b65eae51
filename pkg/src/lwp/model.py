"""Shared MLP encoder with per-task linear heads and frozen teacher snapshots.

The predictor is head_t(encode(x)): hidden layers use the configured
activation, the final projection to the latent space is linear, and every
task owns one affine head on top of the shared latent. Snapshots deep-copy
the parameter values into read-only arrays so a teacher can never drift
while the student trains.
"""

from __future__ import annotations

import json
import math

import numpy as np

from .autodiff import Node, ShapeError, as_matrix, matmul, add, tanh, relu

ACTIVATIONS = ("tanh", "relu")


def glorot_uniform(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    """Uniform init in ±sqrt(6/(fan_in+fan_out))."""
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


class Encoder:
    """MLP mapping N x input_dim inputs to N x latent_dim representations.

    `layer_sizes` chains input dim through hidden widths to the latent dim.
    Hidden layers apply `activation`; the final layer is linear.
    """

    def __init__(self, layer_sizes, activation, rng: np.random.Generator):
        layer_sizes = [int(s) for s in layer_sizes]
        if len(layer_sizes) < 2:
            raise ValueError("encoder needs at least input and latent sizes")
        if layer_sizes[-1] < 1:
            raise ValueError("latent dim must be >= 1")
        if activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {activation!r}")
        self.layer_sizes = layer_sizes
        self.activation = activation
        self.weights = []
        self.biases = []
        for fan_in, fan_out in zip(layer_sizes[:-1], layer_sizes[1:]):
            self.weights.append(Node(glorot_uniform(rng, fan_in, fan_out), op="param"))
            self.biases.append(Node(np.zeros((1, fan_out)), op="param"))

    @property
    def input_dim(self):
        return self.layer_sizes[0]

    @property
    def latent_dim(self):
        return self.layer_sizes[-1]

    def forward(self, x: Node) -> Node:
        act = tanh if self.activation == "tanh" else relu
        h = x
        last = len(self.weights) - 1
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            h = add(matmul(h, w), b)
            if i < last:
                h = act(h)
        return h

    def forward_values(self, x: np.ndarray) -> np.ndarray:
        """Inference pass on plain arrays; mirrors `forward` numerically."""
        f = np.tanh if self.activation == "tanh" else lambda v: np.maximum(v, 0.0)
        h = x
        last = len(self.weights) - 1
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            h = h @ w.value + b.value
            if i < last:
                h = f(h)
        return h


class Head:
    """Affine projection from the latent space to one task's logits."""

    def __init__(self, task_id: int, latent_dim: int, classes: int, rng: np.random.Generator):
        if classes < 2:
            raise ValueError("a head needs at least 2 classes")
        self.task_id = int(task_id)
        self.classes = int(classes)
        self.weight = Node(glorot_uniform(rng, latent_dim, classes), op="param")
        self.bias = Node(np.zeros((1, classes)), op="param")

    def forward(self, z: Node) -> Node:
        return add(matmul(z, self.weight), self.bias)

    def forward_values(self, z: np.ndarray) -> np.ndarray:
        return z @ self.weight.value + self.bias.value


class ModelState:
    """Shared encoder plus the ordered heads of every task seen so far."""

    def __init__(self, input_dim, hidden, latent_dim, activation, rng):
        self.encoder = Encoder([input_dim, *hidden, latent_dim], activation, rng)
        self.heads: list[Head] = []

    def add_head(self, classes: int, rng: np.random.Generator) -> Head:
        """Append a freshly initialized head; the encoder is untouched."""
        head = Head(len(self.heads), self.encoder.latent_dim, classes, rng)
        self.heads.append(head)
        return head

    def _check_input(self, x: np.ndarray):
        if x.shape[1] != self.encoder.input_dim:
            raise ShapeError(
                f"input dim {x.shape[1]} != encoder dim {self.encoder.input_dim}"
            )

    def _check_task(self, task: int):
        if not 0 <= task < len(self.heads):
            raise ValueError(f"unknown task index {task} ({len(self.heads)} heads)")

    def encode(self, x) -> Node:
        """Differentiable representation z for a batch of inputs."""
        x = as_matrix(x, "x")
        self._check_input(x)
        return self.encoder.forward(Node(x, op="input"))

    def head_logits(self, z: Node, task: int) -> Node:
        self._check_task(task)
        return self.heads[task].forward(z)

    def predict(self, x, task: int) -> Node:
        """Differentiable logits of `task` for a batch of inputs."""
        return self.head_logits(self.encode(x), task)

    def encode_values(self, x) -> np.ndarray:
        x = as_matrix(x, "x")
        self._check_input(x)
        return self.encoder.forward_values(x)

    def predict_values(self, x, task: int) -> np.ndarray:
        self._check_task(task)
        return self.heads[task].forward_values(self.encode_values(x))

    def parameters(self) -> list[Node]:
        params = list(self.encoder.weights) + list(self.encoder.biases)
        for h in self.heads:
            params.extend((h.weight, h.bias))
        return params

    def snapshot(self) -> "TeacherSnapshot":
        """Frozen deep copy of the current parameters."""
        if not self.heads:
            raise ValueError("snapshot requires at least one trained task")
        return TeacherSnapshot(self)

    def to_dict(self) -> dict:
        return {
            "layer_sizes": self.encoder.layer_sizes,
            "activation": self.encoder.activation,
            "encoder_weights": [w.value.ravel(order="C").tolist() for w in self.encoder.weights],
            "encoder_biases": [b.value.ravel(order="C").tolist() for b in self.encoder.biases],
            "heads": [
                {
                    "task_id": h.task_id,
                    "classes": h.classes,
                    "weight": h.weight.value.ravel(order="C").tolist(),
                    "bias": h.bias.value.ravel(order="C").tolist(),
                }
                for h in self.heads
            ],
            "task_count": len(self.heads),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelState":
        sizes = [int(s) for s in d["layer_sizes"]]
        m = cls.__new__(cls)
        m.encoder = Encoder.__new__(Encoder)
        m.encoder.layer_sizes = sizes
        m.encoder.activation = d["activation"]
        if m.encoder.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {m.encoder.activation!r}")
        m.encoder.weights = []
        m.encoder.biases = []
        for i, (fi, fo) in enumerate(zip(sizes[:-1], sizes[1:])):
            w = np.array(d["encoder_weights"][i], dtype=np.float64).reshape(fi, fo)
            b = np.array(d["encoder_biases"][i], dtype=np.float64).reshape(1, fo)
            m.encoder.weights.append(Node(w, op="param"))
            m.encoder.biases.append(Node(b, op="param"))
        m.heads = []
        latent = sizes[-1]
        for hd in d["heads"]:
            h = Head.__new__(Head)
            h.task_id = int(hd["task_id"])
            h.classes = int(hd["classes"])
            h.weight = Node(
                np.array(hd["weight"], dtype=np.float64).reshape(latent, h.classes),
                op="param",
            )
            h.bias = Node(
                np.array(hd["bias"], dtype=np.float64).reshape(1, h.classes), op="param"
            )
            m.heads.append(h)
        return m


class TeacherSnapshot:
    """Read-only copy of a ModelState taken at a task boundary.

    Forward passes run on plain arrays and never build a graph, so no
    gradient can reach the teacher.
    """

    def __init__(self, m: ModelState):
        self.layer_sizes = list(m.encoder.layer_sizes)
        self.activation = m.encoder.activation
        self.weights = [self._freeze(w.value) for w in m.encoder.weights]
        self.biases = [self._freeze(b.value) for b in m.encoder.biases]
        self.heads = [
            (h.task_id, h.classes, self._freeze(h.weight.value), self._freeze(h.bias.value))
            for h in m.heads
        ]

    @staticmethod
    def _freeze(a: np.ndarray) -> np.ndarray:
        c = a.copy()
        c.flags.writeable = False
        return c

    @property
    def task_count(self):
        return len(self.heads)

    def encode_values(self, x) -> np.ndarray:
        x = as_matrix(x, "x")
        f = np.tanh if self.activation == "tanh" else lambda v: np.maximum(v, 0.0)
        h = x
        last = len(self.weights) - 1
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            h = h @ w + b
            if i < last:
                h = f(h)
        return h

    def head_values(self, z: np.ndarray, task: int) -> np.ndarray:
        _, _, w, b = self.heads[task]
        return z @ w + b

    def predict_values(self, x, task: int) -> np.ndarray:
        if not 0 <= task < len(self.heads):
            raise ValueError(f"unknown task index {task}")
        return self.head_values(self.encode_values(x), task)


def save_checkpoint(m: ModelState, path) -> None:
    """Write the model as JSON; floats round-trip bit-for-bit via repr."""
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(m.to_dict(), fh, sort_keys=True, indent=2)
        fh.write("\n")


def load_checkpoint(path) -> ModelState:
    with open(path, "r", encoding="utf-8") as fh:
        return ModelState.from_dict(json.load(fh))
