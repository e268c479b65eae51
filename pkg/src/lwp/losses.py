"""Loss terms for continual training with representation preservation.

The composite objective is

    total = lambda_c * L_cur + lambda_o * L_old + lambda_d * L_dwdp

where L_cur is softmax cross-entropy on the current task, L_old distills the
frozen teacher's outputs for earlier tasks into the student's old heads, and
L_dwdp penalizes drift of the pairwise relation structure of the latent
batch:

    L_dwdp = (1/N^2) * sum_ij m_ij * (d(z_i, z_j) - d(z'_i, z'_j))^2

with z the student batch, z' the teacher batch, and m the label mask that
keeps only same-class pairs of the current task. Four relation functions d
are supported; see `DistanceVariant`.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Node, ShapeError

VARIANT_KINDS = ("sq_euclidean", "cosine", "rbf_gram", "rkd_unmasked")

COSINE_NORM_FLOOR = 1e-12


@dataclass(frozen=True)
class LossWeights:
    """Non-negative weights of the three composite-loss components."""

    lambda_c: float = 1.0
    lambda_o: float = 1.0
    lambda_d: float = 0.01

    def __post_init__(self):
        for name in ("lambda_c", "lambda_o", "lambda_d"):
            v = getattr(self, name)
            if not np.isfinite(v) or v < 0:
                raise ValueError(f"{name} must be finite and >= 0, got {v}")


@dataclass(frozen=True)
class DistanceVariant:
    """Pairwise relation function used by the preservation losses.

    kind:
        sq_euclidean  d_ij = ||z_i - z_j||^2
        cosine        d_ij = <z_i, z_j> / (||z_i|| * ||z_j||), norms floored
        rbf_gram      d_ij = exp(-||z_i - z_j||^2 / (2 sigma^2))
        rkd_unmasked  d_ij = ||z_i - z_j|| / mu, mu the mean off-diagonal
                      distance of the batch (zero diagonal); the ablation
                      that preserves relative distances across all pairs
    sigma:
        rbf_gram bandwidth; None selects the median heuristic (median
        off-diagonal distance of the reference batch). Must be None for the
        other kinds.
    """

    kind: str = "sq_euclidean"
    sigma: float | None = None

    def __post_init__(self):
        if self.kind not in VARIANT_KINDS:
            raise ValueError(f"unknown distance variant {self.kind!r}")
        if self.kind == "rbf_gram":
            if self.sigma is not None and self.sigma <= 0:
                raise ValueError("rbf_gram sigma must be > 0")
        elif self.sigma is not None:
            raise ValueError(f"sigma only applies to rbf_gram, not {self.kind}")


def median_sigma(z_ref: np.ndarray) -> float:
    """Median off-diagonal Euclidean distance of `z_ref`, floored at 1e-12.

    Falls back to 1.0 when the batch has no pairs.
    """
    n = z_ref.shape[0]
    if n < 2:
        return 1.0
    d = np.sqrt(ad.sq_dist_matrix(z_ref))
    off = d[~np.eye(n, dtype=bool)]
    return max(float(np.median(off)), 1e-12)


def resolve_sigma(variant: DistanceVariant, z_ref: np.ndarray) -> float | None:
    """Concrete bandwidth for `variant` given the reference (teacher) batch."""
    if variant.kind != "rbf_gram":
        return None
    return variant.sigma if variant.sigma is not None else median_sigma(z_ref)


def relation_matrix_node(z: Node, variant: DistanceVariant, sigma: float | None = None) -> Node:
    """Differentiable N x N relation matrix of `z` under `variant`.

    For rbf_gram, `sigma` must already be resolved (see `resolve_sigma`) so
    that student and teacher use one common kernel.
    """
    n = z.shape[0]
    kind = variant.kind
    if kind == "sq_euclidean":
        return ad.pairwise_sq_dist(z)
    if kind == "cosine":
        n2 = ad.sum_rows(ad.mul(z, z))
        norms = ad.clamp_min(ad.sqrt(n2), COSINE_NORM_FLOOR)
        zn = ad.mul(z, ad.power(norms, -1.0))
        return ad.matmul(zn, ad.transpose(zn))
    if kind == "rbf_gram":
        if sigma is None:
            sigma = variant.sigma
        if sigma is None:
            raise ValueError("rbf_gram needs a resolved sigma")
        return ad.exp(ad.scale(ad.pairwise_sq_dist(z), -1.0 / (2.0 * sigma * sigma)))
    # rkd_unmasked: mean-normalized plain distances with a zero diagonal.
    # Adding I before the sqrt keeps the diagonal away from sqrt(0); the
    # off-diagonal mask then restores exact zeros there.
    d = ad.pairwise_sq_dist(z)
    if n < 2:
        return ad.scale(d, 0.0)
    eye = np.eye(n)
    t = ad.mul(ad.sqrt(ad.add(d, ad.constant(eye))), ad.constant(1.0 - eye))
    mu = ad.scale(ad.sum_all(t), 1.0 / (n * (n - 1)))
    return ad.mul(t, ad.power(mu, -1.0))


def relation_matrix(z: np.ndarray, variant: DistanceVariant, sigma: float | None = None) -> np.ndarray:
    """Plain-array relation matrix; bitwise identical to the node path."""
    return relation_matrix_node(Node(z, op="const"), variant, sigma).value


def current_task_loss(logits: Node, labels_onehot) -> Node:
    """Supervised softmax cross-entropy for the task being learned."""
    return ad.softmax_cross_entropy(logits, labels_onehot)


def old_task_loss(
    student_logits: list[Node],
    teacher_logits: list[np.ndarray],
    temperature: float = 1.0,
    hard: bool = False,
) -> Node:
    """Distillation loss against the frozen teacher, summed over old tasks.

    Soft mode (default) trains each old head toward the teacher's
    temperature-softened distribution: CE(softmax(teacher/T), student/T),
    averaged over the batch. Hard mode uses the teacher's argmax as a
    one-hot pseudolabel. Returns an exact zero for the first task.
    """
    if len(student_logits) != len(teacher_logits):
        raise ShapeError("old_task_loss: per-task logit lists differ in length")
    if temperature <= 0:
        raise ValueError("old_task_loss: temperature must be > 0")
    if not student_logits:
        return ad.constant(np.zeros((1, 1)))
    total = None
    for s, t in zip(student_logits, teacher_logits):
        t = ad.as_matrix(t, "teacher_logits")
        if t.shape != s.shape:
            raise ShapeError(f"old_task_loss: teacher {t.shape} vs student {s.shape}")
        if hard:
            targets = np.zeros_like(t)
            targets[np.arange(t.shape[0]), t.argmax(axis=1)] = 1.0
            term = ad.softmax_cross_entropy(s, targets)
        else:
            targets = ad.softmax_rows(t / temperature)
            term = ad.softmax_cross_entropy(ad.scale(s, 1.0 / temperature), targets)
        total = term if total is None else ad.add(total, term)
    return total


def dwdp_mask(labels) -> np.ndarray:
    """Binary N x N mask with m_ij = 1 iff labels i and j agree.

    `labels` is an N x 1 column of current-task class indices. The result
    is symmetric with an all-ones diagonal.
    """
    y = ad.as_matrix(labels, "labels")
    if y.shape[1] != 1:
        raise ShapeError(f"dwdp_mask: labels must be N x 1, got {y.shape}")
    return (y == y.T).astype(np.float64)


def dwdp_loss(z_new: Node, z_old, mask, variant: DistanceVariant) -> Node:
    """Masked squared drift of the pairwise relation structure.

    (1/N^2) * sum_ij mask_ij * (d(z_i, z_j) - d(z'_i, z'_j))^2 where z comes
    from the student (differentiable) and z' from the frozen teacher. With
    an all-ones mask this is exactly the unmasked preservation loss.
    """
    z_old = ad.as_matrix(z_old, "z_old")
    if z_old.shape != z_new.shape:
        raise ShapeError(f"dwdp_loss: z_old {z_old.shape} vs z_new {z_new.shape}")
    n = z_new.shape[0]
    if n == 0:
        raise ShapeError("dwdp_loss: empty batch")
    m = ad.as_matrix(mask, "mask")
    if m.shape != (n, n):
        raise ShapeError(f"dwdp_loss: mask {m.shape} does not match batch {n}")
    sigma = resolve_sigma(variant, z_old)
    r_new = relation_matrix_node(z_new, variant, sigma)
    r_old = relation_matrix(z_old, variant, sigma)
    delta = ad.sub(r_new, ad.constant(r_old))
    return ad.scale(ad.frobenius_sq(ad.mul(delta, ad.constant(m))), 1.0 / (n * n))


def preservation_loss(z_new: Node, z_old, variant: DistanceVariant) -> Node:
    """Unmasked preservation loss: `dwdp_loss` with an all-ones mask."""
    z_old = ad.as_matrix(z_old, "z_old")
    n = z_old.shape[0]
    return dwdp_loss(z_new, z_old, np.ones((n, n)), variant)


def lwp_total(l_cur: Node, l_old: Node, l_dwdp: Node, w: LossWeights) -> Node:
    """Weighted sum of the three scalar components."""
    for name, node in (("l_cur", l_cur), ("l_old", l_old), ("l_dwdp", l_dwdp)):
        if node.shape != (1, 1):
            raise ShapeError(f"lwp_total: {name} must be scalar, got {node.shape}")
    return ad.add(
        ad.add(ad.scale(l_cur, w.lambda_c), ad.scale(l_old, w.lambda_o)),
        ad.scale(l_dwdp, w.lambda_d),
    )


def onehot(labels, classes: int) -> np.ndarray:
    """N x classes one-hot matrix from an N x 1 column of class indices."""
    y = ad.as_matrix(labels, "labels")
    idx = y.astype(np.int64).ravel()
    if (idx < 0).any() or (idx >= classes).any():
        raise ValueError(f"labels out of range [0, {classes})")
    out = np.zeros((y.shape[0], classes))
    out[np.arange(y.shape[0]), idx] = 1.0
    return out
