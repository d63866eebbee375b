"""The fine-tuning objective: symmetric contrastive loss over a batch,
plus a KL regularizer that holds the student's response distribution on
spuriosity-injected captions to the frozen teacher's.

Conventions used throughout:
  * logits[i, j] is the temperature-scaled similarity of image i and text j;
  * the diagonal holds the positive pairs of the base batch;
  * the regularizer is image-anchored only (row-wise distributions over
    texts), and with positive masking every column sharing the anchor's
    class is removed before the softmax.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

from .numcore import (
    Tape,
    Tensor,
    finite_difference_gradients,
    log_softmax,
    softmax,
)


@dataclass
class StarConfig:
    """Knobs of the spuriosity-alignment regularizer.

    lambda_star is the initial regularization weight; with decay enabled it
    falls linearly to zero over the training steps.  tau_mode picks the
    temperature used for the teacher's distribution: "teacher" (its own
    frozen value) or "shared" (the student's live value, detached).
    """

    lambda_star: float = 0.5
    decay_enabled: bool = True
    mask_positive: bool = True
    spurious_concept: str = "background"  # a bank concept, or "all"
    random_suffix_mode: bool = False
    random_suffix_k: int = 3
    tau_mode: str = "teacher"

    def __post_init__(self) -> None:
        if self.lambda_star < 0:
            raise ValueError(f"lambda_star must be >= 0, got {self.lambda_star}")
        if self.tau_mode not in ("teacher", "shared"):
            raise ValueError(f"tau_mode must be 'teacher' or 'shared', got {self.tau_mode!r}")
        if self.random_suffix_k < 1:
            raise ValueError("random_suffix_k must be >= 1")


@dataclass
class LossBreakdown:
    contrastive: float
    star: float
    combined: float
    lambda_effective: float


@dataclass
class NegativeDistribution:
    """Softmax over the retained (negative) columns of one logit row."""

    probabilities: np.ndarray
    anchor_class: int
    retained: list[int] = field(default_factory=list)


def contrastive_loss(logits: Tensor) -> Tensor:
    """Symmetric image-to-text / text-to-image cross-entropy.

    -(1/2N) * sum_i [ log softmax_row(i)_i + log softmax_col(i)_i ]
    """
    n, m = logits.value.shape
    if n != m:
        raise ValueError(f"contrastive loss needs a square logit matrix, got {n}x{m}")
    eye = np.eye(n)
    lsm_rows = log_softmax(logits, axis=1)
    lsm_cols = log_softmax(logits, axis=0)
    diag_sum = ((lsm_rows + lsm_cols) * eye).sum()
    return diag_sum * (-1.0 / (2.0 * n))


def _negative_mask(labels: np.ndarray, mask_positive: bool) -> np.ndarray:
    n = labels.shape[0]
    if not mask_positive:
        return np.ones((n, n))
    mask = (labels[None, :] != labels[:, None]).astype(np.float64)
    if np.any(mask.sum(axis=1) == 0):
        raise ValueError("a row has no negative columns under positive masking")
    return mask


def masked_negative_softmax(
    logit_row: np.ndarray,
    class_of_columns: Sequence[int],
    anchor_class: int,
    mask_positive: bool = True,
) -> NegativeDistribution:
    """Distribution of one image over the negative text columns.

    With masking on, every column whose class equals the anchor's is
    dropped (all same-class columns, not just the diagonal); with masking
    off the softmax runs over all columns.
    """
    row = np.asarray(logit_row, dtype=np.float64)
    classes = list(class_of_columns)
    if row.shape != (len(classes),):
        raise ValueError("logit row and column classes must have equal length")
    if mask_positive:
        retained = [j for j, c in enumerate(classes) if c != anchor_class]
        if not retained:
            raise ValueError(
                f"no negative columns available: all columns share class {anchor_class!r}"
            )
    else:
        retained = list(range(len(classes)))
    return NegativeDistribution(
        probabilities=softmax(row[retained]),
        anchor_class=anchor_class,
        retained=retained,
    )


def star_loss(
    student_logits: Tensor,
    teacher_logits: np.ndarray | Tensor,
    class_labels: Sequence[int],
    mask_positive: bool = True,
) -> Tensor:
    """(1/N) sum_i KL(teacher_i || student_i) over negative-masked rows.

    Teacher logits enter as constants, so the gradient flows only into the
    student logits.  Masked columns carry exactly zero teacher probability
    and therefore contribute neither value nor gradient.
    """
    tape = student_logits.tape
    teacher = np.asarray(
        teacher_logits.value if isinstance(teacher_logits, Tensor) else teacher_logits,
        dtype=np.float64,
    )
    n, m = student_logits.value.shape
    if n != m:
        raise ValueError(f"expected a square batch logit matrix, got {n}x{m}")
    if teacher.shape != (n, m):
        raise ValueError(f"teacher logits shape {teacher.shape} != student {(n, m)}")
    labels = np.asarray(class_labels)
    if labels.shape != (n,):
        raise ValueError(f"expected {n} class labels, got {labels.shape}")

    mask = _negative_mask(labels, mask_positive)
    softmax_mask = mask if mask_positive else None
    log_q = log_softmax(student_logits, axis=1, mask=softmax_mask)
    log_qt = log_softmax(tape.constant(teacher), axis=1, mask=softmax_mask)
    q_t = log_qt.exp() * mask
    kl_terms = q_t * (log_qt - log_q)
    return kl_terms.sum() * (1.0 / n)


def combined_loss(l_c: Tensor, l_star: Tensor | None, lambda_effective: float) -> Tensor:
    """l_c + lambda * l_star; with lambda == 0 the contrastive node is
    returned unchanged so gradients are bitwise those of the contrastive
    loss alone."""
    if lambda_effective < 0:
        raise ValueError(f"lambda_effective must be >= 0, got {lambda_effective}")
    if lambda_effective == 0.0 or l_star is None:
        return l_c
    return l_c + l_star * lambda_effective


def lambda_schedule(
    lambda0: float, step: int, total_steps: int, decay_enabled: bool
) -> float:
    """Linear decay from lambda0 at step 0 to exactly 0 at the final step."""
    if total_steps < 1:
        raise ValueError(f"total_steps must be >= 1, got {total_steps}")
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    if not decay_enabled:
        return lambda0
    return lambda0 * (1.0 - step / total_steps)


def gradient_check(
    build_loss: Callable[[Tape, dict[str, Tensor]], Tensor],
    params: Mapping[str, np.ndarray],
    eps: float = 1e-6,
) -> float:
    """Worst relative error between tape gradients and central differences.

    ``build_loss`` must construct the scalar loss from the given parameter
    nodes alone; it is re-run on a fresh tape for every perturbed point.
    """
    names = list(params)
    tape = Tape()
    nodes = {name: tape.param(np.asarray(params[name], dtype=np.float64)) for name in names}
    loss = build_loss(tape, nodes)
    grads = tape.backward(loss)
    analytic = {name: grads[nodes[name]] for name in names}

    def value(arrays: Sequence[np.ndarray]) -> float:
        t = Tape()
        nd = {name: t.param(a) for name, a in zip(names, arrays)}
        return float(build_loss(t, nd).value)

    numeric = finite_difference_gradients(value, [np.asarray(params[n], dtype=np.float64) for n in names], eps)
    worst = 0.0
    for name, fd in zip(names, numeric):
        a = np.atleast_1d(analytic[name])
        rel = np.abs(a - np.atleast_1d(fd)) / np.maximum(1.0, np.abs(a))
        if rel.size:
            worst = max(worst, float(rel.max()))
    return worst
