"""Contrastive (InfoNCE-style) and self-distillation objectives.

Both losses return the scalar value together with analytic gradients with
respect to their raw inputs; normalization and softmax are computed with
max-subtraction for stability.  Either loss accepts inputs whose positive /
teacher side has been substituted with queue-sourced pseudo-positive
embeddings: substituted rows are treated as constants and contribute zero
gradient to any model parameter.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

__all__ = [
    "SimclrParams",
    "DinoParams",
    "SimclrInputs",
    "DinoInputs",
    "simclr_loss",
    "dino_loss",
    "update_center",
    "apply_pseudo_positive",
]


@dataclass
class SimclrParams:
    temperature: float = 0.03

    def __post_init__(self) -> None:
        if self.temperature <= 0:
            raise ValueError("temperature must be > 0")


@dataclass
class DinoParams:
    student_temperature: float = 0.1
    teacher_temperature: float = 0.04
    center: np.ndarray | None = None
    center_momentum: float = 0.9

    def __post_init__(self) -> None:
        if self.student_temperature <= 0 or self.teacher_temperature <= 0:
            raise ValueError("temperatures must be > 0")
        if not self.teacher_temperature < self.student_temperature:
            raise ValueError("sharpening requires teacher_temperature < student_temperature")
        if not 0.0 <= self.center_momentum < 1.0:
            raise ValueError("center_momentum must be in [0, 1)")
        if self.center is not None and not np.all(np.isfinite(self.center)):
            raise ValueError("center must be finite")


@dataclass
class SimclrInputs:
    """Anchor/positive embedding pair for the contrastive loss.

    ``positive_is_queue`` marks rows whose positive was substituted from the
    pseudo-positive queue; those rows are constants for backprop.
    """

    indices: np.ndarray
    anchors: np.ndarray
    positives: np.ndarray
    positive_is_queue: np.ndarray = field(default=None)  # type: ignore[assignment]

    def __post_init__(self) -> None:
        if self.positive_is_queue is None:
            self.positive_is_queue = np.zeros(self.anchors.shape[0], dtype=bool)


@dataclass
class DinoInputs:
    """Student (6) and teacher (2) view embeddings for the distillation loss."""

    indices: np.ndarray
    student_views: list[np.ndarray]
    teacher_views: list[np.ndarray]
    positive_is_queue: np.ndarray = field(default=None)  # type: ignore[assignment]

    def __post_init__(self) -> None:
        if self.positive_is_queue is None:
            b = self.student_views[0].shape[0]
            self.positive_is_queue = np.zeros(b, dtype=bool)


def _normalize_rows(z: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    norms = np.linalg.norm(z, axis=1, keepdims=True)
    if np.any(norms == 0.0):
        raise ValueError("zero-norm embedding row")
    return z / norms, norms


def _log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted - np.log(np.sum(np.exp(shifted), axis=1, keepdims=True))


def _softmax(logits: np.ndarray) -> np.ndarray:
    return np.exp(_log_softmax(logits))


def simclr_loss(
    anchors: np.ndarray,
    positives: np.ndarray,
    params: SimclrParams,
    positive_is_queue: np.ndarray | None = None,
) -> tuple[float, np.ndarray, np.ndarray]:
    """Temperature-scaled cross-entropy over cosine similarities.

    loss = -(1/B) sum_i log( exp(cos(z_i, z'_i)/tau) / sum_j exp(cos(z_i, z'_j)/tau) )

    Rows are l2-normalized internally; gradients flow through the
    normalization and are returned for both raw inputs.  Rows of
    ``positives`` flagged in ``positive_is_queue`` get a zero gradient.
    """
    z = np.asarray(anchors, dtype=np.float64)
    zp = np.asarray(positives, dtype=np.float64)
    if z.shape != zp.shape or z.ndim != 2:
        raise ValueError("anchors and positives must share shape (B, D)")
    b = z.shape[0]
    zn, z_norms = _normalize_rows(z)
    zpn, zp_norms = _normalize_rows(zp)

    logits = (zn @ zpn.T) / params.temperature
    log_probs = _log_softmax(logits)
    loss = -float(np.mean(np.diag(log_probs)))

    dlogits = (np.exp(log_probs) - np.eye(b)) / b
    dzn = (dlogits @ zpn) / params.temperature
    dzpn = (dlogits.T @ zn) / params.temperature
    danchors = (dzn - zn * np.sum(zn * dzn, axis=1, keepdims=True)) / z_norms
    dpositives = (dzpn - zpn * np.sum(zpn * dzpn, axis=1, keepdims=True)) / zp_norms
    if positive_is_queue is not None and positive_is_queue.any():
        dpositives = dpositives.copy()
        dpositives[positive_is_queue] = 0.0
    return loss, danchors, dpositives


def simclr_loss_from_inputs(
    inputs: SimclrInputs, params: SimclrParams
) -> tuple[float, np.ndarray, np.ndarray]:
    return simclr_loss(inputs.anchors, inputs.positives, params, inputs.positive_is_queue)


def dino_loss(
    student_views: list[np.ndarray],
    teacher_views: list[np.ndarray],
    params: DinoParams,
) -> tuple[float, list[np.ndarray]]:
    """Multi-view distillation loss with teacher centering and sharpening.

    loss = (1/B) sum_i sum_{t=1..2} sum_{s != t, s=1..6}
               H((z'_{i,t} - c)/tau_t, z_{i,s}/tau_s)

    with H(a, b) = -softmax(a) . log softmax(b).  Views 1..2 are the global
    crops (shared indexing with the teacher), 3..6 the local crops.  The
    teacher side is a constant: only student-view gradients are returned.
    """
    if len(teacher_views) != 2 or len(student_views) != 6:
        raise ValueError("expected 2 teacher views and 6 student views")
    b, d = teacher_views[0].shape
    for v in list(student_views) + list(teacher_views):
        if v.shape != (b, d):
            raise ValueError("all views must share shape (B, D_emb)")
    center = params.center if params.center is not None else np.zeros(d)

    teacher_probs = [
        _softmax((np.asarray(v, dtype=np.float64) - center) / params.teacher_temperature)
        for v in teacher_views
    ]
    student_logps = [
        _log_softmax(np.asarray(v, dtype=np.float64) / params.student_temperature)
        for v in student_views
    ]

    loss = 0.0
    grads = [np.zeros((b, d)) for _ in student_views]
    for t, p_t in enumerate(teacher_probs):
        for s, logp_s in enumerate(student_logps):
            if s == t:
                continue
            loss += -np.sum(p_t * logp_s) / b
            grads[s] += (np.exp(logp_s) - p_t) / (params.student_temperature * b)
    return float(loss), grads


def dino_loss_from_inputs(
    inputs: DinoInputs, params: DinoParams
) -> tuple[float, list[np.ndarray]]:
    return dino_loss(inputs.student_views, inputs.teacher_views, params)


def update_center(params: DinoParams, teacher_batch_embeddings: np.ndarray) -> np.ndarray:
    """New running center: rho*c + (1-rho)*mean over all teacher embeddings.

    ``teacher_batch_embeddings`` stacks every teacher view of the batch,
    shape (n_views*B, D_emb).  Returns the new center; the caller owns the
    assignment back into ``params``.
    """
    emb = np.asarray(teacher_batch_embeddings, dtype=np.float64)
    if not np.all(np.isfinite(emb)):
        raise ValueError("teacher embeddings must be finite")
    batch_mean = emb.mean(axis=0)
    rho = params.center_momentum
    center = params.center if params.center is not None else np.zeros_like(batch_mean)
    return rho * center + (1.0 - rho) * batch_mean


def apply_pseudo_positive(
    inputs: SimclrInputs | DinoInputs,
    replacements: Mapping[int, np.ndarray],
) -> SimclrInputs | DinoInputs:
    """Substitute queue-sourced pseudo-positive embeddings into loss inputs.

    ``replacements`` maps utterance id -> embedding.  For the contrastive
    inputs the positive row is replaced; for the distillation inputs both
    teacher views of the item are replaced (one stored embedding per
    utterance).  Replaced rows are flagged gradient-free.  An empty map
    returns the inputs unchanged.
    """
    if not replacements:
        return inputs
    row_of = {int(u): r for r, u in enumerate(inputs.indices)}
    mask = inputs.positive_is_queue.copy()

    if isinstance(inputs, SimclrInputs):
        positives = inputs.positives.copy()
        dim = positives.shape[1]
        for utt, emb in replacements.items():
            if emb.shape != (dim,):
                raise ValueError(f"replacement for {utt} has dimension {emb.shape}, want ({dim},)")
            row = row_of[int(utt)]
            positives[row] = emb
            mask[row] = True
        return SimclrInputs(inputs.indices, inputs.anchors, positives, mask)

    teacher_views = [v.copy() for v in inputs.teacher_views]
    dim = teacher_views[0].shape[1]
    for utt, emb in replacements.items():
        if emb.shape != (dim,):
            raise ValueError(f"replacement for {utt} has dimension {emb.shape}, want ({dim},)")
        row = row_of[int(utt)]
        for view in teacher_views:
            view[row] = emb
        mask[row] = True
    return DinoInputs(inputs.indices, inputs.student_views, teacher_views, mask)
