"""Student/teacher distributions, the multi-view + mixed-view loss, and schedules."""

from __future__ import annotations

import math

import numpy as np

from .. import autodiff as ad
from ..autodiff import Tensor
from ..errors import NumericError

STUDENT_TEMP = 0.4
TEACHER_TEMP = 0.1
CENTER_MOMENTUM = 0.9
EMA_BASE = 0.996
LOG_FLOOR = -30.0

GLOBAL_VIEWS = ("G1", "G2")


def _check_finite(x, what):
    data = x.data if isinstance(x, Tensor) else np.asarray(x)
    if not np.all(np.isfinite(data)):
        raise NumericError(f"{what}: non-finite input")


def _softmax(x):
    z = x - x.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def student_dist(logits, temp=STUDENT_TEMP):
    """softmax(logits / temp); differentiable when given a Tensor."""
    _check_finite(logits, "student_dist")
    if isinstance(logits, Tensor):
        return ad.softmax(logits * (1.0 / temp), axis=-1)
    return _softmax(np.asarray(logits, dtype=np.float64) / temp)


def teacher_dist(logits, center, temp=TEACHER_TEMP):
    """softmax((logits - center) / temp), always as a constant array."""
    data = logits.data if isinstance(logits, Tensor) else np.asarray(logits, dtype=np.float64)
    _check_finite(data, "teacher_dist")
    _check_finite(center, "teacher_dist")
    return _softmax((data - np.asarray(center)) / temp)


def update_center(center, teacher_outputs, momentum=CENTER_MOMENTUM):
    batch = np.asarray(teacher_outputs, dtype=np.float64)
    if batch.ndim == 1:
        batch = batch[None]
    if len(batch) == 0:
        raise ValueError("update_center: empty batch")
    return momentum * np.asarray(center, dtype=np.float64) + (1.0 - momentum) * batch.mean(axis=0)


def mix_labels(dA, dB, m):
    m = np.asarray(m, dtype=np.float64)
    if m.ndim:
        m = m[..., None]
    return m * np.asarray(dA) + (1.0 - m) * np.asarray(dB)


def entropy(d):
    d = np.asarray(d)
    with np.errstate(divide="ignore", invalid="ignore"):
        return -np.where(d > 0, d * np.log(d), 0.0).sum(axis=-1)


def loss_terms(teacher, student, mixed_target=None):
    """Cross-entropy terms as ``[(name, Tensor)]``.

    ``teacher`` maps global view names to pseudo-label arrays; ``student`` maps
    view names (G1, G2, L1, L2, M) to student distributions. Every teacher
    global view supervises every other available student view except the mixed
    one, which is supervised by ``mixed_target`` alone.
    """
    terms = []
    views = [v for v in ("G1", "G2", "L1", "L2") if v in student]
    for p in GLOBAL_VIEWS:
        for q in views:
            if q != p:
                terms.append((f"{p}->{q}", ad.cross_entropy(Tensor(teacher[p]), student[q], LOG_FLOOR)))
    if "M" in student:
        if mixed_target is None:
            raise ValueError("loss_terms: mixed view present without a mixed pseudo-label")
        terms.append(("mix->M", ad.cross_entropy(Tensor(mixed_target), student["M"], LOG_FLOOR)))
    return terms


def sample_loss(bundle, pseudo_labels, student_outputs):
    """Loss for one training sample.

    pseudo_labels: teacher distributions for ``G1``, ``G2`` of A and ``partner``
    (the first global view of B). student_outputs: student distributions per view.
    """
    target = None
    if "M" in student_outputs:
        target = mix_labels(pseudo_labels["G1"], pseudo_labels["partner"], bundle.m)
    terms = loss_terms(pseudo_labels, student_outputs, target)
    total = terms[0][1]
    for _, t in terms[1:]:
        total = total + t
    return total


def ema_lambda(step, total_steps, base=EMA_BASE):
    """Cosine ramp from ``base`` at step 0 to 1 at ``total_steps``."""
    frac = min(max(step / total_steps, 0.0), 1.0) if total_steps > 0 else 1.0
    return 1.0 - (1.0 - base) * (math.cos(math.pi * frac) + 1.0) / 2.0


def ema_update(teacher, student, lam):
    """teacher <- lam * teacher + (1 - lam) * student, elementwise.

    Accepts arrays (returns the new array) or dicts of Tensors/arrays keyed by
    name (updated in place, also returned).
    """
    if isinstance(teacher, dict):
        for name, t in teacher.items():
            s = student[name]
            s = s.data if isinstance(s, Tensor) else s
            if isinstance(t, Tensor):
                t.data = (lam * t.data + (1.0 - lam) * s).astype(t.data.dtype, copy=False)
            else:
                t[...] = lam * t + (1.0 - lam) * s
        return teacher
    return lam * np.asarray(teacher) + (1.0 - lam) * np.asarray(student)


def lr_schedule(epoch, warmup=20, total=200, start=1e-4, peak=5e-4, end=1e-4):
    """Linear warmup from ``start`` to ``peak``, then cosine decay to ``end``."""
    if not 0 <= epoch <= total:
        raise ValueError(f"lr_schedule: epoch {epoch} outside [0, {total}]")
    if warmup > 0 and epoch < warmup:
        return start + (peak - start) * epoch / warmup
    span = total - warmup
    if span <= 0:
        return peak
    frac = (epoch - warmup) / span
    return end + (peak - end) * (1.0 + math.cos(math.pi * frac)) / 2.0
