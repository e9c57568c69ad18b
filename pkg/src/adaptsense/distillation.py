"""Cross-modal feature distillation: teacher interface and the three losses.

The combined objective is

    phi = alpha * kd + (1 - alpha) * gt + beta * l1

where `kd` is the tempered KL divergence between teacher and student logits,
`gt` the task loss against ground truth, and `l1` the feature-matching term.
The KL term carries the standard tau^2 gradient-magnitude correction so that
temperature sweeps do not silently rescale the loss.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .errors import ConfigError, DataError, ShapeError
from .synthetic import Segment

DTYPE = torch.float64


@dataclass(frozen=True)
class DistillConfig:
    alpha: float = 0.90
    beta: float = 0.85
    tau_kd: float = 1.0

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ConfigError(f"alpha must lie in [0, 1], got {self.alpha}")
        if self.beta < 0:
            raise ConfigError(f"beta must be non-negative, got {self.beta}")
        if self.tau_kd <= 0:
            raise ConfigError(f"tau_kd must be positive, got {self.tau_kd}")


@dataclass
class TeacherOutput:
    feature: torch.Tensor  # (..., d_f)
    logits: torch.Tensor  # (..., C)


class OracleTeacher:
    """Deterministic stand-in for a heavy pretrained teacher.

    Emits one fixed feature template per class (a seeded unit vector plus a
    smaller second harmonic, so the target has label-correlated structure)
    and logits that put margin `m` on the true class. Top-1 accurate on
    clean data by construction.
    """

    def __init__(self, d_f: int, n_classes: int, margin: float = 5.0, seed: int = 0):
        if d_f < 1 or n_classes < 2:
            raise ConfigError("teacher needs d_f >= 1 and at least two classes")
        self.d_f = d_f
        self.n_classes = n_classes
        self.margin = float(margin)
        rng = np.random.default_rng(np.random.SeedSequence((seed, 0x7EAC)))
        base = rng.standard_normal((n_classes, d_f))
        base /= np.linalg.norm(base, axis=1, keepdims=True)
        features = base + 0.1 * np.roll(base, 1, axis=0)
        self.features = torch.as_tensor(features, dtype=DTYPE)
        logits = self.margin * np.eye(n_classes)
        self.logits = torch.as_tensor(logits, dtype=DTYPE)

    def __call__(self, labels) -> TeacherOutput:
        if isinstance(labels, Segment):
            if labels.spec is None:
                raise DataError("segment has no planted label for the oracle teacher")
            labels = labels.spec.label
        idx = torch.as_tensor(np.asarray(labels), dtype=torch.long)
        if torch.any(idx < 0) or torch.any(idx >= self.n_classes):
            raise DataError("label outside the configured class range")
        return TeacherOutput(feature=self.features[idx], logits=self.logits[idx])


def oracle_teacher(segment: Segment, teacher: OracleTeacher) -> TeacherOutput:
    return teacher(segment)


def _as_2d(x) -> torch.Tensor:
    t = torch.as_tensor(np.asarray(x) if not torch.is_tensor(x) else x, dtype=DTYPE)
    return t[None] if t.ndim == 1 else t


def loss_l1(z_teacher, z_student) -> torch.Tensor:
    """Batch mean of the per-sample L1 distance between feature vectors."""
    zt, zs = _as_2d(z_teacher), _as_2d(z_student)
    if zt.shape != zs.shape:
        raise ShapeError(f"feature shapes differ: {tuple(zt.shape)} vs {tuple(zs.shape)}")
    return (zt - zs).abs().sum(dim=-1).mean()


def loss_kd(teacher_logits, student_logits, tau: float) -> torch.Tensor:
    """tau^2-scaled KL(softmax(teacher/tau) || softmax(student/tau)), batch mean."""
    if tau <= 0:
        raise ConfigError(f"tau must be positive, got {tau}")
    t, s = _as_2d(teacher_logits), _as_2d(student_logits)
    if t.shape != s.shape:
        raise ShapeError(f"logit shapes differ: {tuple(t.shape)} vs {tuple(s.shape)}")
    log_p = torch.log_softmax(t / tau, dim=-1)
    log_q = torch.log_softmax(s / tau, dim=-1)
    kl = (log_p.exp() * (log_p - log_q)).sum(dim=-1)
    return tau * tau * kl.mean()


def loss_gt(labels, student_logits) -> torch.Tensor:
    """Mean cross-entropy between ground-truth labels and student logits."""
    logits = _as_2d(student_logits)
    idx = torch.as_tensor(np.asarray(labels), dtype=torch.long).reshape(-1)
    if idx.shape[0] != logits.shape[0]:
        raise ShapeError(f"{idx.shape[0]} labels for {logits.shape[0]} logit rows")
    if torch.any(idx < 0) or torch.any(idx >= logits.shape[-1]):
        raise DataError("label outside [0, C)")
    return torch.nn.functional.cross_entropy(logits, idx)


def loss_gt_regression(targets, predictions) -> torch.Tensor:
    """Mean squared error, the ground-truth term for the regression head."""
    t, p = _as_2d(targets), _as_2d(predictions)
    if t.shape != p.shape:
        raise ShapeError(f"target shapes differ: {tuple(t.shape)} vs {tuple(p.shape)}")
    return ((t - p) ** 2).mean()


def loss_cfd(kd, gt, l1, config: DistillConfig):
    """The combined distillation objective (see module docstring)."""
    for name, val in (("kd", kd), ("gt", gt), ("l1", l1)):
        v = float(val.detach()) if torch.is_tensor(val) else float(val)
        if not np.isfinite(v):
            raise DataError(f"loss component {name} is not finite: {v}")
    return config.alpha * kd + (1.0 - config.alpha) * gt + config.beta * l1
