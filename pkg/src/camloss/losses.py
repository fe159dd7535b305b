"""Loss terms: cross entropy, the CAM term, the alpha step schedule and distillation losses.

Every batched loss is the arithmetic mean of per-sample values. Teacher-side
inputs to the distillation losses are detached before use, so no gradient
reaches a teacher even if it was run on a tape.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import maps
from . import tensor as T

KD = "kd"
AT = "at"
CCM = "ccm"


def _const(x) -> T.Tensor:
    return T.Tensor(x.data if isinstance(x, T.Tensor) else x)


def cross_entropy(logits: T.Tensor, targets) -> T.Tensor:
    targets = np.asarray(targets, dtype=np.intp)
    n = logits.shape[-1]
    if targets.size and (targets.min() < 0 or targets.max() >= n):
        raise IndexError(f"target out of range for {n} classes")
    return -T.mean(T.pick(T.log_softmax(logits), targets))


def cam_maps(features: T.Tensor, head: T.Tensor, targets, detach_cam_target: bool = False):
    """Normalised (CAAM, target-class CAM) pair, each [N,H,W]."""
    caam = maps.normalize_batch(maps.caam_batch(features))
    cam = maps.normalize_batch(maps.cam_batch(features, head, targets))
    if detach_cam_target:
        cam = _const(cam)
    return caam, cam


def cam_term(features: T.Tensor, head: T.Tensor, targets, detach_cam_target: bool = False,
             metric: str = "l1") -> T.Tensor:
    """Mean pixel distance between normalised CAAM and normalised target-class CAM.

    With ``detach_cam_target`` the CAM acts as a fixed per-step target and only
    the CAAM side carries gradient.
    """
    caam, cam = cam_maps(features, head, targets, detach_cam_target)
    return T.mean(maps.distance_batch(caam, cam, metric))


def cam_loss(l_ce, l_cam, alpha: float):
    """alpha * l_cam + l_ce, for floats or Tensors."""
    if isinstance(l_cam, T.Tensor) or isinstance(l_ce, T.Tensor):
        if alpha == 0:
            return l_ce
        return T.as_tensor(l_ce) + T.scale(T.as_tensor(l_cam), alpha)
    return alpha * l_cam + l_ce


@dataclass
class AlphaSchedule:
    """Step weight: 0 before the jump epoch, ``c`` from it on.

    In adaptive mode the jump epoch is the first epoch whose previous epoch
    ended with training accuracy above 0.5; once set it never resets.
    """

    t: int = 20
    c: float = 3.0
    adaptive: bool = False
    triggered_epoch: int | None = None

    @property
    def jump(self) -> int | None:
        return self.triggered_epoch if self.adaptive else self.t

    def __call__(self, epoch: int, prev_train_accuracy: float | None = None) -> float:
        return alpha(self, epoch, prev_train_accuracy)


def alpha(schedule: AlphaSchedule, epoch: int, prev_train_accuracy: float | None = None) -> float:
    if epoch < 0:
        raise ValueError("epoch must be non-negative")
    if schedule.adaptive:
        if (
            schedule.triggered_epoch is None
            and prev_train_accuracy is not None
            and prev_train_accuracy > 0.5
        ):
            schedule.triggered_epoch = epoch
        jump = schedule.triggered_epoch
        return float(schedule.c) if jump is not None and epoch >= jump else 0.0
    return float(schedule.c) if epoch >= schedule.t else 0.0


@dataclass(frozen=True)
class DistillConfig:
    method: str = CCM
    tau: float = 4.0
    beta: float = 0.5
    gamma: float = 1.0
    at_metric: str = "l1"

    def __post_init__(self):
        if self.method not in (KD, AT, CCM):
            raise ValueError(f"unknown distillation method {self.method!r}")
        if not (np.isfinite(self.tau) and self.tau > 0):
            raise ValueError("tau must be positive and finite")
        if not (0.0 <= self.beta <= 1.0):
            raise ValueError("beta must lie in [0, 1]")
        if not (np.isfinite(self.gamma) and self.gamma >= 0):
            raise ValueError("gamma must be non-negative and finite")
        if self.at_metric not in ("l1", "l2"):
            raise ValueError(f"unknown AT metric {self.at_metric!r}")

    @classmethod
    def preset(cls, method: str) -> "DistillConfig":
        """Default hyper-parameters per method: KD tau=4 beta=0.5; AT l2 gamma=10; CCM gamma=1."""
        if method == KD:
            return cls(KD, 4.0, 0.5, 0.0)
        if method == AT:
            return cls(AT, 4.0, 0.5, 10.0, "l2")
        return cls(CCM, 4.0, 0.5, 1.0)


def soft_targets(logits, tau: float):
    """softmax(logits / tau) along the last axis; Tensor in, Tensor out."""
    if tau <= 0:
        raise ValueError("temperature must be positive")
    return T.exp(T.log_softmax(T.scale(T.as_tensor(logits), 1.0 / tau)))


def kd_loss(student_logits: T.Tensor, teacher_logits, tau: float = 4.0) -> T.Tensor:
    """Batch mean of (1/n) * sum_i tau^2 * p_t,i * (log p_t,i - log p_s,i).

    The 1/n class-count factor is part of the definition, so this is the usual
    tau^2-scaled KL divergence divided by the number of classes.
    """
    teacher_logits = _const(teacher_logits)
    if student_logits.shape != teacher_logits.shape:
        raise ValueError(f"logit shapes differ: {student_logits.shape} vs {teacher_logits.shape}")
    if tau <= 0:
        raise ValueError("temperature must be positive")
    n_classes = student_logits.shape[-1]
    log_pt = T.log_softmax(T.scale(teacher_logits, 1.0 / tau)).data
    pt = np.exp(log_pt)
    log_ps = T.log_softmax(T.scale(student_logits, 1.0 / tau))
    per_class = T.Tensor(pt) * (T.Tensor(log_pt) - log_ps)
    per_sample = T.sum(per_class, axes=-1)
    return T.scale(T.mean(per_sample), tau * tau / n_classes)


def _check_spatial(a: T.Tensor, b: T.Tensor) -> None:
    if a.shape[0] != b.shape[0] or a.shape[2:] != b.shape[2:]:
        raise ValueError(f"student features {a.shape} and teacher features {b.shape} differ spatially")


def at_loss(student_features: T.Tensor, student_head: T.Tensor, teacher_features,
            teacher_head, targets, metric: str = "l1") -> T.Tensor:
    """Distance between normalised student and teacher CAMs of the target class."""
    teacher_features, teacher_head = _const(teacher_features), _const(teacher_head)
    _check_spatial(student_features, teacher_features)
    cam_s = maps.normalize_batch(maps.cam_batch(student_features, student_head, targets))
    cam_t = maps.normalize_batch(maps.cam_batch(teacher_features, teacher_head, targets))
    return T.mean(maps.distance_batch(cam_s, _const(cam_t), metric))


def ccm_loss(student_features: T.Tensor, teacher_features, teacher_head, targets) -> T.Tensor:
    """l1 distance between normalised student CAAM and normalised teacher target-class CAM."""
    teacher_features, teacher_head = _const(teacher_features), _const(teacher_head)
    _check_spatial(student_features, teacher_features)
    caam_s = maps.normalize_batch(maps.caam_batch(student_features))
    cam_t = maps.normalize_batch(maps.cam_batch(teacher_features, teacher_head, targets))
    return T.mean(maps.distance_batch(caam_s, _const(cam_t), "l1"))


def distill_total(l_ce, l_kd, distill_term, beta: float, gamma: float):
    """beta * l_ce + (1 - beta) * l_kd + gamma * distill_term."""
    if isinstance(l_ce, T.Tensor):
        total = T.scale(l_ce, beta) + T.scale(T.as_tensor(l_kd), 1.0 - beta)
        if gamma and distill_term is not None:
            total = total + T.scale(T.as_tensor(distill_term), gamma)
        return total
    return beta * l_ce + (1.0 - beta) * l_kd + (gamma * distill_term if distill_term is not None else 0.0)
