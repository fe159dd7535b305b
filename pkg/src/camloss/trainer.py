"""Training loops: split head/backbone updates for the CAM loss, distillation, evaluation."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import data as D
from . import losses as L
from . import maps
from . import network as N
from . import tensor as T

log = logging.getLogger(__name__)

CE = "ce"
CAMLOSS = "camloss"


class TrainingDiverged(FloatingPointError):
    pass


@dataclass
class TrainConfig:
    epochs: int = 40
    batch_size: int = 64
    lr: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 5e-4
    alpha: L.AlphaSchedule = field(default_factory=L.AlphaSchedule)
    seed: int = 0
    loss: str = CAMLOSS
    detach_cam_target: bool = False
    augment: bool = True

    def validate(self) -> None:
        if self.epochs < 1:
            raise ValueError("epochs must be at least 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be at least 1")
        if not self.lr > 0:
            raise ValueError("initial learning rate must be positive")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must lie in [0, 1)")
        if self.weight_decay < 0:
            raise ValueError("weight decay must be non-negative")
        if self.loss not in (CE, CAMLOSS):
            raise ValueError(f"unknown loss mode {self.loss!r}")


@dataclass
class EpochMetrics:
    epoch: int
    lr: float
    alpha: float
    loss_ce: float
    loss_cam: float
    train_acc: float
    test_acc: float


def cosine_lr(epoch: int, epochs: int, lr0: float) -> float:
    if not 0 <= epoch < epochs:
        raise ValueError(f"epoch {epoch} outside [0, {epochs})")
    return lr0 * 0.5 * (1.0 + math.cos(math.pi * epoch / epochs))


class SGD:
    """Momentum SGD with L2 weight decay folded into the gradient.

    v <- momentum * v + (g + weight_decay * p);  p <- p - lr * v
    """

    def __init__(self, momentum: float = 0.9, weight_decay: float = 5e-4):
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocity: dict[str, np.ndarray] = {}

    def step(self, params: dict[str, T.Tensor], lr: float) -> None:
        for name, p in params.items():
            if not p.requires_grad:
                continue
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            p.data, self.velocity[name] = sgd_step(
                p.data, g, self.velocity.get(name), lr, self.momentum, self.weight_decay
            )


def sgd_step(param: np.ndarray, grad: np.ndarray, velocity: np.ndarray | None, lr: float,
             momentum: float, weight_decay: float) -> tuple[np.ndarray, np.ndarray]:
    """One momentum step; returns (new param, new velocity)."""
    if grad.shape != param.shape:
        raise ValueError(f"gradient shape {grad.shape} does not match parameter {param.shape}")
    dt = param.dtype.type
    d = grad + dt(weight_decay) * param
    v = d if velocity is None else dt(momentum) * velocity + d
    return param - dt(lr) * v, v


def _finite(name: str, value: T.Tensor) -> float:
    v = float(value.data)
    if not math.isfinite(v):
        raise TrainingDiverged(f"non-finite {name} ({v}); lower the learning rate or alpha")
    return v


def train_step_camloss(net: N.Network, images: np.ndarray, targets: np.ndarray, alpha: float,
                       lr: float, optimizer: SGD, detach_cam_target: bool = False,
                       use_cam: bool = True) -> dict:
    """One split update.

    The head receives the gradient of cross entropy only; the backbone receives
    the gradient of cross entropy + alpha * L_cam. Both are produced by one
    backward sweep and applied by a single optimizer step.
    """
    net.zero_grad()
    with T.Tape() as tape:
        out = N.forward(net, images)
        l_ce = L.cross_entropy(out.logits, targets)
        terms = [(l_ce, ())]
        if use_cam and alpha > 0:
            l_cam = L.cam_term(out.features, net.head, targets, detach_cam_target)
            terms.append((T.scale(l_cam, alpha), N.parameters(net, N.HEAD)))
        else:
            with T.no_tape():
                l_cam = L.cam_term(out.features, net.head, targets, detach_cam_target)
    ce, cam = _finite("cross entropy", l_ce), _finite("L_cam", l_cam)
    T.backward_terms(tape, terms)
    optimizer.step(net.params, lr)
    correct = int((out.logits.data.argmax(axis=1) == targets).sum())
    return {"loss_ce": ce, "loss_cam": cam, "correct": correct}


def _epoch_images(ds: D.Dataset, idx: np.ndarray, seed: int, epoch: int, augment: bool) -> np.ndarray:
    if augment:
        return D.augment_batch(ds, idx, seed, epoch)
    return ds.images[idx]


def train(net: N.Network, train_set: D.Dataset, test_set: D.Dataset | None, config: TrainConfig,
          on_epoch: Callable[[EpochMetrics, N.Network], None] | None = None):
    """Full run: seeded shuffling, cosine learning rate, alpha schedule per epoch.

    An adaptive schedule's trigger is cleared at the start and, after the run,
    holds the epoch at which alpha switched on (``config.alpha.triggered_epoch``).
    """
    config.validate()
    if len(train_set) == 0:
        raise ValueError("empty training set")
    optimizer = SGD(config.momentum, config.weight_decay)
    schedule = config.alpha
    schedule.triggered_epoch = None
    history: list[EpochMetrics] = []
    prev_acc = None
    for epoch in range(config.epochs):
        a = schedule(epoch, prev_acc) if config.loss == CAMLOSS else 0.0
        lr = cosine_lr(epoch, config.epochs, config.lr)
        sums = {"loss_ce": 0.0, "loss_cam": 0.0, "correct": 0}
        for idx in D.batches(len(train_set), config.batch_size, epoch, config.seed):
            images = _epoch_images(train_set, idx, config.seed, epoch, config.augment)
            step = train_step_camloss(
                net, images, train_set.labels[idx], a, lr, optimizer,
                config.detach_cam_target, use_cam=config.loss == CAMLOSS,
            )
            sums["loss_ce"] += step["loss_ce"] * len(idx)
            sums["loss_cam"] += step["loss_cam"] * len(idx)
            sums["correct"] += step["correct"]
        n = len(train_set)
        prev_acc = sums["correct"] / n
        test_acc = accuracy(net, test_set) if test_set is not None else float("nan")
        m = EpochMetrics(epoch, lr, a, sums["loss_ce"] / n, sums["loss_cam"] / n, prev_acc, test_acc)
        history.append(m)
        log.info("epoch %d lr %.4f alpha %.2f ce %.4f cam %.4f train %.3f test %.3f",
                 epoch, lr, a, m.loss_ce, m.loss_cam, m.train_acc, m.test_acc)
        if on_epoch is not None:
            on_epoch(m, net)
    return net, history


def distill_train(teacher: N.Network, student: N.Network, train_set: D.Dataset,
                  test_set: D.Dataset | None, config: TrainConfig, distill: L.DistillConfig,
                  on_epoch: Callable[[EpochMetrics, N.Network], None] | None = None):
    """Train ``student`` on beta*CE + (1-beta)*KD + gamma*(AT or CCM term) against a frozen teacher.

    Every student parameter gets the full objective's gradient; there is no
    head/backbone split here.
    """
    config.validate()
    if len(train_set) == 0:
        raise ValueError("empty training set")
    t_size = teacher.config.spatial_sizes()[-1]
    s_size = student.config.spatial_sizes()[-1]
    if t_size != s_size:
        raise ValueError(f"teacher maps are {t_size}x{t_size}, student maps {s_size}x{s_size}")
    teacher = teacher.frozen()
    optimizer = SGD(config.momentum, config.weight_decay)
    history: list[EpochMetrics] = []
    for epoch in range(config.epochs):
        lr = cosine_lr(epoch, config.epochs, config.lr)
        sums = {"loss_ce": 0.0, "loss_cam": 0.0, "correct": 0}
        for idx in D.batches(len(train_set), config.batch_size, epoch, config.seed):
            images = _epoch_images(train_set, idx, config.seed, epoch, config.augment)
            targets = train_set.labels[idx]
            with T.no_tape():
                t_out = N.forward(teacher, images)
            student.zero_grad()
            with T.Tape() as tape:
                s_out = N.forward(student, images)
                l_ce = L.cross_entropy(s_out.logits, targets)
                l_kd = L.kd_loss(s_out.logits, t_out.logits, distill.tau)
                term = None
                if distill.method == L.AT:
                    term = L.at_loss(s_out.features, student.head, t_out.features, teacher.head,
                                     targets, distill.at_metric)
                elif distill.method == L.CCM:
                    term = L.ccm_loss(s_out.features, t_out.features, teacher.head, targets)
                total = L.distill_total(l_ce, l_kd, term, distill.beta, distill.gamma)
            _finite("distillation loss", total)
            T.backward(tape, total)
            optimizer.step(student.params, lr)
            with T.no_tape():
                l_cam = L.cam_term(s_out.features, student.head, targets)
            sums["loss_ce"] += float(l_ce.data) * len(idx)
            sums["loss_cam"] += float(l_cam.data) * len(idx)
            sums["correct"] += int((s_out.logits.data.argmax(axis=1) == targets).sum())
        n = len(train_set)
        test_acc = accuracy(student, test_set) if test_set is not None else float("nan")
        m = EpochMetrics(epoch, lr, 0.0, sums["loss_ce"] / n, sums["loss_cam"] / n,
                         sums["correct"] / n, test_acc)
        history.append(m)
        log.info("distill[%s] epoch %d lr %.4f ce %.4f train %.3f test %.3f",
                 distill.method, epoch, lr, m.loss_ce, m.train_acc, m.test_acc)
        if on_epoch is not None:
            on_epoch(m, student)
    return student, history


def accuracy(net: N.Network, ds: D.Dataset, batch_size: int = 250) -> float:
    """Top-1 accuracy from a tape-free forward pass."""
    correct = 0
    with T.no_tape():
        for start in range(0, len(ds), batch_size):
            stop = min(len(ds), start + batch_size)
            logits = N.forward(net, ds.images[start:stop]).logits.data
            correct += int((logits.argmax(axis=1) == ds.labels[start:stop]).sum())
    return correct / len(ds)


def evaluate(net: N.Network, ds: D.Dataset, batch_size: int = 250, threshold: float = 0.5) -> dict:
    """Accuracy, mean CE, mean L_cam and, when the dataset has masks, mean CAAM-mask IoU.

    The normalised CAAM is upsampled bilinearly to image size before thresholding.
    """
    if len(ds) == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    n = len(ds)
    correct = 0
    ce_sum = cam_sum = iou_sum = 0.0
    size = ds.images.shape[-1]
    with T.no_tape():
        for start in range(0, n, batch_size):
            idx = np.arange(start, min(n, start + batch_size))
            targets = ds.labels[idx]
            out = N.forward(net, ds.images[idx])
            correct += int((out.logits.data.argmax(axis=1) == targets).sum())
            ce_sum += float(L.cross_entropy(out.logits, targets).data) * len(idx)
            caam, cam = L.cam_maps(out.features, net.head, targets)
            cam_sum += float(T.mean(maps.distance_batch(caam, cam)).data) * len(idx)
            if ds.masks is not None:
                up = maps.upsample_bilinear(caam.data, size)
                for j, i in enumerate(idx):
                    iou_sum += maps.threshold_iou(up[j], ds.masks[i], threshold)
    result = {"accuracy": correct / n, "loss_ce": ce_sum / n, "loss_cam": cam_sum / n}
    if ds.masks is not None:
        result["iou"] = iou_sum / n
    return result
