"""Deterministic training loop: momentum SGD with weight decay and step decay.

Gradients accumulate over a batch of per-image graphs, the optimizer applies
one update per batch, and everything (shuffling, init, updates) is driven by
the config seed, so a rerun reproduces checkpoints and loss curves bitwise.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .balanced_loss import DCLossParams
from .detector import DetectorConfig, DetectorModel, assign_image
from .evaluation import EvalResult, evaluate_ap
from .tensor import Tensor, scale

__all__ = ["TrainConfig", "TrainResult", "DivergenceError", "SGDMomentum",
           "train", "evaluate_model"]


@dataclass
class TrainConfig:
    learning_rate: float = 0.005
    momentum: float = 0.9
    weight_decay: float = 1e-4
    epochs: int = 12
    decay_epochs: tuple = (8, 11)
    decay_factor: float = 0.1
    batch_size: int = 4
    grad_scale: float = 16.0  # loss multiplier for backward only; curves stay unscaled
    reg_loss: str = "smooth_l1"  # smooth_l1 | dcloss | dcloss_swapped
    dc_k: float = 10.0
    dc_delta: float = 0.15
    dc_learnable: bool = False
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.learning_rate <= 0:
            raise ValueError("learning rate must be positive")
        if self.reg_loss not in ("smooth_l1", "dcloss", "dcloss_swapped"):
            raise ValueError(f"unknown regression loss {self.reg_loss!r}")


@dataclass
class TrainResult:
    model: DetectorModel
    loss_curve: list          # per-epoch dicts: epoch, cls, reg, total, lr
    first_batch_components: tuple  # (cls, reg) of the very first batch
    dc_params: DCLossParams | None


class DivergenceError(RuntimeError):
    """Raised when the loss turns non-finite; carries the last good snapshot."""

    def __init__(self, message: str, last_good_state: dict | None):
        super().__init__(message)
        self.last_good_state = last_good_state


class SGDMomentum:
    """v = m*v + g + wd*p; p -= lr*v.  Also updates the loss transition
    parameters when they are learnable, projecting them back to > 0."""

    def __init__(self, tensors, momentum: float = 0.9, weight_decay: float = 0.0,
                 dc_params: DCLossParams | None = None):
        self.tensors = list(tensors)
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocity = [np.zeros_like(t.data) for t in self.tensors]
        self.dc_params = dc_params
        self.dc_velocity = np.zeros(2)

    def step(self, lr: float):
        for t, v in zip(self.tensors, self.velocity):
            if t.grad is None:
                continue
            v *= self.momentum
            v += t.grad + self.weight_decay * t.data
            t.data -= (lr * v).astype(t.data.dtype)
        p = self.dc_params
        if p is not None and p.learnable:
            g = np.array([p.grad_k, p.grad_delta])
            self.dc_velocity = self.momentum * self.dc_velocity + g
            p.k -= lr * self.dc_velocity[0]
            p.delta -= lr * self.dc_velocity[1]
            p.project()


def _snapshot(model: DetectorModel) -> dict:
    return {name: t.data.copy() for name, t in model.store.items()}


def _epoch_lr(cfg: TrainConfig, epoch: int) -> float:
    lr = cfg.learning_rate
    for d in cfg.decay_epochs:
        if epoch > d:
            lr *= cfg.decay_factor
    return lr


def train(scenes, det_cfg: DetectorConfig, cfg: TrainConfig) -> TrainResult:
    """Train a detector on a list of scenes; deterministic for a fixed seed."""
    if not scenes:
        raise ValueError("training dataset is empty")
    model = DetectorModel(det_cfg, seed=cfg.seed)
    dc_params = None
    if cfg.reg_loss in ("dcloss", "dcloss_swapped"):
        dc_params = DCLossParams(k=cfg.dc_k, delta=cfg.dc_delta,
                                 learnable=cfg.dc_learnable,
                                 swap_weights=cfg.reg_loss == "dcloss_swapped")
    opt = SGDMomentum(model.store.tensors(), cfg.momentum, cfg.weight_decay, dc_params)
    assignments = [assign_image(s.gts, s.image.shape[1:], det_cfg) for s in scenes]
    order_rng = np.random.default_rng(cfg.seed)
    curve = []
    first_batch = None
    last_good = _snapshot(model)
    for epoch in range(1, cfg.epochs + 1):
        lr = _epoch_lr(cfg, epoch)
        order = order_rng.permutation(len(scenes))
        sums = np.zeros(3)
        count = 0
        for start in range(0, len(order), cfg.batch_size):
            batch = order[start:start + cfg.batch_size]
            model.store.zero_grad()
            if dc_params is not None:
                dc_params.zero_grad()
            batch_stats = np.zeros(3)
            for idx in batch:
                image = Tensor(scenes[idx].image)
                outputs = model.forward(image)
                total, cls_v, reg_v = model.loss(outputs, assignments[idx],
                                                 cfg.reg_loss, dc_params)
                scaled = scale(total, cfg.grad_scale / len(batch))
                scaled.backward()
                batch_stats += (cls_v, reg_v, float(total.data))
            batch_stats /= len(batch)
            if not np.isfinite(batch_stats).all():
                raise DivergenceError(
                    f"non-finite loss at epoch {epoch}, batch starting {start}: "
                    f"cls={batch_stats[0]}, reg={batch_stats[1]}", last_good)
            if first_batch is None:
                first_batch = (float(batch_stats[0]), float(batch_stats[1]))
            opt.step(lr)
            sums += batch_stats
            count += 1
        last_good = _snapshot(model)
        curve.append({"epoch": epoch, "lr": lr,
                      "cls": float(sums[0] / count),
                      "reg": float(sums[1] / count),
                      "total": float(sums[2] / count)})
    return TrainResult(model=model, loss_curve=curve,
                       first_batch_components=first_batch, dc_params=dc_params)


def evaluate_model(model: DetectorModel, scenes, num_classes: int | None = None) -> EvalResult:
    dets = [model.predict(Tensor(s.image)) for s in scenes]
    gts = [s.gts for s in scenes]
    return evaluate_ap(dets, gts, num_classes=num_classes or model.cfg.num_classes)
