"""Parameter updates, cosine-decay schedule, and plateau-triggered reduction."""

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import MissingGradient


@dataclass
class CosineSchedule:
    lr0: float
    lr_min: float = 0.0
    total_steps: int = 1

    def __post_init__(self):
        if not 0 <= self.lr_min <= self.lr0:
            raise ValueError("need 0 <= lr_min <= lr0")
        if self.total_steps < 1:
            raise ValueError("total_steps must be >= 1")


def cosine_lr(s, t):
    """lr(t) = lr_min + (lr0 - lr_min) * (1 + cos(pi t / T)) / 2, clamped
    to lr_min past the horizon."""
    if t < 0:
        raise ValueError("step index must be non-negative")
    if t > s.total_steps:
        return s.lr_min
    return s.lr_min + (s.lr0 - s.lr_min) * 0.5 * (1.0 + math.cos(math.pi * t / s.total_steps))


@dataclass
class PlateauReducer:
    """Multiplies the learning rate by `factor` after `patience` epochs
    without validation-loss improvement; never drops below min_lr."""

    factor: float = 0.1
    patience: int = 3
    min_lr: float = 1e-6
    min_delta: float = 0.0
    best_loss: float = math.inf
    wait: int = 0

    def __post_init__(self):
        if not 0 < self.factor < 1:
            raise ValueError("factor must lie in (0, 1)")
        if self.patience < 1:
            raise ValueError("patience must be >= 1")

    def update(self, epoch_val_loss):
        """Returns True when a reduction fires this epoch."""
        if epoch_val_loss < self.best_loss - self.min_delta:
            self.best_loss = epoch_val_loss
            self.wait = 0
            return False
        self.wait += 1
        if self.wait == self.patience:
            self.wait = 0
            return True
        return False


def plateau_update(r, epoch_val_loss, current_lr):
    """Feed one epoch's validation loss; returns the (possibly reduced) lr."""
    if r.update(epoch_val_loss):
        return max(current_lr * r.factor, r.min_lr)
    return current_lr


@dataclass
class OptimizerState:
    """sgd_momentum or adam_like update rule over a model's trainable groups.

    Moment accumulators are keyed by parameter identity and mirror each
    parameter's shape; frozen parameters are never touched.
    """

    rule: str = "adam_like"
    base_lr: float = 1e-3
    current_lr: float = 1e-3
    momentum: float = 0.9
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step_count: int = 0
    slots: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.rule not in ("sgd_momentum", "adam_like"):
            raise ValueError(f"unknown rule {self.rule!r}")
        if self.base_lr <= 0 or self.current_lr <= 0:
            raise ValueError("learning rates must be positive")

    def _slot(self, param, name):
        key = (id(param), name)
        if key not in self.slots:
            self.slots[key] = np.zeros_like(param.data)
        return self.slots[key]


def apply_step(opt, model):
    """One update over every trainable parameter; clears their gradients.

    Raises MissingGradient if a trainable parameter has no gradient (i.e.
    backward was not run or the parameter is unreachable from the loss).
    """
    opt.step_count += 1
    t = opt.step_count
    lr = opt.current_lr
    for group in model.parameter_groups():
        for tensor in group.tensors.values():
            if not tensor.requires_grad:
                continue
            if tensor.grad is None:
                raise MissingGradient(f"no gradient for {group.name}")
            g = tensor.grad
            if opt.rule == "sgd_momentum":
                if opt.momentum != 0.0:
                    v = opt._slot(tensor, "v")
                    v *= opt.momentum
                    v += g
                    tensor.data -= (lr * v).astype(tensor.data.dtype)
                else:
                    tensor.data -= (lr * g).astype(tensor.data.dtype)
            else:  # adam_like
                m = opt._slot(tensor, "m")
                v = opt._slot(tensor, "v")
                m *= opt.beta1
                m += (1.0 - opt.beta1) * g
                v *= opt.beta2
                v += (1.0 - opt.beta2) * (g * g)
                mhat = m / (1.0 - opt.beta1**t)
                vhat = v / (1.0 - opt.beta2**t)
                tensor.data -= (lr * mhat / (np.sqrt(vhat) + opt.eps)).astype(
                    tensor.data.dtype
                )
            tensor.grad = None
