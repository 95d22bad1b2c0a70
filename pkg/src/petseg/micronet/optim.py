"""SGD with heavy-ball momentum and optional polynomial learning-rate decay."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..errors import ConfigError, ShapeError


@dataclass
class OptimizerState:
    learning_rate: float = 0.01
    momentum: float = 0.99
    poly_decay: bool = False
    poly_exponent: float = 0.9
    max_epochs: int = 1000
    epoch: int = 0
    velocity: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.learning_rate < 0:
            raise ConfigError("learning rate must be non-negative")
        if not 0.0 <= self.momentum < 1.0:
            raise ConfigError("momentum must lie in [0, 1)")

    def current_lr(self) -> float:
        if not self.poly_decay:
            return self.learning_rate
        frac = min(self.epoch, self.max_epochs) / self.max_epochs
        return self.learning_rate * (1.0 - frac) ** self.poly_exponent

    def hyperparameters(self) -> dict:
        return {
            "learning_rate": self.learning_rate,
            "momentum": self.momentum,
            "poly_decay": self.poly_decay,
            "poly_exponent": self.poly_exponent,
            "max_epochs": self.max_epochs,
            "epoch": self.epoch,
        }


def sgd_step(net, grads: dict, opt: OptimizerState):
    """``v <- momentum * v + g``; ``w <- w - lr * v``. Updates ``net`` and ``opt`` in place."""
    lr = opt.current_lr()
    for name, w in net.params.items():
        g = grads[name]
        if g.shape != w.shape:
            raise ShapeError(f"gradient for {name} has shape {g.shape}, weight has {w.shape}")
        v = opt.velocity.get(name)
        if v is None:
            v = np.zeros_like(w)
        v = opt.momentum * v + g.astype(w.dtype, copy=False)
        opt.velocity[name] = v
        w -= lr * v
    return net, opt
