"""Optimizers and learning-rate schedules for the training loops."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import Tensor

__all__ = ["OptimizerConfig", "Optimizer", "make_optimizer"]


@dataclass
class OptimizerConfig:
    kind: str = "sgd_momentum"  # sgd_momentum | adam | radam
    learning_rate: float = 1e-2
    momentum: float = 0.1
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    # step decay: lr is divided by `decay_factor` every `decay_every` epochs (0 = off)
    decay_factor: float = 1.0
    decay_every: int = 0

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError("momentum must be in [0, 1)")
        if not (0.0 < self.betas[0] < 1.0 and 0.0 < self.betas[1] < 1.0):
            raise ValueError("betas must be in (0, 1)")
        if self.kind not in ("sgd_momentum", "adam", "radam"):
            raise ValueError(f"unknown optimizer kind '{self.kind}'")

    def lr_at_epoch(self, epoch: int) -> float:
        if self.decay_every <= 0 or self.decay_factor == 1.0:
            return self.learning_rate
        return self.learning_rate / self.decay_factor ** (epoch // self.decay_every)


class Optimizer:
    """Shared state-keeping for the three update rules."""

    def __init__(self, params: dict[str, Tensor], config: OptimizerConfig):
        self.params = params
        self.config = config
        self.lr = config.learning_rate
        self.t = 0
        self._m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self._v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def set_epoch(self, epoch: int) -> None:
        self.lr = self.config.lr_at_epoch(epoch)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    def step(self) -> None:
        self.t += 1
        kind = self.config.kind
        for key in sorted(self.params):
            p = self.params[key]
            if p.grad is None:
                continue
            g = p.grad
            if kind == "sgd_momentum":
                self._m[key] = self.config.momentum * self._m[key] + g
                p.data = p.data - self.lr * self._m[key]
            elif kind == "adam":
                p.data = p.data - self.lr * self._adam_direction(key, g)
            else:
                p.data = p.data - self.lr * self._radam_direction(key, g)

    def _adam_direction(self, key: str, g: np.ndarray) -> np.ndarray:
        b1, b2 = self.config.betas
        self._m[key] = b1 * self._m[key] + (1 - b1) * g
        self._v[key] = b2 * self._v[key] + (1 - b2) * g * g
        m_hat = self._m[key] / (1 - b1**self.t)
        v_hat = self._v[key] / (1 - b2**self.t)
        return m_hat / (np.sqrt(v_hat) + self.config.eps)

    def _radam_direction(self, key: str, g: np.ndarray) -> np.ndarray:
        # rectified Adam: fall back to momentum-only steps while the variance
        # estimate is untrustworthy (small t), then scale by the rectifier
        b1, b2 = self.config.betas
        self._m[key] = b1 * self._m[key] + (1 - b1) * g
        self._v[key] = b2 * self._v[key] + (1 - b2) * g * g
        m_hat = self._m[key] / (1 - b1**self.t)
        rho_inf = 2.0 / (1.0 - b2) - 1.0
        rho = rho_inf - 2.0 * self.t * b2**self.t / (1 - b2**self.t)
        if rho <= 4.0:
            return m_hat
        v_hat = np.sqrt(self._v[key] / (1 - b2**self.t))
        rect = np.sqrt(
            ((rho - 4.0) * (rho - 2.0) * rho_inf) / ((rho_inf - 4.0) * (rho_inf - 2.0) * rho)
        )
        return rect * m_hat / (v_hat + self.config.eps)


def make_optimizer(model_params: dict[str, Tensor], config: OptimizerConfig) -> Optimizer:
    return Optimizer(model_params, config)
