from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable

import numpy as np

from .errors import ConfigurationError, TrainingDiverged
from .tensor import Tensor


@dataclass
class RmsPropState:
    learning_rate: float = 1e-4
    alpha: float = 0.99
    eps: float = 1e-8
    accumulators: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ConfigurationError(f"learning rate must be positive, got {self.learning_rate}")
        if not 0 < self.alpha < 1:
            raise ConfigurationError(f"alpha must lie in (0, 1), got {self.alpha}")


def rmsprop_step(params: dict[str, Tensor], grads: dict[str, np.ndarray] | None, state: RmsPropState) -> None:
    """In-place rmsprop update.

    ``grads`` defaults to each parameter's own ``.grad`` buffer.  Raises
    :class:`TrainingDiverged` before touching anything if a gradient is not finite.
    """
    if grads is None:
        grads = {name: p.grad for name, p in params.items()}
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise TrainingDiverged(f"non-finite gradient in parameter {name!r}")
    lr, alpha, eps = state.learning_rate, state.alpha, state.eps
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ConfigurationError(f"gradient for {name!r} has shape {g.shape}, parameter {p.shape}")
        acc = state.accumulators.get(name)
        if acc is None:
            acc = state.accumulators[name] = np.zeros_like(p.data)
        acc *= alpha
        acc += (1 - alpha) * g * g
        p.data -= (lr * g / (np.sqrt(acc) + eps)).astype(p.data.dtype, copy=False)


class RmsProp:
    """Thin stateful wrapper used by the training loop."""

    def __init__(self, named_params: Iterable[tuple[str, Tensor]], learning_rate=1e-4, alpha=0.99, eps=1e-8):
        self.params = dict(named_params)
        self.state = RmsPropState(learning_rate, alpha, eps)

    @property
    def learning_rate(self) -> float:
        return self.state.learning_rate

    @learning_rate.setter
    def learning_rate(self, value: float) -> None:
        if not value > 0:
            raise ConfigurationError(f"learning rate must be positive, got {value}")
        self.state.learning_rate = value

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    def step(self) -> None:
        rmsprop_step(self.params, None, self.state)


@dataclass(frozen=True)
class StepSchedule:
    """Piecewise-constant learning rate.  Epochs are 1-based: with
    ``drop_epochs=(15, 30)`` epochs 1-15 use the initial rate, 16-30 one drop,
    31+ two drops."""

    initial: float
    drop_epochs: tuple[int, ...] = ()
    factor: float = 0.1

    def lr_at(self, epoch: int) -> float:
        drops = sum(1 for e in self.drop_epochs if epoch > e)
        # divide by the integer-valued reciprocal so 1e-4 -> 1e-5 -> 1e-6 stay exact
        return self.initial / (1.0 / self.factor) ** drops

    @property
    def final(self) -> float:
        return self.lr_at(10 ** 9)
