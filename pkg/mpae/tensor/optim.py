import dataclasses
import typing as t

import numpy as np

from mpae.exceptions import ConfigError, UsageError
from mpae.tensor import Parameter


@dataclasses.dataclass
class AdamState:
    """Adam with coupled L2 weight decay (decay is added to the gradient).

    Attributes
    ----------
    lr : float
        Step size.
    beta1, beta2 : float
        Decay rates of the first and second moment estimates.
    eps : float
        Added to the root of the second moment estimate.
    weight_decay : float
        L2 coefficient added to the gradient as ``weight_decay * w``.
    t : int
        Number of steps taken.
    m, v : dict[str, np.ndarray]
        Moment estimates keyed by parameter name, created on first use.
    """

    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    t: int = 0
    m: dict[str, np.ndarray] = dataclasses.field(default_factory=dict, repr=False)
    v: dict[str, np.ndarray] = dataclasses.field(default_factory=dict, repr=False)

    def __post_init__(self):
        if self.lr < 0:
            raise ConfigError(f"Learning rate must be non-negative, got {self.lr}")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ConfigError(f"Adam betas must lie in [0, 1), got {self.beta1}, {self.beta2}")


def adam_step(params: t.Iterable[Parameter], state: AdamState) -> AdamState:
    params = [p for p in params if p.trainable]
    missing = [p.name for p in params if p.grad is None]
    if missing:
        raise UsageError(f"Missing gradient for parameters: {', '.join(missing)}")

    state.t += 1
    b1, b2 = state.beta1, state.beta2
    bias1 = 1 - b1**state.t
    bias2 = 1 - b2**state.t
    for p in params:
        g = p.grad
        if state.weight_decay:
            g = g + state.weight_decay * p.data
        m = state.m.get(p.name)
        v = state.v.get(p.name)
        if m is None:
            m = np.zeros_like(p.data)
            v = np.zeros_like(p.data)
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        state.m[p.name] = m
        state.v[p.name] = v
        update = state.lr * (m / bias1) / (np.sqrt(v / bias2) + state.eps)
        p.data -= update.astype(p.dtype)
    return state
