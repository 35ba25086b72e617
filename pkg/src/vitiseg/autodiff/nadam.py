"""Nadam (Adam with Nesterov momentum) over a list of Parameters.

Uses the constant-momentum form of the update:

    m_t   = b1 m + (1 - b1) g
    v_t   = b2 v + (1 - b2) g^2
    m_hat = b1 m_t / (1 - b1^(t+1)) + (1 - b1) g / (1 - b1^t)
    v_hat = v_t / (1 - b2^t)
    w    -= lr m_hat / (sqrt(v_hat) + eps)

Weight decay is classic L2 coupling: ``g = grad + weight_decay * w`` before
the moment updates (not decoupled AdamW-style decay).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from ..errors import ConfigError
from .tensor import Parameter


@dataclass
class NadamState:
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    t: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)

    @classmethod
    def for_params(cls, params: Sequence[Parameter], **kwargs) -> "NadamState":
        state = cls(**kwargs)
        state.m = [np.zeros_like(p.data) for p in params]
        state.v = [np.zeros_like(p.data) for p in params]
        return state


def nadam_step(params: Sequence[Parameter], state: NadamState, lr: float, weight_decay: float = 0.0) -> None:
    """Apply one update in place and advance ``state.t``.

    Frozen parameters are skipped so weight decay cannot move them.
    """
    if lr < 0:
        raise ConfigError(f"learning rate must be non-negative, got {lr}")
    if not state.m:
        state.m = [np.zeros_like(p.data) for p in params]
        state.v = [np.zeros_like(p.data) for p in params]
    if len(state.m) != len(params):
        raise ConfigError("Nadam state was built for a different parameter list")
    state.t += 1
    t = state.t
    b1, b2, eps = state.beta1, state.beta2, state.epsilon
    bias1_next = 1.0 - b1 ** (t + 1)
    bias1 = 1.0 - b1 ** t
    bias2 = 1.0 - b2 ** t
    for i, p in enumerate(params):
        if not p.trainable:
            continue
        g = p.grad
        if weight_decay:
            g = g + weight_decay * p.data
        m = state.m[i] = b1 * state.m[i] + (1.0 - b1) * g
        v = state.v[i] = b2 * state.v[i] + (1.0 - b2) * g * g
        m_hat = b1 * m / bias1_next + (1.0 - b1) * g / bias1
        v_hat = v / bias2
        p.data = (p.data - lr * m_hat / (np.sqrt(v_hat) + eps)).astype(p.data.dtype, copy=False)
