"""Adam optimizer over a named parameter collection."""

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigurationError, DimensionError


@dataclass
class AdamState:
    """Per-parameter moment buffers plus the shared step counter and hyperparameters."""

    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    k: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.lr <= 0:
            raise ConfigurationError(f"adam: learning rate must be positive, got {self.lr}")


def adam_step(params, grads, state):
    """One bias-corrected Adam update, in place on `params`.

    `params` maps name -> Tensor, `grads` maps name -> ndarray (None entries
    decay the moments without moving the parameter).  Increments state.k.
    """
    state.k += 1
    bc1 = 1.0 - state.beta1 ** state.k
    bc2 = 1.0 - state.beta2 ** state.k
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        elif g.shape != p.data.shape:
            raise DimensionError(f"adam: grad shape {g.shape} != param {p.data.shape} for {name!r}")
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        mhat = m / bc1
        vhat = v / bc2
        p.data -= (state.lr * mhat / (np.sqrt(vhat) + state.eps)).astype(p.data.dtype)
