"""Adam with bias correction."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import OptimizerDivergenceError, ShapeError


@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    step: int = 0
    first_moment: dict = field(default_factory=dict)
    second_moment: dict = field(default_factory=dict)


def adam_step(params, grads, state, lr):
    """Apply one Adam update in place.

    ``params`` and ``grads`` are dicts keyed by parameter name. Parameters
    missing from ``grads`` are left alone (frozen) and their moments are
    not touched.
    """
    for name, g in grads.items():
        if not np.isfinite(g).all():
            raise OptimizerDivergenceError(f"non-finite gradient for {name}", step=state.step + 1)
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    correction1 = 1.0 - b1 ** t
    correction2 = 1.0 - b2 ** t
    for name, g in grads.items():
        p = params[name]
        if g.shape != p.data.shape:
            raise ShapeError(f"gradient shape {g.shape} != parameter shape {p.data.shape} for {name}")
        m = state.first_moment.get(name)
        v = state.second_moment.get(name)
        if m is None:
            m = np.zeros_like(p.data)
            v = np.zeros_like(p.data)
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * (g * g)
        state.first_moment[name] = m
        state.second_moment[name] = v
        if lr != 0.0:
            update = lr * (m / correction1) / (np.sqrt(v / correction2) + state.epsilon)
            p.data = (p.data - update).astype(p.data.dtype, copy=False)
    return params, state


class Adam:
    """Thin stateful wrapper used by the training loop."""

    def __init__(self, params, beta1=0.9, beta2=0.999, epsilon=1e-8):
        self.params = dict(params)
        self.state = AdamState(beta1, beta2, epsilon)

    def step(self, lr, frozen=()):
        grads = {}
        for name, p in self.params.items():
            if name in frozen:
                continue
            grads[name] = p.grad if p.grad is not None else np.zeros_like(p.data)
        adam_step(self.params, grads, self.state, lr)

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None
