"""Adam with a staircase learning-rate schedule."""

from __future__ import annotations

import numpy as np


class Adam:
    """Adam over a name-keyed parameter dict, updated in place.

    The learning rate follows a staircase schedule: after every
    ``decay_every`` steps it is multiplied by ``decay_rate``.  Keys absent
    from a step's gradient dict are left untouched (their moments do not
    advance), which keeps updates deterministic when a parameter does not
    appear in an episode's graph.
    """

    def __init__(
        self,
        params: dict[str, np.ndarray],
        lr: float,
        beta1: float = 0.9,
        beta2: float = 0.999,
        eps: float = 1e-8,
        decay_rate: float = 1.0,
        decay_every: int = 1,
    ):
        self.params = params
        self.lr = float(lr)
        self.beta1 = float(beta1)
        self.beta2 = float(beta2)
        self.eps = float(eps)
        self.decay_rate = float(decay_rate)
        self.decay_every = int(decay_every)
        self.step_count = 0
        self._m = {k: np.zeros_like(v) for k, v in params.items()}
        self._v = {k: np.zeros_like(v) for k, v in params.items()}
        self._t = {k: 0 for k in params}

    def current_lr(self) -> float:
        return self.lr * self.decay_rate ** (self.step_count // self.decay_every)

    def step(self, grads: dict[str, np.ndarray]) -> None:
        lr = self.current_lr()
        self.step_count += 1
        for name, p in self.params.items():
            g = grads.get(name)
            if g is None:
                continue
            self._t[name] += 1
            t = self._t[name]
            m = self._m[name]
            v = self._v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            m_hat = m / (1.0 - self.beta1**t)
            v_hat = v / (1.0 - self.beta2**t)
            p -= lr * m_hat / (np.sqrt(v_hat) + self.eps)
