"""Small deterministic optimizers for the training loops."""

import numpy as np


class Adam:
    """Adam over a dict of named arrays; state keyed by parameter name."""

    def __init__(self, beta1=0.9, beta2=0.999, eps=1e-8):
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self._m = {}
        self._v = {}
        self._t = 0

    def step(self, params, grads, lr):
        """Return updated parameters; iteration order follows ``params``."""
        self._t += 1
        b1, b2 = self.beta1, self.beta2
        bias1 = 1.0 - b1 ** self._t
        bias2 = 1.0 - b2 ** self._t
        out = {}
        for name, value in params.items():
            g = grads[name]
            m = self._m.get(name)
            if m is None:
                m = np.zeros_like(value)
                self._v[name] = np.zeros_like(value)
            v = self._v[name]
            m = b1 * m + (1.0 - b1) * g
            v = b2 * v + (1.0 - b2) * (g * g)
            self._m[name] = m
            self._v[name] = v
            out[name] = value - lr * (m / bias1) / (np.sqrt(v / bias2) + self.eps)
        return out
