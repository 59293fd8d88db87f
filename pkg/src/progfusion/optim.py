"""Adaptive-moment gradient descent over named parameter tensors."""

from __future__ import annotations

import numpy as np

from .errors import ContractError
from .tensor import Tensor


class Adam:
    """Standard Adam. State is keyed by parameter identity, so the same
    optimizer instance must be fed the same parameter set every step.
    """

    def __init__(self, params: dict[str, Tensor], lr: float = 1e-3,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        if not params:
            raise ContractError("optimizer needs at least one parameter")
        self.params = dict(params)
        self.lr = float(lr)
        self.beta1, self.beta2, self.eps = float(beta1), float(beta2), float(eps)
        self.t = 0
        self._m = {name: np.zeros_like(p.data) for name, p in self.params.items()}
        self._v = {name: np.zeros_like(p.data) for name, p in self.params.items()}

    @property
    def parameter_count(self) -> int:
        return len(self.params)

    def step(self, grads: dict[Tensor, np.ndarray]) -> None:
        """Apply one update using a gradient map from ``backward``.

        Parameters absent from the map keep their value (zero gradient).
        """
        self.t += 1
        b1t = 1.0 - self.beta1**self.t
        b2t = 1.0 - self.beta2**self.t
        for name, p in self.params.items():
            g = grads.get(p)
            if g is None:
                continue
            m = self._m[name]
            v = self._v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            update = (self.lr / b1t) * m / (np.sqrt(v / b2t) + self.eps)
            p.data -= update.astype(p.data.dtype, copy=False)
