"""Bias-corrected Adam over named parameter collections."""

import numpy as np

from . import kernels


class Adam:
    """Standard Adam. Moment arrays mirror each parameter's shape; the
    step count increases by one per ``step()`` and gradients are left
    untouched."""

    def __init__(self, named_params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        if isinstance(named_params, dict):
            named_params = named_params.items()
        self.params = [(name, p) for name, p in named_params]
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step_count = 0
        self._m = [np.zeros_like(p.data) for _, p in self.params]
        self._v = [np.zeros_like(p.data) for _, p in self.params]

    def step(self):
        self.step_count += 1
        for (name, p), m, v in zip(self.params, self._m, self._v):
            if p.grad is None:
                raise ValueError(f"adam: parameter {name!r} has no gradient")
            grad = np.ascontiguousarray(p.grad, dtype=p.data.dtype).reshape(-1)
            kernels.adam_update(
                p.data.reshape(-1), grad, m.reshape(-1), v.reshape(-1),
                self.lr, self.beta1, self.beta2, self.eps, self.step_count,
            )

    def zero_grad(self):
        for _, p in self.params:
            p.grad = None
