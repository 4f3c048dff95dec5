from __future__ import annotations

import numpy as np

from ..errors import NumericError
from .parameter import Parameter


class Adam:
    """Adam with bias correction.

    Moments live on each :class:`Parameter`, so a parameter that is left out
    of ``params`` is never touched.
    """

    def __init__(self, params: list[Parameter], lr: float = 1e-3, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        if lr <= 0:
            raise ValueError(f"learning rate must be positive, got {lr}")
        if not (0 <= beta1 < 1 and 0 <= beta2 < 1):
            raise ValueError(f"betas must lie in [0, 1), got {beta1}, {beta2}")
        self.params = list(params)
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()

    def step(self) -> None:
        adam_step(self.params, self.lr, self.beta1, self.beta2, self.eps)


def adam_step(params: list[Parameter], lr: float = 1e-3, beta1: float = 0.9,
              beta2: float = 0.999, eps: float = 1e-8) -> None:
    bad = [(p.name or f"#{i}", int(np.count_nonzero(~np.isfinite(p.grad))))
           for i, p in enumerate(params) if not np.all(np.isfinite(p.grad))]
    if bad:
        detail = ", ".join(f"{name} ({n} non-finite)" for name, n in bad)
        raise NumericError(f"non-finite gradient, training aborted: {detail}")
    # compute every update before committing any, so a failure leaves params intact
    updates = []
    with np.errstate(over="ignore"):
        for p in params:
            t = p.step_count + 1
            m = beta1 * p.m + (1 - beta1) * p.grad
            v = beta2 * p.v + (1 - beta2) * (p.grad * p.grad)
            if not (np.all(np.isfinite(m)) and np.all(np.isfinite(v))):
                raise NumericError(f"Adam moments overflowed for {p.name or 'a parameter'}, training aborted")
            step = lr * (m / (1 - beta1 ** t)) / (np.sqrt(v / (1 - beta2 ** t)) + eps)
            updates.append((p, m, v, step))
    for p, m, v, step in updates:
        p.m, p.v = m, v
        p.step_count += 1
        p.value -= step.astype(p.value.dtype, copy=False)
