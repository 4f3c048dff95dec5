"""Central finite-difference verification of analytic gradients."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..errors import ConfigurationError
from .loss import mse_loss


@dataclass
class TensorCheck:
    name: str
    checked: int
    skipped: int
    max_rel_error: float
    worst_index: tuple[int, ...] | None
    analytic: float
    numeric: float


@dataclass
class GradcheckResult:
    max_rel_error: float
    tensors: list[TensorCheck] = field(default_factory=list)

    def passed(self, tol: float = 1e-4) -> bool:
        return self.max_rel_error <= tol


def relative_error(analytic: float, numeric: float, floor: float = 1e-7) -> float:
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)


def _same_kinks(a: list[np.ndarray], b: list[np.ndarray]) -> bool:
    return len(a) == len(b) and all(np.array_equal(x, y) for x, y in zip(a, b))


def gradcheck(model, x: np.ndarray, target: np.ndarray, eps: float = 1e-6,
              n_coords: int = 200, seed: int = 0, floor: float = 1e-7,
              check_input: bool = False) -> GradcheckResult:
    """Compare backprop gradients of ``mse_loss(model(x), target)`` with
    central differences on up to ``n_coords`` random coordinates per tensor.

    ``model`` needs ``forward``, ``backward``, ``named_parameters`` and
    ``kink_signature``.  Coordinates whose ±eps perturbation flips a ReLU
    mask or a pooling argmax are skipped and replaced by fresh ones, so the
    check only runs where the loss is differentiable.
    """
    named = model.named_parameters()
    if x.dtype != np.float64 or any(p.value.dtype != np.float64 for _, p in named):
        raise ConfigurationError("gradcheck requires 64-bit model parameters and input")
    rng = np.random.default_rng(seed)

    for _, p in named:
        p.zero_grad()
    pred = model.forward(x)
    base_kinks = [k.copy() for k in model.kink_signature()]
    _, g = mse_loss(pred, target)
    dx = model.backward(g)

    def loss_at() -> tuple[float, list[np.ndarray]]:
        out = model.forward(x)
        return mse_loss(out, target)[0], model.kink_signature()

    tensors = [(name, p.value, p.grad.copy()) for name, p in named]
    if check_input:
        tensors.append(("input", x, dx))

    result = GradcheckResult(max_rel_error=0.0)
    for name, value, analytic in tensors:
        order = rng.permutation(value.size)
        checked = skipped = 0
        worst = TensorCheck(name, 0, 0, 0.0, None, 0.0, 0.0)
        flat = value.reshape(-1)
        for flat_idx in order:
            if checked >= n_coords:
                break
            orig = flat[flat_idx]
            flat[flat_idx] = orig + eps
            f_plus, k_plus = loss_at()
            same = _same_kinks(base_kinks, k_plus)
            flat[flat_idx] = orig - eps
            f_minus, k_minus = loss_at()
            same = same and _same_kinks(base_kinks, k_minus)
            flat[flat_idx] = orig
            if not same:
                skipped += 1
                continue
            numeric = (f_plus - f_minus) / (2 * eps)
            a = float(analytic.reshape(-1)[flat_idx])
            err = relative_error(a, numeric, floor)
            checked += 1
            if err >= worst.max_rel_error:
                worst.max_rel_error = err
                worst.worst_index = tuple(int(i) for i in np.unravel_index(flat_idx, value.shape))
                worst.analytic, worst.numeric = a, numeric
        worst.checked, worst.skipped = checked, skipped
        result.tensors.append(worst)
        result.max_rel_error = max(result.max_rel_error, worst.max_rel_error)
    return result
