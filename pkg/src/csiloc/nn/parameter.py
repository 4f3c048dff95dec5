from __future__ import annotations

import numpy as np


class Parameter:
    """A trainable array with its gradient accumulator and Adam moments."""

    __slots__ = ("name", "value", "grad", "m", "v", "step_count")

    def __init__(self, value: np.ndarray, name: str = ""):
        value = np.ascontiguousarray(value)
        if value.ndim == 0 or min(value.shape) < 1:
            raise ValueError(f"parameter {name!r} needs a non-empty shape, got {value.shape}")
        self.name = name
        self.value = value
        self.grad = np.zeros_like(value)
        self.m = np.zeros_like(value)
        self.v = np.zeros_like(value)
        self.step_count = 0

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def size(self) -> int:
        return self.value.size

    def zero_grad(self) -> None:
        self.grad.fill(0)

    def reset_state(self) -> None:
        """Drop optimizer moments (used when a model is re-purposed)."""
        self.m.fill(0)
        self.v.fill(0)
        self.step_count = 0

    def astype(self, dtype) -> None:
        self.value = self.value.astype(dtype)
        self.grad = self.grad.astype(dtype)
        self.m = self.m.astype(dtype)
        self.v = self.v.astype(dtype)

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.shape}, dtype={self.value.dtype})"
