from __future__ import annotations

from collections.abc import Iterator

import numpy as np

from .layers import Layer
from .parameter import Parameter


class Sequential:
    """An ordered stack of layers run front to back (and back to front for gradients)."""

    def __init__(self, layers: list[Layer] | None = None):
        self.layers: list[Layer] = list(layers or [])

    def __len__(self) -> int:
        return len(self.layers)

    def __iter__(self) -> Iterator[Layer]:
        return iter(self.layers)

    def __getitem__(self, i):
        return self.layers[i]

    def forward(self, x: np.ndarray) -> np.ndarray:
        for layer in self.layers:
            x = layer.forward(x)
        return x

    __call__ = forward

    def backward(self, grad: np.ndarray) -> np.ndarray:
        for layer in reversed(self.layers):
            grad = layer.backward(grad)
        return grad

    def named_parameters(self, prefix: str = "") -> list[tuple[str, Parameter]]:
        out = []
        for i, layer in enumerate(self.layers):
            for p in layer.params:
                out.append((f"{prefix}{i}.{p.name}", p))
        return out

    def parameters(self) -> list[Parameter]:
        return [p for layer in self.layers for p in layer.params]

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def astype(self, dtype) -> "Sequential":
        for layer in self.layers:
            layer.astype(dtype)
        return self

    def output_shape(self, in_shape: tuple[int, ...]) -> tuple[int, ...]:
        shape = tuple(in_shape)
        for layer in self.layers:
            shape = layer.output_shape(shape)
        return shape

    def describe(self, in_shape: tuple[int, ...], prefix: str = "") -> list[dict]:
        """Per-layer record of kind, settings, shapes and parameter counts."""
        rows = []
        shape = tuple(in_shape)
        for i, layer in enumerate(self.layers):
            out = layer.output_shape(shape)
            rows.append({
                "name": f"{prefix}{i}",
                "kind": layer.kind,
                "hyper": layer.hyper,
                "input_shape": list(shape),
                "output_shape": list(out),
                "parameters": {p.name: list(p.shape) for p in layer.params},
                "parameter_count": int(sum(p.size for p in layer.params)),
            })
            shape = out
        return rows

    def kink_signature(self) -> list[np.ndarray]:
        return [s for s in (layer.kink_state() for layer in self.layers) if s is not None]
