"""Layers with explicit forward/backward passes.

Every layer works on numpy arrays laid out batch-first (``[batch, ...]``,
images as ``[batch, channels, height, width]``).  ``forward`` caches what
``backward`` needs; ``backward`` accumulates parameter gradients and
returns the gradient with respect to the layer input.
"""
from __future__ import annotations

import math

import numpy as np

from ..errors import ConfigurationError, DimensionError, StateError
from .parameter import Parameter


def _fmt(shape) -> str:
    return "[" + ", ".join(str(s) for s in shape) + "]"


def _kaiming_uniform(rng: np.random.Generator, shape, fan_in: int, dtype) -> np.ndarray:
    bound = math.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


class Layer:
    kind = "layer"

    def __init__(self):
        self.params: list[Parameter] = []
        self.cache = None

    # shape inference on per-sample shapes (no batch axis)
    def output_shape(self, in_shape: tuple[int, ...]) -> tuple[int, ...]:
        raise NotImplementedError

    def forward(self, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def backward(self, grad_out: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    @property
    def hyper(self) -> dict:
        return {}

    def kink_state(self):
        """Discrete decisions made in the last forward pass (ReLU masks,
        pooling argmax); ``None`` for smooth layers."""
        return None

    def astype(self, dtype) -> None:
        for p in self.params:
            p.astype(dtype)

    def _take_cache(self):
        if self.cache is None:
            raise StateError(f"{self.kind}: backward called without a preceding forward")
        cache, self.cache = self.cache, None
        return cache

    def __repr__(self) -> str:
        args = ", ".join(f"{k}={v}" for k, v in self.hyper.items())
        return f"{type(self).__name__}({args})"


class Dense(Layer):
    """Fully connected layer, ``y = x @ W.T + b`` with ``W`` of shape [out, in]."""

    kind = "dense"

    def __init__(self, in_features: int, out_features: int, rng=None, dtype=np.float32):
        super().__init__()
        if in_features < 1 or out_features < 1:
            raise ConfigurationError(f"dense dims must be positive, got {in_features}->{out_features}")
        self.in_features = in_features
        self.out_features = out_features
        rng = rng if rng is not None else np.random.default_rng(0)
        self.weight = Parameter(
            _kaiming_uniform(rng, (out_features, in_features), in_features, dtype), "weight"
        )
        self.bias = Parameter(np.zeros(out_features, dtype=dtype), "bias")
        self.params = [self.weight, self.bias]

    @property
    def hyper(self):
        return {"in_features": self.in_features, "out_features": self.out_features}

    def output_shape(self, in_shape):
        if tuple(in_shape) != (self.in_features,):
            raise DimensionError(
                f"dense expects input {_fmt([self.in_features])}, got {_fmt(in_shape)}"
            )
        return (self.out_features,)

    def forward(self, x):
        if x.ndim != 2 or x.shape[1] != self.in_features:
            raise DimensionError(
                f"dense expects input [batch, {self.in_features}], got {_fmt(x.shape)}"
            )
        self.cache = x
        return x @ self.weight.value.T + self.bias.value

    def backward(self, grad_out):
        x = self._take_cache()
        self.weight.grad += grad_out.T @ x
        self.bias.grad += grad_out.sum(axis=0)
        return grad_out @ self.weight.value


class ReLU(Layer):
    kind = "relu"

    def output_shape(self, in_shape):
        return tuple(in_shape)

    def forward(self, x):
        mask = x > 0
        self.cache = mask
        self._last_mask = mask
        return np.maximum(x, 0, dtype=x.dtype)

    def backward(self, grad_out):
        mask = self._take_cache()
        return grad_out * mask

    def kink_state(self):
        return getattr(self, "_last_mask", None)


class Flatten(Layer):
    kind = "flatten"

    def output_shape(self, in_shape):
        return (int(np.prod(in_shape)),)

    def forward(self, x):
        self.cache = x.shape
        return x.reshape(x.shape[0], -1)

    def backward(self, grad_out):
        shape = self._take_cache()
        return grad_out.reshape(shape)


def _check_image(kind: str, x: np.ndarray, channels: int) -> None:
    if x.ndim != 4 or x.shape[1] != channels:
        raise DimensionError(
            f"{kind} expects input [batch, {channels}, h, w], got {_fmt(x.shape)}"
        )


def _im2col(x: np.ndarray, kh: int, kw: int, stride: int, ho: int, wo: int) -> np.ndarray:
    """Gather receptive fields of ``x`` [b, c, h, w] into [b*ho*wo, c*kh*kw]."""
    b, c = x.shape[:2]
    xt = x.transpose(0, 2, 3, 1)
    cols = np.empty((b, ho, wo, c, kh, kw), dtype=x.dtype)
    span_h, span_w = stride * (ho - 1) + 1, stride * (wo - 1) + 1
    for i in range(kh):
        for j in range(kw):
            cols[..., i, j] = xt[:, i:i + span_h:stride, j:j + span_w:stride, :]
    return cols.reshape(b * ho * wo, c * kh * kw)


def _col2im(cols: np.ndarray, shape, kh: int, kw: int, stride: int, ho: int, wo: int) -> np.ndarray:
    """Adjoint of :func:`_im2col`: scatter-add [b*ho*wo, c*kh*kw] into ``shape`` [b, c, h, w]."""
    b, c, h, w = shape
    cols = cols.reshape(b, ho, wo, c, kh, kw)
    out = np.zeros((b, h, w, c), dtype=cols.dtype)
    span_h, span_w = stride * (ho - 1) + 1, stride * (wo - 1) + 1
    for i in range(kh):
        for j in range(kw):
            out[:, i:i + span_h:stride, j:j + span_w:stride, :] += cols[..., i, j]
    return np.ascontiguousarray(out.transpose(0, 3, 1, 2))


def _to_rows(t: np.ndarray) -> np.ndarray:
    """[b, c, h, w] -> [b*h*w, c]."""
    return t.transpose(0, 2, 3, 1).reshape(-1, t.shape[1])


def _from_rows(rows: np.ndarray, b: int, h: int, w: int) -> np.ndarray:
    return np.ascontiguousarray(rows.reshape(b, h, w, -1).transpose(0, 3, 1, 2))


class Conv2d(Layer):
    """2-D cross-correlation with kernel [c_out, c_in, k_h, k_w]."""

    kind = "conv2d"

    def __init__(self, in_channels: int, out_channels: int, kernel_size, stride: int = 1,
                 padding: int = 0, rng=None, dtype=np.float32):
        super().__init__()
        kh, kw = (kernel_size, kernel_size) if np.isscalar(kernel_size) else tuple(kernel_size)
        if min(in_channels, out_channels, kh, kw, stride) < 1 or padding < 0:
            raise ConfigurationError(
                f"invalid conv2d settings: channels {in_channels}->{out_channels}, "
                f"kernel {kh}x{kw}, stride {stride}, padding {padding}"
            )
        self.in_channels, self.out_channels = in_channels, out_channels
        self.kernel_size = (kh, kw)
        self.stride, self.padding = stride, padding
        rng = rng if rng is not None else np.random.default_rng(0)
        fan_in = in_channels * kh * kw
        self.kernel = Parameter(
            _kaiming_uniform(rng, (out_channels, in_channels, kh, kw), fan_in, dtype), "kernel"
        )
        self.bias = Parameter(np.zeros(out_channels, dtype=dtype), "bias")
        self.params = [self.kernel, self.bias]

    @property
    def hyper(self):
        return {
            "in_channels": self.in_channels, "out_channels": self.out_channels,
            "kernel_size": list(self.kernel_size), "stride": self.stride, "padding": self.padding,
        }

    def _out_hw(self, h: int, w: int) -> tuple[int, int]:
        kh, kw = self.kernel_size
        hp, wp = h + 2 * self.padding, w + 2 * self.padding
        if hp < kh or wp < kw:
            raise DimensionError(
                f"conv2d kernel {kh}x{kw} larger than padded input {hp}x{wp}"
            )
        return (hp - kh) // self.stride + 1, (wp - kw) // self.stride + 1

    def output_shape(self, in_shape):
        if len(in_shape) != 3 or in_shape[0] != self.in_channels:
            raise DimensionError(
                f"conv2d expects input [{self.in_channels}, h, w], got {_fmt(in_shape)}"
            )
        return (self.out_channels, *self._out_hw(in_shape[1], in_shape[2]))

    def forward(self, x):
        _check_image("conv2d", x, self.in_channels)
        ho, wo = self._out_hw(x.shape[2], x.shape[3])
        p = self.padding
        xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p))) if p else x
        cols = _im2col(xp, *self.kernel_size, self.stride, ho, wo)
        k2d = self.kernel.value.reshape(self.out_channels, -1)
        out = cols @ k2d.T + self.bias.value
        self.cache = (cols, xp.shape, ho, wo)
        return _from_rows(out, x.shape[0], ho, wo)

    def backward(self, grad_out):
        cols, padded_shape, ho, wo = self._take_cache()
        p = self.padding
        g = _to_rows(grad_out)
        k2d = self.kernel.value.reshape(self.out_channels, -1)
        self.kernel.grad += (g.T @ cols).reshape(self.kernel.shape)
        self.bias.grad += g.sum(axis=0)
        dxp = _col2im(g @ k2d, padded_shape, *self.kernel_size, self.stride, ho, wo)
        if p:
            dxp = np.ascontiguousarray(dxp[:, :, p:-p, p:-p])
        return dxp


class MaxPool2d(Layer):
    """2x2 max pooling with stride 2. Trailing odd rows/columns are dropped
    and ties go to the first element in row-major window order."""

    kind = "maxpool2d"
    window = 2

    def output_shape(self, in_shape):
        if len(in_shape) != 3:
            raise DimensionError(f"maxpool2d expects input [c, h, w], got {_fmt(in_shape)}")
        c, h, w = in_shape
        if h < 2 or w < 2:
            raise DimensionError(f"maxpool2d needs h, w >= 2, got {h}x{w}")
        return (c, h // 2, w // 2)

    @property
    def hyper(self):
        return {"window": 2, "stride": 2}

    def forward(self, x):
        if x.ndim != 4:
            raise DimensionError(f"maxpool2d expects input [batch, c, h, w], got {_fmt(x.shape)}")
        h, w = x.shape[2:]
        if h < 2 or w < 2:
            raise DimensionError(f"maxpool2d needs h, w >= 2, got {h}x{w}")
        ho, wo = h // 2, w // 2
        # window elements in row-major order: (0,0), (0,1), (1,0), (1,1)
        quads = [x[:, :, di:2 * ho:2, dj:2 * wo:2] for di in (0, 1) for dj in (0, 1)]
        out = np.maximum(np.maximum(quads[0], quads[1]), np.maximum(quads[2], quads[3]))
        idx = np.full(out.shape, 3, dtype=np.uint8)
        for k in (2, 1, 0):
            idx[quads[k] == out] = k
        self.cache = (idx, x.shape)
        self._last_idx = idx
        return out

    def backward(self, grad_out):
        idx, in_shape = self._take_cache()
        ho, wo = idx.shape[2:]
        dx = np.zeros(in_shape, dtype=grad_out.dtype)
        for k, (di, dj) in enumerate(((0, 0), (0, 1), (1, 0), (1, 1))):
            dx[:, :, di:2 * ho:2, dj:2 * wo:2] = grad_out * (idx == k)
        return dx

    def kink_state(self):
        return getattr(self, "_last_idx", None)


class ConvTranspose2d(Layer):
    """Transposed convolution (adjoint of a strided cross-correlation).

    Kernel layout is [c_out, c_in, k_h, k_w].  The natural output extent is
    ``(h - 1) * stride + k``; ``target_hw`` requests an exact output extent,
    reached by appending ``0 <= adjust < stride`` extra rows/columns at the
    bottom/right that receive only the bias.
    """

    kind = "conv_transpose2d"

    def __init__(self, in_channels: int, out_channels: int, kernel_size, stride: int = 1,
                 target_hw=None, rng=None, dtype=np.float32):
        super().__init__()
        kh, kw = (kernel_size, kernel_size) if np.isscalar(kernel_size) else tuple(kernel_size)
        if min(in_channels, out_channels, kh, kw, stride) < 1:
            raise ConfigurationError(
                f"invalid conv_transpose2d settings: channels {in_channels}->{out_channels}, "
                f"kernel {kh}x{kw}, stride {stride}"
            )
        self.in_channels, self.out_channels = in_channels, out_channels
        self.kernel_size = (kh, kw)
        self.stride = stride
        self.target_hw = None if target_hw is None else (int(target_hw[0]), int(target_hw[1]))
        rng = rng if rng is not None else np.random.default_rng(0)
        fan_in = in_channels * kh * kw
        self.kernel = Parameter(
            _kaiming_uniform(rng, (out_channels, in_channels, kh, kw), fan_in, dtype), "kernel"
        )
        self.bias = Parameter(np.zeros(out_channels, dtype=dtype), "bias")
        self.params = [self.kernel, self.bias]

    @property
    def hyper(self):
        return {
            "in_channels": self.in_channels, "out_channels": self.out_channels,
            "kernel_size": list(self.kernel_size), "stride": self.stride,
            "target_hw": None if self.target_hw is None else list(self.target_hw),
        }

    def adjustment(self, h: int, w: int) -> tuple[int, int]:
        if self.target_hw is None:
            return 0, 0
        adj = []
        for axis, n, k, target in (("height", h, self.kernel_size[0], self.target_hw[0]),
                                   ("width", w, self.kernel_size[1], self.target_hw[1])):
            natural = (n - 1) * self.stride + k
            a = target - natural
            if not 0 <= a < self.stride:
                raise ConfigurationError(
                    f"conv_transpose2d cannot reach {axis} {target} from {n} with kernel {k}, "
                    f"stride {self.stride} (natural extent {natural}, adjustment must lie in "
                    f"[0, {self.stride - 1}])"
                )
            adj.append(a)
        return adj[0], adj[1]

    def output_shape(self, in_shape):
        if len(in_shape) != 3 or in_shape[0] != self.in_channels:
            raise DimensionError(
                f"conv_transpose2d expects input [{self.in_channels}, h, w], got {_fmt(in_shape)}"
            )
        _, h, w = in_shape
        ah, aw = self.adjustment(h, w)
        kh, kw = self.kernel_size
        return (self.out_channels, (h - 1) * self.stride + kh + ah, (w - 1) * self.stride + kw + aw)

    def _k2d(self) -> np.ndarray:
        # [c_in, c_out*kh*kw]
        return self.kernel.value.transpose(1, 0, 2, 3).reshape(self.in_channels, -1)

    def forward(self, x):
        _check_image("conv_transpose2d", x, self.in_channels)
        b, _, h, w = x.shape
        _, ho, wo = self.output_shape(x.shape[1:])
        rows = _to_rows(x)
        out = _col2im(rows @ self._k2d(), (b, self.out_channels, ho, wo),
                      *self.kernel_size, self.stride, h, w)
        out += self.bias.value[None, :, None, None]
        self.cache = (rows, h, w)
        return out

    def backward(self, grad_out):
        rows, h, w = self._take_cache()
        b = grad_out.shape[0]
        self.bias.grad += grad_out.sum(axis=(0, 2, 3))
        gcols = _im2col(grad_out, *self.kernel_size, self.stride, h, w)
        dk = (rows.T @ gcols).reshape(self.in_channels, self.out_channels, *self.kernel_size)
        self.kernel.grad += dk.transpose(1, 0, 2, 3)
        return _from_rows(gcols @ self._k2d().T, b, h, w)
