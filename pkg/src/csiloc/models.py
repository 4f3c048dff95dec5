"""The four localization architectures and the autoencoder/localizer wrappers.

=====  ==========================================  ===========================
model  pretraining                                 position estimation
=====  ==========================================  ===========================
M1     none                                        MLP 128 / 64 / 3
M2     none                                        conv(32,k3)+pool, conv(64,k2)+pool, MLP head
M3     MLP autoencoder 256/128/64/32 (mirrored)    frozen encoder + MLP head
M4     CNN autoencoder, transposed-conv decoder    frozen encoder + MLP head
=====  ==========================================  ===========================

CNN models treat a CSI sample as a one-channel image ``[1, h, w]``; MLP
models see it flattened to ``h * w`` values.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass

import numpy as np

from .errors import CheckpointMismatchError, ConfigurationError, DimensionError
from .nn import Conv2d, ConvTranspose2d, Dense, Flatten, MaxPool2d, ReLU, Sequential
from .nn.parameter import Parameter

MODEL_IDS = ("M1", "M2", "M3", "M4")
PRETRAINED = ("M3", "M4")
HEAD_DIMS = (128, 64, 3)
MLP_ENCODER_DIMS = (256, 128, 64, 32)
CNN_CHANNELS = (32, 64)
CNN_KERNELS = (3, 2)
DECODER_CHANNELS = (32, 1)
DECODER_KERNEL = 3
DECODER_STRIDE = 2


@dataclass(frozen=True)
class ModelSpec:
    """Which architecture to build and for what input size.

    ``final_activation`` keeps the ReLU after the last decoder layer
    (M3/M4); switch it off to let reconstructions go negative.
    """

    model_id: str = "M1"
    height: int = 56
    width: int = 924
    final_activation: bool = True

    def __post_init__(self):
        mid = str(self.model_id).upper()
        if mid not in MODEL_IDS:
            raise ConfigurationError(f"unknown model {self.model_id!r}; expected one of {MODEL_IDS}")
        object.__setattr__(self, "model_id", mid)
        if self.height < 1 or self.width < 1:
            raise ConfigurationError(f"input extents must be positive, got {self.height}x{self.width}")

    @property
    def is_cnn(self) -> bool:
        return self.model_id in ("M2", "M4")

    @property
    def pretrained(self) -> bool:
        return self.model_id in PRETRAINED

    @property
    def input_shape(self) -> tuple[int, ...]:
        if self.is_cnn:
            return (1, self.height, self.width)
        return (self.height * self.width,)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelSpec":
        return cls(**{k: d[k] for k in ("model_id", "height", "width", "final_activation") if k in d})


def _prepare(x: np.ndarray, input_shape: tuple[int, ...], dtype) -> np.ndarray:
    """Reshape ``[batch, h, w]`` (or already-shaped) input to ``[batch, *input_shape]``."""
    if x.ndim < 2:
        raise DimensionError(f"expected a batch of samples, got shape {list(x.shape)}")
    per_sample = int(np.prod(x.shape[1:]))
    if per_sample != int(np.prod(input_shape)):
        raise DimensionError(
            f"input samples have shape {list(x.shape[1:])}, model expects {list(input_shape)}"
        )
    return x.reshape((x.shape[0], *input_shape)).astype(dtype, copy=False)


def _cnn_encoder(rng, dtype) -> Sequential:
    (c1, c2), (k1, k2) = CNN_CHANNELS, CNN_KERNELS
    return Sequential([
        Conv2d(1, c1, k1, rng=rng, dtype=dtype), ReLU(), MaxPool2d(),
        Conv2d(c1, c2, k2, rng=rng, dtype=dtype), ReLU(), MaxPool2d(),
    ])


def _mlp_head(in_features: int, rng, dtype, flatten: bool = True) -> list:
    layers = [Flatten()] if flatten else []
    dims = (in_features, *HEAD_DIMS)
    for i in range(len(HEAD_DIMS)):
        layers.append(Dense(dims[i], dims[i + 1], rng=rng, dtype=dtype))
        if i < len(HEAD_DIMS) - 1:
            layers.append(ReLU())
    return layers


def _encoder(spec: ModelSpec, rng, dtype) -> Sequential:
    if spec.model_id == "M4":
        return _cnn_encoder(rng, dtype)
    dims = (spec.height * spec.width, *MLP_ENCODER_DIMS)
    layers = []
    for i in range(len(MLP_ENCODER_DIMS)):
        layers += [Dense(dims[i], dims[i + 1], rng=rng, dtype=dtype), ReLU()]
    return Sequential(layers)


def _check_chain(stack: Sequential, in_shape, what: str) -> tuple[int, ...]:
    try:
        return stack.output_shape(in_shape)
    except (DimensionError, ConfigurationError) as exc:
        raise ConfigurationError(f"{what}: infeasible shape chain for input {list(in_shape)}: {exc}") from exc


class _Model:
    spec: ModelSpec
    input_shape: tuple[int, ...]
    # Standardizers fitted during training (None = raw values)
    feature_scaler = None
    target_scaler = None

    def _stacks(self) -> list[tuple[str, Sequential]]:
        raise NotImplementedError

    @property
    def dtype(self):
        params = self.parameters()
        return params[0].value.dtype if params else np.float32

    def prepare(self, x: np.ndarray) -> np.ndarray:
        return _prepare(x, self.input_shape, self.dtype)

    def named_parameters(self) -> list[tuple[str, Parameter]]:
        out = []
        for prefix, stack in self._stacks():
            out.extend(stack.named_parameters(prefix + "."))
        return out

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def astype(self, dtype):
        for _, stack in self._stacks():
            stack.astype(dtype)
        return self

    def kink_signature(self) -> list[np.ndarray]:
        return [k for _, stack in self._stacks() for k in stack.kink_signature()]

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.value.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray], prefix: str = "") -> None:
        """Copy tensors into parameters whose names start with ``prefix``.

        Raises :class:`CheckpointMismatchError` naming every missing or
        mis-shaped tensor; nothing is modified in that case.
        """
        targets = [(n, p) for n, p in self.named_parameters() if n.startswith(prefix)]
        offending = []
        for name, p in targets:
            if name not in state:
                offending.append(f"{name} (missing)")
            elif tuple(state[name].shape) != p.shape:
                offending.append(f"{name} (checkpoint {list(state[name].shape)} vs model {list(p.shape)})")
        expected = {n for n, _ in targets}
        extra = sorted(n for n in state if n.startswith(prefix) and n not in expected)
        offending.extend(f"{n} (unexpected)" for n in extra)
        if offending:
            raise CheckpointMismatchError("checkpoint does not match model", offending)
        for name, p in targets:
            p.value = np.array(state[name], dtype=p.value.dtype)
            p.grad = np.zeros_like(p.value)
            p.reset_state()

    def architecture(self) -> dict:
        """Machine-readable description of every layer (kind, shapes, parameter counts)."""
        doc = {"model_id": self.spec.model_id, "input_shape": list(self.input_shape),
               "kind": type(self).__name__.lower(), "components": {}}
        shape = self.input_shape
        total = 0
        for prefix, stack in self._stacks():
            rows = stack.describe(shape, prefix=prefix + ".")
            doc["components"][prefix] = rows
            total += sum(r["parameter_count"] for r in rows)
            if prefix != "decoder":
                shape = tuple(rows[-1]["output_shape"]) if rows else shape
        doc["parameter_count"] = total
        return doc

    def architecture_json(self) -> str:
        return json.dumps(self.architecture(), indent=2, sort_keys=True)


class Autoencoder(_Model):
    """Encoder/decoder pair trained to reproduce its input."""

    def __init__(self, spec: ModelSpec, encoder: Sequential, decoder: Sequential):
        self.spec = spec
        self.input_shape = spec.input_shape
        self.encoder = encoder
        self.decoder = decoder
        latent = _check_chain(encoder, self.input_shape, f"{spec.model_id} encoder")
        out = _check_chain(decoder, latent, f"{spec.model_id} decoder")
        if out != self.input_shape:
            raise ConfigurationError(
                f"{spec.model_id} decoder output {list(out)} does not match input {list(self.input_shape)}"
            )
        self.latent_shape = latent

    def _stacks(self):
        return [("encoder", self.encoder), ("decoder", self.decoder)]

    def forward(self, x: np.ndarray) -> np.ndarray:
        return self.decoder.forward(self.encoder.forward(self.prepare(x)))

    __call__ = forward

    def backward(self, grad: np.ndarray) -> np.ndarray:
        return self.encoder.backward(self.decoder.backward(grad))

    def encode(self, x: np.ndarray) -> np.ndarray:
        return self.encoder.forward(self.prepare(x))

    def reconstruct(self, x: np.ndarray) -> np.ndarray:
        return self.forward(x).reshape(x.shape)


class Localizer(_Model):
    """Optional encoder followed by a position head producing ``[batch, 3]``.

    With ``encoder_frozen`` the encoder only runs forward: backward stops at
    the head and :meth:`trainable_parameters` lists head parameters only.
    """

    def __init__(self, spec: ModelSpec, encoder: Sequential, head: Sequential,
                 encoder_frozen: bool = True):
        self.spec = spec
        self.input_shape = spec.input_shape
        self.encoder = encoder
        self.head = head
        self.encoder_frozen = bool(encoder_frozen)
        latent = _check_chain(encoder, self.input_shape, f"{spec.model_id} encoder")
        out = _check_chain(head, latent, f"{spec.model_id} head")
        if out != (3,):
            raise ConfigurationError(f"position head must output 3 values, got {list(out)}")
        self.latent_shape = latent

    def _stacks(self):
        return [("encoder", self.encoder), ("head", self.head)]

    @property
    def has_encoder(self) -> bool:
        return len(self.encoder) > 0

    def trainable_parameters(self) -> list:
        if self.encoder_frozen:
            return self.head.parameters()
        return self.parameters()

    def encode(self, x: np.ndarray) -> np.ndarray:
        return self.encoder.forward(self.prepare(x))

    def forward(self, x: np.ndarray) -> np.ndarray:
        return self.head.forward(self.encode(x))

    __call__ = forward

    def backward(self, grad: np.ndarray) -> np.ndarray:
        g = self.head.backward(grad)
        if self.encoder_frozen or not self.has_encoder:
            return g
        return self.encoder.backward(g)

    def predict_position(self, x: np.ndarray) -> np.ndarray:
        return self.forward(x)


def build(spec: ModelSpec, seed: int = 0, dtype=np.float32) -> Autoencoder | Localizer:
    """Autoencoder for M3/M4, ready-to-train localizer for M1/M2."""
    if spec.pretrained:
        return build_autoencoder(spec, seed, dtype)
    return build_localizer(spec, seed, dtype=dtype)


def build_autoencoder(spec: ModelSpec, seed: int = 0, dtype=np.float32) -> Autoencoder:
    if not spec.pretrained:
        raise ConfigurationError(f"{spec.model_id} has no autoencoder; only M3 and M4 are pretrained")
    rng = np.random.default_rng(seed)
    encoder = _encoder(spec, rng, dtype)
    if spec.model_id == "M3":
        dec = []
        rev = (spec.height * spec.width, *MLP_ENCODER_DIMS)[::-1]
        for i in range(len(rev) - 1):
            dec += [Dense(rev[i], rev[i + 1], rng=rng, dtype=dtype), ReLU()]
        if not spec.final_activation:
            dec.pop()
        return Autoencoder(spec, encoder, Sequential(dec))

    first_pool = _check_chain(Sequential(encoder.layers[:3]), spec.input_shape, "M4 encoder")
    latent = _check_chain(encoder, spec.input_shape, "M4 encoder")
    (d1, d2) = DECODER_CHANNELS
    try:
        dec = [
            ConvTranspose2d(latent[0], d1, DECODER_KERNEL, stride=DECODER_STRIDE,
                            target_hw=first_pool[1:], rng=rng, dtype=dtype), ReLU(),
            ConvTranspose2d(d1, d2, DECODER_KERNEL, stride=DECODER_STRIDE,
                            target_hw=(spec.height, spec.width), rng=rng, dtype=dtype), ReLU(),
        ]
    except ConfigurationError as exc:
        raise ConfigurationError(f"M4 decoder: {exc}") from exc
    if not spec.final_activation:
        dec.pop()
    return Autoencoder(spec, encoder, Sequential(dec))


def build_localizer(spec: ModelSpec, seed: int = 0, encoder_state: dict | None = None,
                    encoder_frozen: bool = True, dtype=np.float32) -> Localizer:
    """Position-estimation model.

    For M3/M4 the encoder half of the autoencoder is created and, when
    ``encoder_state`` is given (``encoder.*`` tensors from a pretraining
    checkpoint), loaded from it.
    """
    rng = np.random.default_rng(seed)
    if spec.model_id == "M1":
        head = Sequential(_mlp_head(spec.height * spec.width, rng, dtype, flatten=False))
        return Localizer(spec, Sequential(), head, encoder_frozen=False)
    if spec.model_id == "M2":
        convs = _cnn_encoder(rng, dtype)
        flat = int(np.prod(_check_chain(convs, spec.input_shape, "M2 convolutions")))
        head = Sequential(convs.layers + _mlp_head(flat, rng, dtype))
        return Localizer(spec, Sequential(), head, encoder_frozen=False)

    encoder = _encoder(spec, rng, dtype)
    latent = _check_chain(encoder, spec.input_shape, f"{spec.model_id} encoder")
    head = Sequential(_mlp_head(int(np.prod(latent)), rng, dtype))
    loc = Localizer(spec, encoder, head, encoder_frozen=encoder_frozen)
    if encoder_state is not None:
        loc.load_state_dict({k: v for k, v in encoder_state.items() if k.startswith("encoder.")},
                            prefix="encoder.")
    return loc
