"""Model architecture, forward/backward, serialization, gradient checking.

The production network takes a 3@66x200 YUV tensor through five valid
convolutions and four dense layers down to one linear steering output:

    3@66x200 -> 24@31x98 -> 36@14x47 -> 48@5x22 -> 64@3x20 -> 64@1x18
             -> 1152 -> 100 -> 50 -> 10 -> 1

The 64*1*18 = 1152 flatten width follows from valid-convolution arithmetic
on the 66x200 input.
"""

from __future__ import annotations

import io
import json
import math
import struct
from dataclasses import dataclass

import numpy as np

from .layers import Conv2D, Dense, Flatten

MODEL_MAGIC = b"RLLE"
MODEL_VERSION = 1


class ShapeError(ValueError):
    """Input does not fit the network at some layer."""


class NumericDivergenceError(ArithmeticError):
    """Loss went non-finite during training."""

    def __init__(self, message, epoch=None, batch=None):
        super().__init__(message)
        self.epoch = epoch
        self.batch = batch


class IncompatibleModelError(ValueError):
    """Model file has the wrong magic, version, or architecture descriptor."""


class CorruptModelError(ValueError):
    """Model file is truncated or has trailing garbage."""


@dataclass(frozen=True)
class ModelSpec:
    input_shape: tuple = (3, 66, 200)
    conv: tuple = ((24, 5, 2), (36, 5, 2), (48, 5, 2), (64, 3, 1), (64, 3, 1))
    dense: tuple = (100, 50, 10, 1)

    def to_json(self) -> str:
        return json.dumps(
            {
                "input_shape": list(self.input_shape),
                "conv": [list(c) for c in self.conv],
                "dense": list(self.dense),
            }
        )

    @classmethod
    def from_json(cls, text: str) -> "ModelSpec":
        try:
            d = json.loads(text)
            return cls(
                input_shape=tuple(d["input_shape"]),
                conv=tuple(tuple(c) for c in d["conv"]),
                dense=tuple(d["dense"]),
            )
        except (KeyError, TypeError, ValueError) as e:
            raise IncompatibleModelError(f"bad architecture descriptor: {e}") from None


def pilotnet_spec() -> ModelSpec:
    return ModelSpec()


def reduced_spec() -> ModelSpec:
    """Small cousin of the production net, sized for finite differences."""
    return ModelSpec(
        input_shape=(3, 10, 20),
        conv=((2, 3, 2), (3, 3, 1), (3, 2, 1), (4, 1, 1), (4, 1, 1)),
        dense=(8, 4, 2, 1),
    )


class Model:
    def __init__(self, spec: ModelSpec):
        self.spec = spec
        self.layers = []
        shape = tuple(spec.input_shape)
        for out_ch, k, stride in spec.conv:
            layer = Conv2D(shape[0], out_ch, k, stride)
            shape = layer.output_shape(shape)
            self.layers.append(layer)
        flat = Flatten()
        shape = flat.output_shape(shape)
        self.layers.append(flat)
        for i, width in enumerate(spec.dense):
            last = i == len(spec.dense) - 1
            layer = Dense(shape[0], width, activation="linear" if last else "relu")
            shape = layer.output_shape(shape)
            self.layers.append(layer)
        if shape != (1,):
            raise ShapeError(f"network must end in one output, got {shape}")

    def shape_chain(self) -> list:
        """Per-layer output shapes, starting from the input shape."""
        chain = [tuple(self.spec.input_shape)]
        shape = chain[0]
        for layer in self.layers:
            shape = layer.output_shape(shape)
            chain.append(shape)
        return chain

    def parameters(self) -> list:
        out = []
        for layer in self.layers:
            out.extend(layer.params())
        return out

    def num_params(self) -> int:
        return sum(p.size for p in self.parameters())

    def astype(self, dtype) -> "Model":
        m = Model(self.spec)
        for dst, src in zip(m.layers, self.layers):
            dst.set_params([p.astype(dtype) for p in src.params()])
        return m


def init_model(spec: ModelSpec, seed: int = 0, dtype=np.float32) -> Model:
    """He-uniform weights (bound sqrt(6/fan_in)), zero biases."""
    rng = np.random.default_rng(seed)
    model = Model(spec)
    for layer in model.layers:
        if not layer.params():
            continue
        bound = math.sqrt(6.0 / layer.fan_in())
        w = rng.uniform(-bound, bound, size=layer.w.shape).astype(dtype)
        b = np.zeros(layer.b.shape, dtype=dtype)
        layer.set_params([w, b])
    return model


def _check_input(model: Model, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x)
    if x.ndim == 3:
        x = x[None]
    expected = tuple(model.spec.input_shape)
    if x.ndim != 4 or x.shape[1:] != expected:
        raise ShapeError(
            f"layer conv1 expects batches of {expected}, got {x.shape}"
        )
    return x


def forward(model: Model, x: np.ndarray) -> np.ndarray:
    """Predictions for a batch; one real per example, batch order preserved."""
    a = _check_input(model, x)
    for layer in model.layers:
        a, _ = layer.forward(a, want_cache=False)
    return a[:, 0]


def forward_with_shapes(model: Model, x: np.ndarray) -> list:
    """Per-layer output shapes (excluding batch) actually produced on x."""
    a = _check_input(model, x)
    shapes = []
    for layer in model.layers:
        a, _ = layer.forward(a, want_cache=False)
        shapes.append(tuple(a.shape[1:]))
    return shapes


def loss_and_grad(model: Model, x: np.ndarray, labels: np.ndarray):
    """MSE over the batch plus gradients aligned with model.parameters()."""
    x = _check_input(model, x)
    labels = np.asarray(labels, dtype=x.dtype).reshape(-1)
    if labels.shape[0] != x.shape[0]:
        raise ValueError(
            f"{labels.shape[0]} labels for a batch of {x.shape[0]}"
        )
    a = x
    caches = []
    for layer in model.layers:
        a, cache = layer.forward(a, want_cache=True)
        caches.append(cache)
    preds = a[:, 0]
    residual = preds - labels
    mse = float(np.mean(residual.astype(np.float64) ** 2))
    if not math.isfinite(mse):
        raise NumericDivergenceError(f"non-finite loss {mse}")

    n = x.shape[0]
    grad = (2.0 / n) * residual.reshape(-1, 1).astype(x.dtype)
    grads_reversed = []
    for layer, cache in zip(reversed(model.layers), reversed(caches)):
        grad, layer_grads = layer.backward(grad, cache)
        grads_reversed.append(layer_grads)
    grads = []
    for layer_grads in reversed(grads_reversed):
        grads.extend(layer_grads)
    return mse, grads


# ---- serialization ---------------------------------------------------------


def save_model(model: Model, path) -> None:
    """Binary format: magic, u16 version, u32 descriptor length, descriptor
    JSON, then parameter tensors as little-endian float32 in layer order."""
    descriptor = model.spec.to_json().encode("utf-8")
    with open(path, "wb") as f:
        f.write(MODEL_MAGIC)
        f.write(struct.pack("<H", MODEL_VERSION))
        f.write(struct.pack("<I", len(descriptor)))
        f.write(descriptor)
        for p in model.parameters():
            f.write(np.ascontiguousarray(p, dtype="<f4").tobytes())


def load_model(path) -> Model:
    with open(path, "rb") as f:
        data = f.read()
    buf = io.BytesIO(data)
    magic = buf.read(4)
    if magic != MODEL_MAGIC:
        raise IncompatibleModelError(f"bad magic {magic!r}, expected {MODEL_MAGIC!r}")
    version_raw = buf.read(2)
    if len(version_raw) < 2:
        raise CorruptModelError("file truncated in version field")
    (version,) = struct.unpack("<H", version_raw)
    if version != MODEL_VERSION:
        raise IncompatibleModelError(
            f"model format version {version}; supported versions: {MODEL_VERSION}"
        )
    len_raw = buf.read(4)
    if len(len_raw) < 4:
        raise CorruptModelError("file truncated in descriptor length")
    (desc_len,) = struct.unpack("<I", len_raw)
    desc_raw = buf.read(desc_len)
    if len(desc_raw) < desc_len:
        raise CorruptModelError("file truncated in architecture descriptor")
    spec = ModelSpec.from_json(desc_raw.decode("utf-8"))

    model = Model(spec)
    for layer in model.layers:
        tensors = []
        for p in layer.params():
            raw = buf.read(p.size * 4)
            if len(raw) < p.size * 4:
                raise CorruptModelError("file truncated in parameter tensors")
            tensors.append(
                np.frombuffer(raw, dtype="<f4").reshape(p.shape).astype(np.float32)
            )
        if tensors:
            layer.set_params(tensors)
    if buf.read(1):
        raise CorruptModelError("trailing bytes after parameter tensors")
    return model


# ---- gradient checking -----------------------------------------------------


def gradient_check(model: Model, x: np.ndarray, labels: np.ndarray,
                   eps: float = 1e-5) -> float:
    """Max relative error between analytic gradients and central differences.

    Runs in float64 regardless of the model's dtype. Relative error per
    parameter is |g_a - g_n| / max(|g_a|, |g_n|, 1e-8).
    """
    if eps <= 0:
        raise ValueError(f"eps must be > 0, got {eps}")
    m = model.astype(np.float64)
    x = np.asarray(x, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.float64).reshape(-1)

    def loss_only() -> float:
        preds = forward(m, x)
        return float(np.mean((preds - labels) ** 2))

    _, grads = loss_and_grad(m, x, labels)
    worst = 0.0
    for p, g in zip(m.parameters(), grads):
        flat = p.reshape(-1)
        gflat = np.asarray(g).reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            lp = loss_only()
            flat[i] = orig - eps
            lm = loss_only()
            flat[i] = orig
            numeric = (lp - lm) / (2.0 * eps)
            denom = max(abs(gflat[i]), abs(numeric), 1e-8)
            worst = max(worst, abs(gflat[i] - numeric) / denom)
    return worst
