"""Dense-MLP training engine for the stress-test workload.

Builds the 100-hidden-layer MLP at the three benchmark sizes, trains it
with plain SGD on mean-squared-error loss, and evaluates it. Also houses
the synthetic regression dataset generator; data realism is deliberately
not a goal, the workload exists to exercise the federation machinery.

Arithmetic runs in float64 internally (weights are promoted from their
float32 storage and rounded back on re-encode) so gradient checks against
finite differences are meaningful. With a zero learning rate the promote/
round round-trip is bit-exact.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass

import numpy as np

from .tensors import (
    ByteOrder,
    ModelState,
    ShapeMismatch,
    Tensor,
    decode_tensor,
    encode_tensor,
)

__all__ = [
    "Dataset",
    "MODEL_SIZES",
    "MlpArchitecture",
    "TrainStats",
    "build_mlp",
    "evaluate",
    "generate_dataset",
    "layers_from_model",
    "loss_and_gradients",
    "model_from_layers",
    "parameter_count",
    "sgd_train",
]

EVAL_BATCH_SIZE = 100


@dataclass(frozen=True)
class MlpArchitecture:
    """Fully connected ReLU stack: input layer, ``hidden_layers`` hidden
    layers of ``hidden_units`` each, and a linear output layer."""

    input_dim: int = 13
    hidden_layers: int = 100
    hidden_units: int = 32
    output_dim: int = 1

    def __post_init__(self) -> None:
        for field_name in ("input_dim", "hidden_layers", "hidden_units", "output_dim"):
            if getattr(self, field_name) < 1:
                raise ValueError(f"{field_name} must be positive")


# Benchmark sizes: 105,025 / 1,001,401 / 10,174,081 parameters.
MODEL_SIZES: dict[str, MlpArchitecture] = {
    "100k": MlpArchitecture(hidden_units=32),
    "1M": MlpArchitecture(hidden_units=100),
    "10M": MlpArchitecture(hidden_units=320),
}


def parameter_count(arch: MlpArchitecture) -> int:
    """Closed-form parameter count (weights plus biases) of the stack."""
    d, h, L, o = arch.input_dim, arch.hidden_units, arch.hidden_layers, arch.output_dim
    return (d * h + h) + (L - 1) * (h * h + h) + (h * o + o)


def _layer_dims(arch: MlpArchitecture) -> list[tuple[int, int]]:
    dims = [(arch.input_dim, arch.hidden_units)]
    dims += [(arch.hidden_units, arch.hidden_units)] * (arch.hidden_layers - 1)
    dims.append((arch.hidden_units, arch.output_dim))
    return dims


def build_mlp(arch: MlpArchitecture, seed: int) -> ModelState:
    """Build the model at version 0 with deterministic Glorot-uniform weights.

    Emits 2 x (hidden_layers + 1) tensors in forward order, a weight matrix
    and a bias vector per layer; biases start at zero.
    """
    rng = np.random.default_rng(seed)
    tensors = []
    for i, (fan_in, fan_out) in enumerate(_layer_dims(arch)):
        limit = math.sqrt(6.0 / (fan_in + fan_out))
        w = rng.uniform(-limit, limit, size=(fan_in, fan_out)).astype(np.float32)
        b = np.zeros(fan_out, dtype=np.float32)
        tensors.append(
            encode_tensor(Tensor(f"dense_{i:03d}/weight", (fan_in, fan_out), w.reshape(-1)))
        )
        tensors.append(encode_tensor(Tensor(f"dense_{i:03d}/bias", (fan_out,), b)))
    return ModelState(version=0, tensors=tensors)


@dataclass
class Dataset:
    """Feature matrix (n x input_dim) and target vector (n), float32."""

    features: np.ndarray
    targets: np.ndarray

    def __post_init__(self) -> None:
        self.features = np.ascontiguousarray(self.features, dtype=np.float32)
        self.targets = np.ascontiguousarray(self.targets, dtype=np.float32).reshape(-1)
        if self.features.ndim != 2 or self.features.shape[0] < 1:
            raise ValueError("features must be a non-empty 2-D matrix")
        if self.features.shape[0] != self.targets.shape[0]:
            raise ValueError("feature rows and target length differ")

    def __len__(self) -> int:
        return self.features.shape[0]


def generate_dataset(n: int, input_dim: int, seed: int) -> Dataset:
    """Synthetic regression data, fully determined by the seed.

    Features are uniform in [0, 1); targets are a linear combination of the
    features (generating weights drawn from the same seed) plus Gaussian
    noise.
    """
    if n < 1 or input_dim < 1:
        raise ValueError("n and input_dim must be positive")
    rng = np.random.default_rng(seed)
    gen_weights = rng.normal(0.0, 1.0, size=input_dim)
    features = rng.random((n, input_dim), dtype=np.float32)
    noise = rng.normal(0.0, 0.1, size=n)
    targets = (features.astype(np.float64) @ gen_weights + noise).astype(np.float32)
    return Dataset(features=features, targets=targets)


@dataclass(frozen=True)
class TrainStats:
    """Execution metadata of one local training run."""

    time_per_batch_ms: float
    completed_steps: int
    completed_epochs: int
    num_training_samples: int


def layers_from_model(model: ModelState) -> list[tuple[np.ndarray, np.ndarray]]:
    """Decode a model into (weight, bias) float64 pairs and validate the chain.

    Raises ShapeMismatch when the tensors do not alternate rank-2 weight /
    rank-1 bias or the layer widths do not connect.
    """
    tensors = model.tensors
    if not tensors or len(tensors) % 2 != 0:
        raise ShapeMismatch("model must hold weight/bias tensor pairs")
    layers = []
    prev_out: int | None = None
    for i in range(0, len(tensors), 2):
        w_t, b_t = decode_tensor(tensors[i]), decode_tensor(tensors[i + 1])
        if len(w_t.shape) != 2 or len(b_t.shape) != 1:
            raise ShapeMismatch(
                f"layer {i // 2}: expected rank-2 weight and rank-1 bias, "
                f"got {w_t.shape} / {b_t.shape}"
            )
        fan_in, fan_out = w_t.shape
        if b_t.shape[0] != fan_out:
            raise ShapeMismatch(f"layer {i // 2}: bias width {b_t.shape[0]} != {fan_out}")
        if prev_out is not None and fan_in != prev_out:
            raise ShapeMismatch(f"layer {i // 2}: input width {fan_in} != {prev_out}")
        prev_out = fan_out
        w = w_t.values.astype(np.float64).reshape(fan_in, fan_out)
        b = b_t.values.astype(np.float64)
        layers.append((w, b))
    return layers


def model_from_layers(
    layers: list[tuple[np.ndarray, np.ndarray]],
    template: ModelState,
    version: int | None = None,
) -> ModelState:
    """Re-encode float64 layers using the template's tensor names and order."""
    tensors = []
    for i, (w, b) in enumerate(layers):
        w_name = template.tensors[2 * i].name
        b_name = template.tensors[2 * i + 1].name
        tensors.append(
            encode_tensor(
                Tensor(w_name, tuple(w.shape), w.astype(np.float32).reshape(-1)),
                ByteOrder.LITTLE,
            )
        )
        tensors.append(
            encode_tensor(Tensor(b_name, (b.shape[0],), b.astype(np.float32)), ByteOrder.LITTLE)
        )
    return ModelState(
        version=template.version if version is None else version, tensors=tensors
    )


def _forward(layers, x):
    """Forward pass keeping activations and pre-activations for backprop."""
    activations = [x]
    preacts = []
    for i, (w, b) in enumerate(layers):
        z = activations[-1] @ w + b
        preacts.append(z)
        if i < len(layers) - 1:
            activations.append(np.maximum(z, 0.0))  # ReLU on hidden layers
        else:
            activations.append(z)  # identity on the output layer
    return activations, preacts


def loss_and_gradients(
    layers: list[tuple[np.ndarray, np.ndarray]],
    features: np.ndarray,
    targets: np.ndarray,
) -> tuple[float, list[tuple[np.ndarray, np.ndarray]]]:
    """MSE loss and its analytic gradients w.r.t. every weight and bias."""
    x = np.asarray(features, dtype=np.float64)
    out_dim = layers[-1][0].shape[1]
    if out_dim != 1:
        raise ShapeMismatch("dataset targets are 1-D; model output width must be 1")
    y = np.asarray(targets, dtype=np.float64).reshape(-1, 1)
    activations, preacts = _forward(layers, x)
    pred = activations[-1]
    diff = pred - y
    loss = float(np.mean(diff * diff))
    grads: list[tuple[np.ndarray, np.ndarray]] = [None] * len(layers)  # type: ignore[list-item]
    delta = 2.0 * diff / diff.size
    for i in range(len(layers) - 1, -1, -1):
        w, _ = layers[i]
        grads[i] = (activations[i].T @ delta, delta.sum(axis=0))
        if i > 0:
            delta = (delta @ w.T) * (preacts[i - 1] > 0.0)
    return loss, grads


def sgd_train(
    model: ModelState,
    data: Dataset,
    epochs: int,
    batch_size: int,
    learning_rate: float,
) -> tuple[ModelState, TrainStats]:
    """Train with vanilla SGD: w <- w - lr * grad(w), one update per batch.

    Batches are consecutive fixed-order slices (no shuffling) so runs are
    reproducible. The returned model keeps the input version; version
    bookkeeping belongs to the controller.
    """
    if epochs < 1 or batch_size < 1:
        raise ValueError("epochs and batch_size must be >= 1")
    layers = layers_from_model(model)
    n = len(data)
    steps_per_epoch = math.ceil(n / batch_size)
    elapsed = 0.0
    for _ in range(epochs):
        for s in range(steps_per_epoch):
            xb = data.features[s * batch_size : (s + 1) * batch_size]
            yb = data.targets[s * batch_size : (s + 1) * batch_size]
            t0 = time.perf_counter()
            _, grads = loss_and_gradients(layers, xb, yb)
            layers = [
                (w - learning_rate * gw, b - learning_rate * gb)
                for (w, b), (gw, gb) in zip(layers, grads)
            ]
            elapsed += time.perf_counter() - t0
    steps = epochs * steps_per_epoch
    stats = TrainStats(
        time_per_batch_ms=elapsed / steps * 1000.0,
        completed_steps=steps,
        completed_epochs=epochs,
        num_training_samples=n,
    )
    return model_from_layers(layers, template=model), stats


def evaluate(model: ModelState, data: Dataset, batch_size: int = EVAL_BATCH_SIZE) -> float:
    """Mean squared error over the whole dataset, computed in fixed batches.

    Pure and deterministic: identical inputs give identical values.
    """
    layers = layers_from_model(model)
    if layers[-1][0].shape[1] != 1:
        raise ShapeMismatch("dataset targets are 1-D; model output width must be 1")
    n = len(data)
    sq_sum = 0.0
    for s in range(math.ceil(n / batch_size)):
        xb = data.features[s * batch_size : (s + 1) * batch_size].astype(np.float64)
        yb = data.targets[s * batch_size : (s + 1) * batch_size].astype(np.float64)
        activations, _ = _forward(layers, xb)
        diff = activations[-1].reshape(-1) - yb
        sq_sum += float(diff @ diff)
    return sq_sum / n
