"""LoRA adapters on a frozen base classifier.

A model is a stack of frozen dense layers ``z = h (W0 + s B A)^T + b`` with
``s = alpha / r``. Only the adapter factors are trained; which factor is
trainable is chosen per call with a :class:`Selector`, which is how the
federated schedules freeze ``A`` or ``B`` for a half-round.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, replace

import numpy as np

from .numerics import as_matrix, make_rng, sample_gaussian

ARCHITECTURES = ("linear-softmax", "two-layer-mlp")

DEFAULT_INIT_STD = 0.02
DEFAULT_HIDDEN = 32


class Selector(enum.Enum):
    ONLY_A = "A"
    ONLY_B = "B"
    BOTH = "both"

    def trains(self, factor: str) -> bool:
        return self is Selector.BOTH or self.value == factor


@dataclass(frozen=True)
class LoraAdapter:
    B: np.ndarray
    A: np.ndarray
    alpha: float

    @property
    def rank(self) -> int:
        return self.A.shape[0]

    @property
    def shape(self) -> tuple[int, int]:
        return self.B.shape[0], self.A.shape[1]

    @property
    def scale(self) -> float:
        return self.alpha / self.rank


@dataclass(frozen=True)
class Layer:
    weight: np.ndarray
    bias: np.ndarray
    adapter: LoraAdapter | None = None


@dataclass(frozen=True)
class LoraModel:
    layers: tuple[Layer, ...]
    architecture: str

    @property
    def input_dim(self) -> int:
        return self.layers[0].weight.shape[1]

    @property
    def num_classes(self) -> int:
        return self.layers[-1].weight.shape[0]

    def adapted_layers(self) -> list[int]:
        return [i for i, layer in enumerate(self.layers) if layer.adapter is not None]

    def adapter(self, index: int) -> LoraAdapter:
        adapter = self.layers[index].adapter
        if adapter is None:
            raise KeyError(f"layer {index} has no adapter")
        return adapter

    def with_adapters(self, adapters: dict[int, LoraAdapter]) -> "LoraModel":
        layers = list(self.layers)
        for i, adapter in adapters.items():
            if adapter.shape != layers[i].weight.shape:
                raise ValueError(
                    f"adapter shape {adapter.shape} does not match layer {i} weight "
                    f"{layers[i].weight.shape}"
                )
            layers[i] = replace(layers[i], adapter=adapter)
        return replace(self, layers=tuple(layers))

    def merged(self) -> "LoraModel":
        """Fold every adapter into its base weight and drop the adapters."""
        layers = tuple(
            Layer(
                weight=_frozen(layer.weight + effective_update(layer.adapter))
                if layer.adapter is not None
                else layer.weight,
                bias=layer.bias,
            )
            for layer in self.layers
        )
        return replace(self, layers=layers)


def _frozen(arr) -> np.ndarray:
    out = np.array(arr, dtype=np.float64)
    out.setflags(write=False)
    return out


def init_adapter(m: int, n: int, r: int, alpha: float, init_std: float,
                 rng: np.random.Generator) -> LoraAdapter:
    if not 1 <= r <= min(m, n):
        raise ValueError(f"rank r={r} must lie in [1, min(m, n)={min(m, n)}]")
    if alpha <= 0:
        raise ValueError(f"alpha must be positive, got {alpha}")
    if init_std <= 0:
        raise ValueError(f"init_std must be positive, got {init_std}")
    return LoraAdapter(B=np.zeros((m, r)), A=sample_gaussian(r, n, init_std, rng), alpha=alpha)


def effective_update(adapter: LoraAdapter) -> np.ndarray:
    return adapter.scale * (adapter.B @ adapter.A)


def build_base_model(weights, biases, architecture: str) -> LoraModel:
    if architecture not in ARCHITECTURES:
        raise ValueError(f"unknown architecture {architecture!r}; expected one of {ARCHITECTURES}")
    expected = 1 if architecture == "linear-softmax" else 2
    if len(weights) != expected or len(biases) != expected:
        raise ValueError(f"{architecture} needs {expected} layer(s), got {len(weights)}")
    layers = []
    for i, (w, b) in enumerate(zip(weights, biases)):
        w = as_matrix(w, f"weight[{i}]")
        b = np.asarray(b, dtype=np.float64).reshape(-1)
        if b.shape[0] != w.shape[0]:
            raise ValueError(f"bias[{i}] has length {b.shape[0]}, expected {w.shape[0]}")
        if i and w.shape[1] != layers[-1].weight.shape[0]:
            raise ValueError(f"layer {i} input width {w.shape[1]} does not match previous output")
        layers.append(Layer(weight=_frozen(w), bias=_frozen(b)))
    return LoraModel(layers=tuple(layers), architecture=architecture)


def attach_adapters(model: LoraModel, layer_ids, r: int, alpha: float,
                    init_std: float, rng: np.random.Generator) -> LoraModel:
    adapters = {}
    for i in layer_ids:
        m, n = model.layers[i].weight.shape
        adapters[i] = init_adapter(m, n, r, alpha, init_std, rng)
    return model.with_adapters(adapters)


def _layer_forward(layer: Layer, h: np.ndarray) -> np.ndarray:
    z = h @ layer.weight.T + layer.bias
    if layer.adapter is not None:
        ad = layer.adapter
        z = z + ad.scale * ((h @ ad.A.T) @ ad.B.T)
    return z


def _check_input(model: LoraModel, X) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != model.input_dim:
        raise ValueError(
            f"input must be (batch, {model.input_dim}), got shape {X.shape}"
        )
    return X


def forward(model: LoraModel, X) -> np.ndarray:
    h = _check_input(model, X)
    last = len(model.layers) - 1
    for i, layer in enumerate(model.layers):
        h = _layer_forward(layer, h)
        if i < last:
            h = np.maximum(h, 0.0)
    return h


def predict(model: LoraModel, X) -> np.ndarray:
    return np.argmax(forward(model, X), axis=1)


def _softmax_xent(logits: np.ndarray, y: np.ndarray):
    shifted = logits - logits.max(axis=1, keepdims=True)
    logsumexp = np.log(np.exp(shifted).sum(axis=1))
    n = logits.shape[0]
    loss = float(np.mean(logsumexp - shifted[np.arange(n), y]))
    probs = np.exp(shifted - logsumexp[:, None])
    probs[np.arange(n), y] -= 1.0
    return loss, probs / n


def _backprop(model: LoraModel, X, y):
    """Loss plus gradients w.r.t. each layer's effective weight and bias."""
    X = _check_input(model, X)
    y = np.asarray(y)
    if X.shape[0] == 0:
        raise ValueError("empty batch")
    if y.shape != (X.shape[0],):
        raise ValueError(f"labels must have shape ({X.shape[0]},), got {y.shape}")
    if y.min() < 0 or y.max() >= model.num_classes:
        raise ValueError(f"labels must lie in [0, {model.num_classes})")
    y = y.astype(np.int64)

    inputs = []
    pre = []
    h = X
    last = len(model.layers) - 1
    for i, layer in enumerate(model.layers):
        inputs.append(h)
        z = _layer_forward(layer, h)
        pre.append(z)
        h = np.maximum(z, 0.0) if i < last else z

    loss, g = _softmax_xent(h, y)
    d_weight = [None] * len(model.layers)
    d_bias = [None] * len(model.layers)
    for i in range(last, -1, -1):
        if i < last:
            g = g * (pre[i] > 0)
        d_weight[i] = g.T @ inputs[i]
        d_bias[i] = g.sum(axis=0)
        if i > 0:
            layer = model.layers[i]
            w = layer.weight
            if layer.adapter is not None:
                w = w + effective_update(layer.adapter)
            g = g @ w
    return loss, d_weight, d_bias


def loss_and_grads(model: LoraModel, X, y, selector: Selector):
    """Mean cross-entropy and gradients for the trainable adapter factors.

    Gradients are keyed ``(layer_index, "A" | "B")``; frozen factors have no
    entry at all.
    """
    loss, d_weight, _ = _backprop(model, X, y)
    grads = {}
    for i in model.adapted_layers():
        ad = model.layers[i].adapter
        if selector.trains("B"):
            grads[(i, "B")] = ad.scale * (d_weight[i] @ ad.A.T)
        if selector.trains("A"):
            grads[(i, "A")] = ad.scale * (ad.B.T @ d_weight[i])
    return loss, grads


def sgd_step(model: LoraModel, grads, lr: float) -> LoraModel:
    if lr < 0:
        raise ValueError(f"lr must be non-negative, got {lr}")
    updated = {}
    for (i, factor), g in grads.items():
        ad = updated.get(i, model.adapter(i))
        current = getattr(ad, factor)
        if g.shape != current.shape:
            raise ValueError(
                f"gradient for layer {i} factor {factor} has shape {g.shape}, "
                f"expected {current.shape}"
            )
        updated[i] = replace(ad, **{factor: current - lr * g})
    return model.with_adapters(updated) if updated else model


def iterate_batches(n: int, batch_size: int, rng: np.random.Generator):
    order = rng.permutation(n)
    for start in range(0, n, batch_size):
        yield order[start:start + batch_size]


def local_train(model: LoraModel, X, y, selector: Selector, epochs: int,
                batch_size: int, lr: float, rng: np.random.Generator) -> LoraModel:
    """Mini-batch SGD on the selected factors; one shuffle per epoch."""
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y)
    if X.shape[0] == 0:
        raise ValueError("cannot train on an empty shard")
    if epochs < 1:
        raise ValueError(f"epochs must be >= 1, got {epochs}")
    if batch_size < 1:
        raise ValueError(f"batch_size must be >= 1, got {batch_size}")
    for _ in range(epochs):
        for idx in iterate_batches(X.shape[0], batch_size, rng):
            _, grads = loss_and_grads(model, X[idx], y[idx], selector)
            model = sgd_step(model, grads, lr)
    return model


def accuracy(model: LoraModel, X, y) -> float:
    return float(np.mean(predict(model, X) == np.asarray(y)))


def init_base_weights(architecture: str, input_dim: int, classes: int,
                      hidden: int, rng: np.random.Generator):
    """He-style random weights and zero biases for a fresh base network."""
    if architecture == "linear-softmax":
        dims = [(classes, input_dim)]
    elif architecture == "two-layer-mlp":
        dims = [(hidden, input_dim), (classes, hidden)]
    else:
        raise ValueError(f"unknown architecture {architecture!r}")
    weights = [sample_gaussian(m, n, np.sqrt(2.0 / n), rng) for m, n in dims]
    biases = [np.zeros(m) for m, _ in dims]
    return weights, biases


def pretrain_base(architecture: str, X, y, classes: int, *, hidden: int = DEFAULT_HIDDEN,
                  epochs: int = 10, batch_size: int = 32, lr: float = 0.05,
                  seed: int = 0) -> LoraModel:
    """Train every base weight on a pre-training split, then freeze the result."""
    rng = make_rng(seed)
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y)
    weights, biases = init_base_weights(architecture, X.shape[1], classes, hidden, rng)
    for _ in range(epochs):
        for idx in iterate_batches(X.shape[0], batch_size, rng):
            model = build_base_model(weights, biases, architecture)
            _, dw, db = _backprop(model, X[idx], y[idx])
            weights = [w - lr * g for w, g in zip(weights, dw)]
            biases = [b - lr * g for b, g in zip(biases, db)]
    return build_base_model(weights, biases, architecture)
