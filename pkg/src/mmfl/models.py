"""Small differentiable classifiers and the local mini-batch SGD trainer.

Two architectures, both operating on a single flat parameter vector:
a softmax-linear model and a tanh MLP with a softmax head. Loss is mean
cross-entropy; gradients are exact analytic backprop. The trainer runs K
passes of shuffled mini-batch SGD and reports the resulting weight change
``G = w_init - w_final``, so a server update subtracts it.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .topology import ProcessorRef


class DivergenceError(RuntimeError):
    """Raised when local training produces a non-finite loss or weights."""


@dataclass(frozen=True)
class ModelSpec:
    kind: str  # "softmax" or "mlp"
    feature_dim: int
    num_labels: int
    hidden_dims: tuple[int, ...] = ()

    def __post_init__(self) -> None:
        if self.kind not in ("softmax", "mlp"):
            raise ValueError(f"unknown model kind {self.kind!r}")
        if self.kind == "softmax" and self.hidden_dims:
            raise ValueError("softmax model takes no hidden_dims")
        if self.kind == "mlp" and not self.hidden_dims:
            raise ValueError("mlp model requires hidden_dims")
        if self.feature_dim < 1 or self.num_labels < 2:
            raise ValueError("need feature_dim >= 1 and num_labels >= 2")

    @property
    def layer_dims(self) -> tuple[tuple[int, int], ...]:
        dims = (self.feature_dim, *self.hidden_dims, self.num_labels)
        return tuple((dims[i], dims[i + 1]) for i in range(len(dims) - 1))

    @property
    def parameter_count(self) -> int:
        return sum(fan_in * fan_out + fan_out for fan_in, fan_out in self.layer_dims)


@dataclass(frozen=True)
class TrainConfig:
    """Local training hyperparameters.

    ``local_unit`` selects whether ``local_epochs`` counts full passes over
    the data ("epochs", the default) or single mini-batch steps ("steps").
    """

    local_epochs: int = 5
    batch_size: int = 32
    learning_rate: float = 0.05
    lr_schedule: str = "constant"  # "constant" or "inverse-round"
    lr_gamma: float = 32.0
    local_unit: str = "epochs"

    def __post_init__(self) -> None:
        if self.local_epochs < 1:
            raise ValueError("local_epochs must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be > 0")
        if self.lr_schedule not in ("constant", "inverse-round"):
            raise ValueError(f"unknown lr_schedule {self.lr_schedule!r}")
        if self.local_unit not in ("epochs", "steps"):
            raise ValueError(f"unknown local_unit {self.local_unit!r}")


@dataclass(frozen=True)
class LocalUpdate:
    """Weight change produced by one processor in one round."""

    delta: np.ndarray
    source: ProcessorRef
    model_id: int
    round_index: int
    steps: int = field(default=0, compare=False)

    def __post_init__(self) -> None:
        if not np.all(np.isfinite(self.delta)):
            raise ValueError("non-finite update delta")


def _unpack(weights: np.ndarray, spec: ModelSpec) -> list[tuple[np.ndarray, np.ndarray]]:
    if len(weights) != spec.parameter_count:
        raise ValueError(
            f"weight vector length {len(weights)} does not match "
            f"parameter_count {spec.parameter_count}"
        )
    layers = []
    offset = 0
    for fan_in, fan_out in spec.layer_dims:
        w = weights[offset : offset + fan_in * fan_out].reshape(fan_out, fan_in)
        offset += fan_in * fan_out
        b = weights[offset : offset + fan_out]
        offset += fan_out
        layers.append((w, b))
    return layers


def init_weights(spec: ModelSpec, seed: int) -> np.ndarray:
    """Deterministic scaled-uniform initialization from the given seed."""
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 77]))
    parts = []
    for fan_in, fan_out in spec.layer_dims:
        bound = 1.0 / np.sqrt(fan_in)
        parts.append(rng.uniform(-bound, bound, size=fan_in * fan_out))
        parts.append(np.zeros(fan_out))
    return np.concatenate(parts)


def _forward(
    weights: np.ndarray, features: np.ndarray, spec: ModelSpec
) -> tuple[np.ndarray, list[np.ndarray]]:
    """Returns (logits, activations); activations[i] feeds layer i."""
    layers = _unpack(weights, spec)
    activations = [features]
    a = features
    for idx, (w, b) in enumerate(layers):
        z = a @ w.T + b
        if idx < len(layers) - 1:
            a = np.tanh(z)
            activations.append(a)
        else:
            return z, activations
    raise AssertionError("unreachable")


def _log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def loss(
    weights: np.ndarray,
    features: np.ndarray,
    labels: np.ndarray,
    spec: ModelSpec,
) -> float:
    """Mean cross-entropy over all points; nonnegative."""
    if len(features) == 0:
        raise ValueError("empty dataset")
    if features.shape[1] != spec.feature_dim:
        raise ValueError(
            f"feature dim {features.shape[1]} != model dim {spec.feature_dim}"
        )
    logits, _ = _forward(weights, features, spec)
    logp = _log_softmax(logits)
    return float(-logp[np.arange(len(labels)), labels].mean())


def gradient(
    weights: np.ndarray,
    features: np.ndarray,
    labels: np.ndarray,
    spec: ModelSpec,
) -> np.ndarray:
    """Exact gradient of the mean batch cross-entropy, flat layout."""
    if len(features) == 0:
        raise ValueError("empty batch")
    if features.shape[1] != spec.feature_dim:
        raise ValueError(
            f"feature dim {features.shape[1]} != model dim {spec.feature_dim}"
        )
    layers = _unpack(weights, spec)
    logits, activations = _forward(weights, features, spec)

    probs = np.exp(_log_softmax(logits))
    n = len(labels)
    delta = probs
    delta[np.arange(n), labels] -= 1.0
    delta /= n

    grads: list[tuple[np.ndarray, np.ndarray]] = [None] * len(layers)  # type: ignore[list-item]
    for idx in range(len(layers) - 1, -1, -1):
        w, _ = layers[idx]
        a = activations[idx]
        grads[idx] = (delta.T @ a, delta.sum(axis=0))
        if idx > 0:
            # tanh'(z) = 1 - a^2 with a the post-activation output
            delta = (delta @ w) * (1.0 - a * a)

    return np.concatenate([np.concatenate([gw.ravel(), gb]) for gw, gb in grads])


def predict_labels(weights: np.ndarray, features: np.ndarray, spec: ModelSpec) -> np.ndarray:
    logits, _ = _forward(weights, features, spec)
    return logits.argmax(axis=1)


def accuracy(
    weights: np.ndarray, features: np.ndarray, labels: np.ndarray, spec: ModelSpec
) -> float:
    return float((predict_labels(weights, features, spec) == labels).mean())


def local_train(
    weights_init: np.ndarray,
    features: np.ndarray,
    labels: np.ndarray,
    spec: ModelSpec,
    config: TrainConfig,
    rng: np.random.Generator,
    *,
    source: ProcessorRef = ProcessorRef(0, 0),
    model_id: int = 0,
    round_index: int = 0,
) -> LocalUpdate:
    """Mini-batch SGD from ``weights_init``; returns ``G = w_init - w_final``.

    Each epoch shuffles the data with ``rng`` and steps through consecutive
    batches (final short batch included). In "steps" mode, ``local_epochs``
    counts individual batch updates instead of passes.
    """
    if len(features) == 0:
        raise ValueError("empty dataset")
    n = len(features)
    w = weights_init.copy()
    eta = config.learning_rate
    steps_done = 0

    def one_step(batch_idx: np.ndarray) -> None:
        nonlocal w, steps_done
        # overflow here is an expected condition, reported via the check below
        with np.errstate(over="ignore", invalid="ignore"):
            g = gradient(w, features[batch_idx], labels[batch_idx], spec)
            w = w - eta * g
        steps_done += 1
        if not np.all(np.isfinite(w)):
            raise DivergenceError(
                f"divergence: non-finite weights at round {round_index}, "
                f"model {model_id}, client {source.client_id}, step {steps_done}"
            )

    if config.local_unit == "epochs":
        for _ in range(config.local_epochs):
            order = rng.permutation(n)
            for start in range(0, n, config.batch_size):
                one_step(order[start : start + config.batch_size])
    else:
        order = rng.permutation(n)
        cursor = 0
        for _ in range(config.local_epochs):
            if cursor >= n:
                order = rng.permutation(n)
                cursor = 0
            one_step(order[cursor : cursor + config.batch_size])
            cursor += config.batch_size

    with np.errstate(over="ignore", invalid="ignore"):
        final_loss = loss(w, features, labels, spec)
    if not np.isfinite(final_loss):
        raise DivergenceError(
            f"divergence: non-finite loss at round {round_index}, "
            f"model {model_id}, client {source.client_id}"
        )
    return LocalUpdate(
        delta=weights_init - w,
        source=source,
        model_id=model_id,
        round_index=round_index,
        steps=steps_done,
    )
