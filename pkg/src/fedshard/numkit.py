"""Small deterministic model core: softmax classifiers on flat float64 vectors.

Parameters are always a 1-D ``float64`` array.  The canonical layout is the
weight matrices of every layer (row-major, input-major) followed by the bias
vectors of every layer, in layer order.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


class RejectedInputError(ValueError):
    """Input with the wrong shape, range or size."""


class DegenerateVectorError(ValueError):
    """A zero-norm vector was passed where a direction is needed."""


@dataclass(frozen=True)
class ModelSpec:
    input_dim: int
    num_labels: int
    architecture: str = "linear"  # "linear" | "mlp"
    hidden: int = 16
    activation: str = "tanh"

    def __post_init__(self):
        if self.input_dim < 1:
            raise RejectedInputError("input_dim must be >= 1")
        if self.num_labels < 2:
            raise RejectedInputError("num_labels must be >= 2")
        if self.architecture not in ("linear", "mlp"):
            raise RejectedInputError(f"unknown architecture {self.architecture!r}")
        if self.architecture == "mlp":
            if self.hidden < 1:
                raise RejectedInputError("hidden must be >= 1")
            if self.activation not in _ACTIVATIONS:
                raise RejectedInputError(f"unknown activation {self.activation!r}")

    @property
    def layer_dims(self) -> list[tuple[int, int]]:
        if self.architecture == "linear":
            return [(self.input_dim, self.num_labels)]
        return [(self.input_dim, self.hidden), (self.hidden, self.num_labels)]

    @property
    def num_params(self) -> int:
        return sum(i * o + o for i, o in self.layer_dims)

    def to_dict(self) -> dict:
        return {
            "input_dim": self.input_dim,
            "num_labels": self.num_labels,
            "architecture": self.architecture,
            "hidden": self.hidden,
            "activation": self.activation,
        }


def _tanh_grad(z, a):
    return 1.0 - a * a


def _relu(z):
    return np.maximum(z, 0.0)


def _relu_grad(z, a):
    return (z > 0).astype(np.float64)


_ACTIVATIONS = {
    "tanh": (np.tanh, _tanh_grad),
    "relu": (_relu, _relu_grad),
}


@dataclass(frozen=True)
class EvalReport:
    accuracy: float
    mean_loss: float
    sample_count: int
    correct: int


def unpack(params: np.ndarray, spec: ModelSpec) -> tuple[list[np.ndarray], list[np.ndarray]]:
    """Views of ``params`` as per-layer weight matrices and bias vectors."""
    params = np.asarray(params)
    if params.ndim != 1 or params.shape[0] != spec.num_params:
        raise RejectedInputError(
            f"parameter vector has shape {params.shape}, expected ({spec.num_params},)"
        )
    weights, biases = [], []
    offset = 0
    for i, o in spec.layer_dims:
        weights.append(params[offset : offset + i * o].reshape(i, o))
        offset += i * o
    for _, o in spec.layer_dims:
        biases.append(params[offset : offset + o])
        offset += o
    return weights, biases


def pack(weights: list[np.ndarray], biases: list[np.ndarray]) -> np.ndarray:
    return np.concatenate([w.ravel() for w in weights] + [b.ravel() for b in biases]).astype(
        np.float64
    )


def init_params(spec: ModelSpec, seed: int) -> np.ndarray:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights and biases."""
    rng = np.random.default_rng(seed)
    weights, biases = [], []
    for fan_in, fan_out in spec.layer_dims:
        bound = 1.0 / math.sqrt(fan_in)
        weights.append(rng.uniform(-bound, bound, size=(fan_in, fan_out)))
        biases.append(rng.uniform(-bound, bound, size=fan_out))
    return pack(weights, biases)


def _check_batch(features, labels, spec: ModelSpec) -> tuple[np.ndarray, np.ndarray]:
    x = np.asarray(features, dtype=np.float64)
    y = np.asarray(labels)
    if x.ndim != 2 or x.shape[0] == 0:
        raise RejectedInputError("batch must be a non-empty 2-D feature matrix")
    if x.shape[1] != spec.input_dim:
        raise RejectedInputError(f"feature width {x.shape[1]} != input_dim {spec.input_dim}")
    if y.shape != (x.shape[0],):
        raise RejectedInputError("labels must be a vector matching the feature rows")
    if y.size and (y.min() < 0 or y.max() >= spec.num_labels):
        raise RejectedInputError("labels out of range")
    return x, y.astype(np.int64)


def _forward(params, x, spec):
    weights, biases = unpack(params, spec)
    acts = [x]
    pre = []
    h = x
    for k, (w, b) in enumerate(zip(weights, biases)):
        z = h @ w + b
        if k < len(weights) - 1:
            fn, _ = _ACTIVATIONS[spec.activation]
            pre.append(z)
            h = fn(z)
            acts.append(h)
        else:
            h = z
    return h, acts, pre, weights


def _log_softmax(logits):
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def predict_logits(params: np.ndarray, features, spec: ModelSpec) -> np.ndarray:
    x = np.asarray(features, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != spec.input_dim:
        raise RejectedInputError("feature matrix does not match the model input width")
    return _forward(params, x, spec)[0]


def loss_and_grad(params: np.ndarray, features, labels, spec: ModelSpec) -> tuple[float, np.ndarray]:
    """Mean softmax cross-entropy and its gradient in canonical layout."""
    x, y = _check_batch(features, labels, spec)
    n = x.shape[0]
    logits, acts, pre, weights = _forward(params, x, spec)
    logp = _log_softmax(logits)
    loss = float(-logp[np.arange(n), y].mean())

    delta = np.exp(logp)
    delta[np.arange(n), y] -= 1.0
    delta /= n

    grads_w: list[np.ndarray] = [None] * len(weights)  # type: ignore[list-item]
    grads_b: list[np.ndarray] = [None] * len(weights)  # type: ignore[list-item]
    for k in range(len(weights) - 1, -1, -1):
        grads_w[k] = acts[k].T @ delta
        grads_b[k] = delta.sum(axis=0)
        if k > 0:
            _, dfn = _ACTIVATIONS[spec.activation]
            delta = (delta @ weights[k].T) * dfn(pre[k - 1], acts[k])
    return loss, pack(grads_w, grads_b)


def local_train(
    params: np.ndarray,
    features,
    labels,
    steps: int,
    lr: float,
    spec: ModelSpec,
    batch_size: int | None = None,
    rng: np.random.Generator | None = None,
) -> np.ndarray:
    """Run ``steps`` gradient-descent steps and return new parameters.

    Full-batch by default.  With ``batch_size`` set, each step uses the next
    slice of a permutation drawn from ``rng`` (reshuffled once per pass).
    """
    x, y = np.asarray(features, dtype=np.float64), np.asarray(labels)
    if x.ndim != 2 or x.shape[0] == 0:
        raise RejectedInputError("cannot train on an empty dataset")
    if steps < 0:
        raise RejectedInputError("steps must be >= 0")
    theta = np.array(params, dtype=np.float64, copy=True)
    n = x.shape[0]
    if batch_size is None or batch_size >= n:
        for _ in range(steps):
            _, g = loss_and_grad(theta, x, y, spec)
            theta = theta - lr * g
        return theta

    if rng is None:
        raise RejectedInputError("mini-batch mode needs an explicit rng")
    order = rng.permutation(n)
    pos = 0
    for _ in range(steps):
        if pos + batch_size > n:
            order = rng.permutation(n)
            pos = 0
        idx = order[pos : pos + batch_size]
        pos += batch_size
        _, g = loss_and_grad(theta, x[idx], y[idx], spec)
        theta = theta - lr * g
    return theta


def angle_between(u: np.ndarray, v: np.ndarray) -> float:
    """Angle in radians in [0, pi]; the cosine is clamped before arccos."""
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if u.shape != v.shape:
        raise RejectedInputError("vectors must have the same length")
    nu = float(np.linalg.norm(u))
    nv = float(np.linalg.norm(v))
    if nu == 0.0 or nv == 0.0:
        raise DegenerateVectorError("angle undefined for a zero vector")
    cos = float(np.dot(u, v)) / (nu * nv)
    return math.acos(min(1.0, max(-1.0, cos)))


def evaluate(params: np.ndarray, features, labels, spec: ModelSpec) -> EvalReport:
    x, y = _check_batch(features, labels, spec)
    logits = _forward(params, x, spec)[0]
    # np.argmax returns the first maximum: ties go to the lowest label.
    pred = np.argmax(logits, axis=1)
    correct = int((pred == y).sum())
    logp = _log_softmax(logits)
    loss = float(-logp[np.arange(x.shape[0]), y].mean())
    return EvalReport(
        accuracy=correct / x.shape[0], mean_loss=loss, sample_count=x.shape[0], correct=correct
    )
