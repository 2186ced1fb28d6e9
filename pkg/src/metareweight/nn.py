"""Dense numeric core: small MLP classifiers with per-example gradient access.

Everything is float64 numpy. Each layer matrix has shape (d_in + 1, d_out);
the extra row is the bias, driven by a constant-1 column appended to the
layer input. Models are treated as immutable: operations that change
parameters return a new model, so a lookahead step and the committed step
can share the same base parameters.

Per-example gradients are kept in factored form. For example i and layer l
the gradient of loss_i with respect to that layer is the outer product
inputs[l][i] (x) signals[l][i], so a batch of n full gradients costs
O(n * (d_in + d_out)) memory instead of O(n * d_in * d_out).
"""

import math
from dataclasses import dataclass

import numpy as np

from .errors import DimensionError, NonFiniteError

ACTIVATIONS = ("relu", "tanh", "sigmoid")


def _check_finite(name: str, arr: np.ndarray) -> None:
    if not np.isfinite(arr).all():
        raise NonFiniteError(f"{name} contains non-finite values")


def _augment_ones(x: np.ndarray) -> np.ndarray:
    """Append a constant-1 column: (n, d) -> (n, d + 1)."""
    n, d = x.shape
    out = np.empty((n, d + 1), dtype=np.float64)
    out[:, :d] = x
    out[:, d] = 1.0
    return out


@dataclass
class Batch:
    """A mini-batch of examples: float inputs (n, d) and integer labels (n,)."""

    inputs: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        self.inputs = np.asarray(self.inputs, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.inputs.ndim != 2:
            raise DimensionError(f"batch inputs must be 2-d, got shape {self.inputs.shape}")
        if self.labels.ndim != 1 or self.labels.shape[0] != self.inputs.shape[0]:
            raise DimensionError(
                f"batch labels shape {self.labels.shape} does not match "
                f"{self.inputs.shape[0]} inputs"
            )
        if len(self) == 0:
            raise DimensionError("batch must contain at least one example")

    def __len__(self) -> int:
        return self.inputs.shape[0]


@dataclass
class MLPModel:
    """Fully connected classifier. layers[l] has shape (d_{l-1} + 1, d_l)."""

    layers: list[np.ndarray]
    activation: str = "relu"

    def __post_init__(self):
        if self.activation not in ACTIVATIONS:
            raise DimensionError(f"unknown activation {self.activation!r}")
        if not self.layers:
            raise DimensionError("model needs at least one layer")
        self.layers = [np.asarray(w, dtype=np.float64) for w in self.layers]
        for l, w in enumerate(self.layers):
            if w.ndim != 2:
                raise DimensionError(f"layer {l} must be a matrix, got shape {w.shape}")
            if l > 0 and w.shape[0] != self.layers[l - 1].shape[1] + 1:
                raise DimensionError(
                    f"layer {l} expects {w.shape[0] - 1} inputs but layer {l - 1} "
                    f"produces {self.layers[l - 1].shape[1]}"
                )

    @classmethod
    def init(cls, sizes: list[int], activation: str = "relu", rng=None) -> "MLPModel":
        """Glorot-uniform weights, zero biases. sizes = [d_in, hidden..., classes]."""
        if len(sizes) < 2:
            raise DimensionError("need at least input and output sizes")
        if rng is None:
            rng = np.random.default_rng(0)
        layers = []
        for d_in, d_out in zip(sizes[:-1], sizes[1:]):
            limit = math.sqrt(6.0 / (d_in + d_out))
            w = rng.uniform(-limit, limit, size=(d_in, d_out))
            layers.append(np.vstack([w, np.zeros((1, d_out))]))
        return cls(layers=layers, activation=activation)

    @property
    def num_layers(self) -> int:
        return len(self.layers)

    @property
    def input_dim(self) -> int:
        return self.layers[0].shape[0] - 1

    @property
    def num_classes(self) -> int:
        return self.layers[-1].shape[1]

    @property
    def param_count(self) -> int:
        return sum(w.size for w in self.layers)

    def copy(self) -> "MLPModel":
        return MLPModel([w.copy() for w in self.layers], self.activation)

    def flatten(self) -> np.ndarray:
        return np.concatenate([w.ravel() for w in self.layers])

    def with_params(self, flat: np.ndarray) -> "MLPModel":
        """Rebuild a model of the same shape from a flat parameter vector."""
        flat = np.asarray(flat, dtype=np.float64)
        if flat.shape != (self.param_count,):
            raise DimensionError(
                f"flat parameter vector has {flat.size} entries, expected {self.param_count}"
            )
        layers = []
        offset = 0
        for w in self.layers:
            layers.append(flat[offset : offset + w.size].reshape(w.shape).copy())
            offset += w.size
        return MLPModel(layers, self.activation)


@dataclass
class ForwardCache:
    """Everything the forward pass saw, kept for the backward pass.

    post[l]: input actually fed to layer l, shape (n, d_{l-1} + 1), ones column
    included. post[0] is the augmented batch input.
    pre[l]: pre-activation output of layer l, shape (n, d_l). pre[-1] is logits.
    """

    post: list[np.ndarray]
    pre: list[np.ndarray]
    logits: np.ndarray
    probs: np.ndarray
    losses: np.ndarray


@dataclass
class PerExampleGrads:
    """Per-example loss gradients in factored (input, signal) form.

    inputs[l][i] is the layer-l input row for example i (bias column included),
    signals[l][i] is d loss_i / d preactivation_l. The full gradient of
    loss_i w.r.t. layer l is outer(inputs[l][i], signals[l][i]).
    """

    inputs: list[np.ndarray]
    signals: list[np.ndarray]

    def __post_init__(self):
        if len(self.inputs) != len(self.signals):
            raise DimensionError("inputs and signals must have one entry per layer")

    @property
    def count(self) -> int:
        return self.signals[0].shape[0]

    @property
    def num_layers(self) -> int:
        return len(self.signals)

    def layer_shapes(self) -> list[tuple[int, int]]:
        return [(z.shape[1], g.shape[1]) for z, g in zip(self.inputs, self.signals)]

    def flat(self) -> np.ndarray:
        """Materialize all gradients as rows: shape (n, param_count)."""
        parts = [
            np.einsum("np,nq->npq", z, g).reshape(self.count, -1)
            for z, g in zip(self.inputs, self.signals)
        ]
        return np.concatenate(parts, axis=1)

    def flat_one(self, i: int) -> np.ndarray:
        """Gradient of a single example as a flat vector."""
        parts = [np.outer(z[i], g[i]).ravel() for z, g in zip(self.inputs, self.signals)]
        return np.concatenate(parts)

    def norms_squared(self) -> np.ndarray:
        """Squared L2 norm of each example's gradient, via the rank-1 structure."""
        total = np.zeros(self.count)
        for z, g in zip(self.inputs, self.signals):
            total += (z * z).sum(axis=1) * (g * g).sum(axis=1)
        return total


_ACT = {
    "relu": lambda z: np.maximum(z, 0.0),
    "tanh": np.tanh,
    "sigmoid": lambda z: 1.0 / (1.0 + np.exp(-z)),
}

# Derivatives written in terms of the activation output. For relu the
# subgradient at exactly 0 is taken as 0.
_ACT_DERIV_FROM_POST = {
    "relu": lambda a: (a > 0.0).astype(np.float64),
    "tanh": lambda a: 1.0 - a * a,
    "sigmoid": lambda a: a * (1.0 - a),
}


def forward(model: MLPModel, batch: Batch) -> ForwardCache:
    """Forward pass with per-example softmax cross-entropy losses."""
    if batch.inputs.shape[1] != model.input_dim:
        raise DimensionError(
            f"batch has {batch.inputs.shape[1]} features, model expects {model.input_dim}"
        )
    _check_finite("batch inputs", batch.inputs)
    k = model.num_classes
    if batch.labels.min() < 0 or batch.labels.max() >= k:
        raise DimensionError(f"labels must lie in [0, {k})")

    act = _ACT[model.activation]
    post = [_augment_ones(batch.inputs)]
    pre = []
    a = post[0]
    last = model.num_layers - 1
    for l, w in enumerate(model.layers):
        z = a @ w
        pre.append(z)
        if l < last:
            a = _augment_ones(act(z))
            post.append(a)

    logits = pre[-1]
    n = len(batch)
    shifted = logits - logits.max(axis=1, keepdims=True)
    exp = np.exp(shifted)
    total = exp.sum(axis=1)
    log_total = np.log(total)
    losses = log_total - shifted[np.arange(n), batch.labels]
    probs = exp / total[:, None]
    return ForwardCache(post=post, pre=pre, logits=logits, probs=probs, losses=losses)


def backward_per_example(model: MLPModel, cache: ForwardCache, batch: Batch) -> PerExampleGrads:
    """Backward pass keeping each example's gradient separate (no averaging)."""
    n = len(batch)
    g = cache.probs.copy()
    g[np.arange(n), batch.labels] -= 1.0

    signals: list[np.ndarray] = [np.empty(0)] * model.num_layers
    signals[-1] = g
    for l in range(model.num_layers - 2, -1, -1):
        # Propagate through layer l+1 weights, dropping the bias row, then
        # through the activation of layer l.
        inner = signals[l + 1] @ model.layers[l + 1][:-1].T
        post_act = cache.post[l + 1][:, :-1]
        signals[l] = inner * _ACT_DERIV_FROM_POST[model.activation](post_act)
    return PerExampleGrads(inputs=cache.post, signals=signals)


def weighted_gradient(grads: PerExampleGrads, weights: np.ndarray) -> np.ndarray:
    """Flat gradient of sum_i weights[i] * loss_i."""
    w = np.asarray(weights, dtype=np.float64)
    if w.shape != (grads.count,):
        raise DimensionError(f"weights shape {w.shape} does not match {grads.count} examples")
    # Scale the signal factor rather than the input factor: signals have the
    # layer's output width, which is never wider than the augmented input.
    parts = [
        (z.T @ (g * w[:, None])).ravel() for z, g in zip(grads.inputs, grads.signals)
    ]
    return np.concatenate(parts)


def dot_with_each(grads: PerExampleGrads, flat: np.ndarray) -> np.ndarray:
    """Vector of <grad_i, flat> for every example i, without materializing grads."""
    flat = np.asarray(flat, dtype=np.float64)
    shapes = grads.layer_shapes()
    expected = sum(p * q for p, q in shapes)
    if flat.shape != (expected,):
        raise DimensionError(f"flat vector has {flat.size} entries, expected {expected}")
    out = np.zeros(grads.count)
    offset = 0
    for (p, q), z, g in zip(shapes, grads.inputs, grads.signals):
        v = flat[offset : offset + p * q].reshape(p, q)
        out += ((z @ v) * g).sum(axis=1)
        offset += p * q
    return out


def sgd_step(model: MLPModel, grad_flat: np.ndarray, alpha: float) -> MLPModel:
    """Return a new model with parameters theta - alpha * grad."""
    grad_flat = np.asarray(grad_flat, dtype=np.float64)
    if grad_flat.shape != (model.param_count,):
        raise DimensionError(
            f"gradient has {grad_flat.size} entries, expected {model.param_count}"
        )
    if alpha < 0:
        raise ValueError("step size must be nonnegative")
    _check_finite("gradient", grad_flat)
    layers = []
    offset = 0
    for w in model.layers:
        step = grad_flat[offset : offset + w.size].reshape(w.shape) * (-alpha)
        step += w
        layers.append(step)
        offset += w.size
    return MLPModel(layers, model.activation)


def mean_loss(model: MLPModel, batch: Batch) -> float:
    return float(forward(model, batch).losses.mean())


def finite_diff_grad(model: MLPModel, evaluator, h=1e-5) -> np.ndarray:
    """Central-difference gradient of evaluator(model) over all parameters.

    h may be a scalar or a per-coordinate array. Meant for tests and
    verification; cost is 2 * param_count evaluations.
    """
    theta = model.flatten()
    h_arr = np.broadcast_to(np.asarray(h, dtype=np.float64), theta.shape)
    grad = np.empty_like(theta)
    for k in range(theta.size):
        hk = h_arr[k]
        plus = theta.copy()
        plus[k] += hk
        minus = theta.copy()
        minus[k] -= hk
        grad[k] = (evaluator(model.with_params(plus)) - evaluator(model.with_params(minus))) / (
            2.0 * hk
        )
    return grad
