"""Differentiable-model kernel.

Two flat-parameter classifiers with closed-form gradients (softmax regression
and a one-hidden-layer tanh MLP), cross-entropy loss, SGD/Adam steps, and the
seeded local-training routine a client runs in one round. Everything is
float64; a model is always a single flat vector so aggregation and compression
can treat it as opaque coordinates.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import seeding
from .compress import SparseDelta
from .errors import ConfigurationError, EmptyTrainSplit, NumericError

SOFTMAX = "softmax"
MLP = "mlp"


@dataclass(frozen=True)
class ModelSpec:
    """Classifier family. Bias terms are folded into the parameter vector via a
    constant input feature, so the model state is one vector of `param_dim`."""

    kind: str
    num_classes: int
    num_features: int
    hidden: int = 0

    def __post_init__(self) -> None:
        if self.kind not in (SOFTMAX, MLP):
            raise ConfigurationError(f"unknown model kind: {self.kind!r}")
        if self.num_classes < 2:
            raise ConfigurationError("num_classes must be >= 2")
        if self.num_features < 1:
            raise ConfigurationError("num_features must be >= 1")
        if self.kind == MLP and self.hidden < 1:
            raise ConfigurationError("mlp requires hidden >= 1")

    @property
    def param_dim(self) -> int:
        if self.kind == SOFTMAX:
            return self.num_classes * (self.num_features + 1)
        first = self.hidden * (self.num_features + 1)
        second = self.num_classes * (self.hidden + 1)
        return first + second


@dataclass(frozen=True)
class Batch:
    """A labelled mini-batch: features [b, p], integer class labels [b]."""

    features: np.ndarray
    labels: np.ndarray

    def __len__(self) -> int:
        return self.features.shape[0]


def init_params(model: ModelSpec, seed: int) -> np.ndarray:
    """Initial parameter vector. Softmax starts at zero (uniform predictive
    distribution); the MLP needs symmetry breaking and starts at small
    seeded Gaussians."""
    if model.kind == SOFTMAX:
        return np.zeros(model.param_dim)
    rng = seeding.substream(seed, seeding.INIT)
    return 0.1 * rng.standard_normal(model.param_dim)


def _check_inputs(params: np.ndarray, batch: Batch, model: ModelSpec) -> None:
    if params.shape != (model.param_dim,):
        raise ConfigurationError(
            f"parameter length {params.shape} does not match model dim {model.param_dim}"
        )
    if batch.features.ndim != 2 or batch.features.shape[1] != model.num_features:
        raise ConfigurationError(
            f"batch feature width {batch.features.shape} does not match model p={model.num_features}"
        )
    if len(batch) < 1:
        raise ConfigurationError("batch must contain at least one row")
    if batch.labels.min() < 0 or batch.labels.max() >= model.num_classes:
        raise ConfigurationError("batch labels out of range for model classes")


def _augment(x: np.ndarray) -> np.ndarray:
    return np.hstack([x, np.ones((x.shape[0], 1))])


def _unpack(params: np.ndarray, model: ModelSpec):
    if model.kind == SOFTMAX:
        return (params.reshape(model.num_classes, model.num_features + 1),)
    split = model.hidden * (model.num_features + 1)
    w1 = params[:split].reshape(model.hidden, model.num_features + 1)
    w2 = params[split:].reshape(model.num_classes, model.hidden + 1)
    return w1, w2


def logits(params: np.ndarray, features: np.ndarray, model: ModelSpec) -> np.ndarray:
    """Raw class scores [b, C] for a feature matrix [b, p]."""
    xa = _augment(features)
    if model.kind == SOFTMAX:
        (w,) = _unpack(params, model)
        return xa @ w.T
    w1, w2 = _unpack(params, model)
    hidden = np.tanh(xa @ w1.T)
    return _augment(hidden) @ w2.T


def _log_softmax(scores: np.ndarray) -> np.ndarray:
    shifted = scores - scores.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def loss(params: np.ndarray, batch: Batch, model: ModelSpec) -> float:
    """Mean cross-entropy of the batch under the model at `params`."""
    _check_inputs(params, batch, model)
    logp = _log_softmax(logits(params, batch.features, model))
    return float(-logp[np.arange(len(batch)), batch.labels].mean())


def per_row_loss(params: np.ndarray, batch: Batch, model: ModelSpec) -> np.ndarray:
    """Cross-entropy of each row, for pooled multi-client evaluation."""
    _check_inputs(params, batch, model)
    logp = _log_softmax(logits(params, batch.features, model))
    return -logp[np.arange(len(batch)), batch.labels]


def predict(params: np.ndarray, features: np.ndarray, model: ModelSpec) -> np.ndarray:
    """Argmax class per row (ties resolve to the lowest class index)."""
    return logits(params, features, model).argmax(axis=1)


def gradient(params: np.ndarray, batch: Batch, model: ModelSpec) -> np.ndarray:
    """Analytic gradient of `loss` with respect to the flat parameter vector."""
    _check_inputs(params, batch, model)
    b = len(batch)
    xa = _augment(batch.features)
    onehot = np.zeros((b, model.num_classes))
    onehot[np.arange(b), batch.labels] = 1.0

    if model.kind == SOFTMAX:
        probs = np.exp(_log_softmax(xa @ _unpack(params, model)[0].T))
        err = (probs - onehot) / b
        return (err.T @ xa).ravel()

    w1, w2 = _unpack(params, model)
    hidden = np.tanh(xa @ w1.T)
    ha = _augment(hidden)
    probs = np.exp(_log_softmax(ha @ w2.T))
    err = (probs - onehot) / b
    grad_w2 = err.T @ ha
    # Backprop through the hidden layer; the constant unit has no incoming weights.
    d_hidden = (err @ w2[:, : model.hidden]) * (1.0 - hidden * hidden)
    grad_w1 = d_hidden.T @ xa
    return np.concatenate([grad_w1.ravel(), grad_w2.ravel()])


@dataclass
class OptimizerState:
    """SGD or Adam state for one client's local training.

    A template (no moments allocated) describes the optimizer; `fresh()` yields
    an unbound copy so clients never share moment buffers.
    """

    kind: str
    learning_rate: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step_count: int = 0
    first_moment: np.ndarray | None = None
    second_moment: np.ndarray | None = None

    def __post_init__(self) -> None:
        if self.kind not in ("sgd", "adam"):
            raise ConfigurationError(f"unknown optimizer kind: {self.kind!r}")
        if self.learning_rate < 0:
            raise ConfigurationError("learning_rate must be >= 0")
        if not (0.0 <= self.beta1 < 1.0 and 0.0 <= self.beta2 < 1.0):
            raise ConfigurationError("adam betas must lie in [0, 1)")

    def fresh(self) -> "OptimizerState":
        return OptimizerState(self.kind, self.learning_rate, self.beta1, self.beta2, self.eps)


def optimizer_step(params: np.ndarray, grad: np.ndarray, state: OptimizerState) -> np.ndarray:
    """One update step; returns new params and advances `state` in place."""
    if params.shape != grad.shape:
        raise ConfigurationError("gradient length does not match parameters")
    if not np.all(np.isfinite(grad)):
        raise NumericError(f"non-finite gradient at optimizer step {state.step_count}")

    if state.kind == "sgd":
        state.step_count += 1
        return params - state.learning_rate * grad

    if state.first_moment is None:
        state.first_moment = np.zeros_like(params)
        state.second_moment = np.zeros_like(params)
    state.step_count += 1
    t = state.step_count
    state.first_moment = state.beta1 * state.first_moment + (1.0 - state.beta1) * grad
    state.second_moment = state.beta2 * state.second_moment + (1.0 - state.beta2) * grad * grad
    m_hat = state.first_moment / (1.0 - state.beta1**t)
    v_hat = state.second_moment / (1.0 - state.beta2**t)
    return params - state.learning_rate * m_hat / (np.sqrt(v_hat) + state.eps)


@dataclass
class ClientUpdate:
    """What one client sends back after local training.

    `delta` is the raw local parameter change (final - global). When a
    compressor is active, `sparse` holds the transmitted payload and the
    server must reconstruct through `payload_delta()`.
    """

    client_id: int
    num_samples: int
    delta: np.ndarray
    train_loss: float
    val_loss: float
    sparse: SparseDelta | None = None

    def payload_delta(self) -> np.ndarray:
        if self.sparse is not None:
            return self.sparse.densify()
        return self.delta


def client_update(
    global_params: np.ndarray,
    features: np.ndarray,
    labels: np.ndarray,
    train_indices: np.ndarray,
    val_indices: np.ndarray,
    client_id: int,
    model: ModelSpec,
    epochs: int,
    batch_size: int,
    optimizer: OptimizerState,
    run_seed: int,
    round_index: int,
    phase: int = 0,
) -> ClientUpdate:
    """Run `epochs` seeded passes over the client's training split.

    The mini-batch order is reshuffled per epoch from a stream keyed by
    (run_seed, client, round, epoch, phase), so results are identical no matter
    how client computations are scheduled. `phase` separates the ordinary round
    from an intermediate collection at the same round index.
    """
    if epochs < 1:
        raise ConfigurationError("epochs must be >= 1")
    if batch_size < 1:
        raise ConfigurationError("batch_size must be >= 1")
    n_train = len(train_indices)
    if n_train == 0:
        raise EmptyTrainSplit(f"client {client_id} has no training rows")

    params = global_params.copy()
    opt = optimizer.fresh()
    x_train = features[train_indices]
    y_train = labels[train_indices]

    for epoch in range(epochs):
        rng = seeding.substream(run_seed, seeding.BATCHES, client_id, round_index, epoch, phase)
        order = rng.permutation(n_train)
        for start in range(0, n_train, batch_size):
            rows = order[start : start + batch_size]
            grad = gradient(params, Batch(x_train[rows], y_train[rows]), model)
            params = optimizer_step(params, grad, opt)

    train_loss = loss(params, Batch(x_train, y_train), model)
    if len(val_indices) > 0:
        val_loss = loss(params, Batch(features[val_indices], labels[val_indices]), model)
    else:
        val_loss = float("nan")
    return ClientUpdate(
        client_id=client_id,
        num_samples=n_train,
        delta=params - global_params,
        train_loss=train_loss,
        val_loss=val_loss,
    )


def weighted_delta_mean(
    base: np.ndarray, deltas: list[np.ndarray], weights: np.ndarray
) -> np.ndarray:
    """base + sum_i (w_i / sum w) * delta_i, accumulated in the given order.

    Both the round aggregation and the participant-count search build candidate
    models through this single routine, so a full-dimension sparsifier is
    bit-identical to no compression at all.
    """
    w = np.asarray(weights, dtype=float)
    if len(deltas) == 0:
        raise ConfigurationError("cannot aggregate zero updates")
    if w.shape != (len(deltas),) or np.any(w <= 0):
        raise ConfigurationError("weights must be positive and match the update count")
    w = w / w.sum()
    acc = np.zeros_like(base)
    for wi, delta in zip(w, deltas):
        if delta.shape != base.shape:
            raise ConfigurationError("update dimension mismatch during aggregation")
        acc += wi * delta
    return base + acc
