"""
Dense network engine.
Forward/backward passes, CE and GCE losses with closed-form gradients,
temperature softmax and momentum SGD. All arithmetic is float64.
"""

import logging
from typing import Union

import numpy as np

from app.models.network import ClassifierModel, GradientBuffer, OptimizerState
from app.services.errors import (
    LabelIndexError,
    ParameterError,
    ShapeError,
    TrainingError,
)

logger = logging.getLogger(__name__)

# Floor applied to p_y before raising it to the power q
PROB_FLOOR = 1e-12


# ============================================================
# Model construction
# ============================================================


def init_model(layer_sizes: list[int], seed: int) -> ClassifierModel:
    """
    Create a dense network with uniform fan-in initialization.

    Weights and biases of a layer with fan-in m are drawn from U(-1/sqrt(m), 1/sqrt(m)).

    Args:
        layer_sizes: [input_dim, hidden..., num_classes]
        seed: Seed for the initializer

    Returns:
        Freshly initialized ClassifierModel
    """
    if len(layer_sizes) < 2 or any(s < 1 for s in layer_sizes):
        raise ShapeError(f"Invalid layer sizes: {layer_sizes}")

    rng = np.random.default_rng(seed)
    layers = []
    for fan_in, fan_out in zip(layer_sizes[:-1], layer_sizes[1:]):
        bound = 1.0 / np.sqrt(fan_in)
        weight = rng.uniform(-bound, bound, size=(fan_out, fan_in))
        bias = rng.uniform(-bound, bound, size=fan_out)
        layers.append((weight, bias))
    return ClassifierModel(layers=layers)


def mlp_for(input_dim: int, num_classes: int, hidden_width: int, seed: int) -> ClassifierModel:
    """One-hidden-layer rectifier MLP, the default architecture."""
    return init_model([input_dim, hidden_width, num_classes], seed)


def zeros_model(layer_sizes: list[int]) -> ClassifierModel:
    """All-zero parameters (uniform softmax on every input)."""
    return ClassifierModel(
        layers=[
            (np.zeros((fan_out, fan_in)), np.zeros(fan_out))
            for fan_in, fan_out in zip(layer_sizes[:-1], layer_sizes[1:])
        ]
    )


def copy_model(model: ClassifierModel) -> ClassifierModel:
    return ClassifierModel(
        layers=[(w.copy(), b.copy()) for w, b in model.layers],
        activation=model.activation,
    )


def models_equal(a: ClassifierModel, b: ClassifierModel) -> bool:
    """Bitwise parameter equality."""
    if a.layer_sizes != b.layer_sizes:
        return False
    return all(
        np.array_equal(wa, wb) and np.array_equal(ba, bb)
        for (wa, ba), (wb, bb) in zip(a.layers, b.layers)
    )


# ============================================================
# Forward / backward
# ============================================================


def forward(
    model: ClassifierModel,
    features: np.ndarray,
    return_activations: bool = False,
):
    """
    Compute logits for a batch (or a single feature vector).

    Args:
        model: ClassifierModel
        features: n x d array, or a single length-d vector
        return_activations: Also return the per-layer inputs and pre-activations
            needed by backward()

    Returns:
        logits (n x K, or length K for a single vector); with
        return_activations, a tuple (logits, cache)
    """
    x = np.asarray(features, dtype=np.float64)
    single = x.ndim == 1
    if single:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != model.input_dim:
        raise ShapeError(
            f"Feature dimension {x.shape[-1]} does not match model input size {model.input_dim}"
        )

    inputs = []
    pre_activations = []
    h = x
    last = len(model.layers) - 1
    for idx, (weight, bias) in enumerate(model.layers):
        inputs.append(h)
        z = h @ weight.T + bias
        pre_activations.append(z)
        h = z if idx == last else np.maximum(z, 0.0)

    logits = h[0] if single else h
    if return_activations:
        return logits, (inputs, pre_activations)
    return logits


def backward(model: ClassifierModel, cache, dlogits: np.ndarray) -> GradientBuffer:
    """
    Backpropagate logit gradients through the network.

    Args:
        model: Model used for the forward pass
        cache: Activations returned by forward(..., return_activations=True)
        dlogits: n x K gradient of the (already batch-averaged) loss

    Returns:
        GradientBuffer shape-congruent with model
    """
    inputs, pre_activations = cache
    delta = np.atleast_2d(dlogits)
    grads = [None] * len(model.layers)

    for idx in range(len(model.layers) - 1, -1, -1):
        weight, _ = model.layers[idx]
        grads[idx] = (delta.T @ inputs[idx], delta.sum(axis=0))
        if idx > 0:
            delta = (delta @ weight) * (pre_activations[idx - 1] > 0.0)

    return GradientBuffer(layers=grads)


def predict(model: ClassifierModel, features: np.ndarray, chunk_size: int = 8192) -> np.ndarray:
    """Argmax class per row; ties break to the lowest class index."""
    return predict_logits(model, features, chunk_size).argmax(axis=1)


def predict_logits(model: ClassifierModel, features: np.ndarray, chunk_size: int = 8192) -> np.ndarray:
    """Logits for a large feature matrix, evaluated in fixed-size chunks."""
    n = features.shape[0]
    if n == 0:
        return np.zeros((0, model.num_classes))
    parts = [forward(model, features[i:i + chunk_size]) for i in range(0, n, chunk_size)]
    return np.concatenate(parts, axis=0)


# ============================================================
# Softmax and losses
# ============================================================


def softmax_with_temperature(logits: np.ndarray, tau: float = 1.0) -> np.ndarray:
    """
    Softmax of logits / tau along the last axis, with max subtraction.

    Raises:
        ParameterError: If tau <= 0
    """
    if not tau > 0:
        raise ParameterError(f"Temperature must be > 0, got {tau}")
    z = np.asarray(logits, dtype=np.float64) / tau
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def _check_labels(logits: np.ndarray, y) -> tuple[np.ndarray, np.ndarray, bool]:
    """Normalize (logits, y) to 2-D / 1-D arrays and range-check labels."""
    z = np.asarray(logits, dtype=np.float64)
    single = z.ndim == 1
    if single:
        z = z[None, :]
    labels = np.atleast_1d(np.asarray(y, dtype=np.int64))
    if labels.shape[0] != z.shape[0]:
        raise ShapeError(f"{labels.shape[0]} labels for {z.shape[0]} logit rows")
    k = z.shape[1]
    if ((labels < 0) | (labels >= k)).any():
        raise LabelIndexError(f"Class index out of range [0, {k})")
    return z, labels, single


def ce_loss_and_grad(logits: np.ndarray, y: Union[int, np.ndarray]):
    """
    Cross-entropy loss and its gradient with respect to the logits.

    Args:
        logits: length-K vector or n x K matrix
        y: Class index, or n class indices

    Returns:
        (loss, grad): loss = -z_y + logsumexp(z); grad = softmax(z) - one_hot(y).
        Scalar loss / length-K grad for a single vector; arrays of n otherwise.
    """
    z, labels, single = _check_labels(logits, y)
    rows = np.arange(z.shape[0])

    log_p = _log_softmax(z)
    p = np.exp(log_p)
    loss = -log_p[rows, labels]
    grad = p
    grad[rows, labels] -= 1.0

    if single:
        return float(loss[0]), grad[0]
    return loss, grad


def gce_loss_and_grad(logits: np.ndarray, y: Union[int, np.ndarray], q: float = 0.7):
    """
    Generalized cross-entropy (1 - p_y^q) / q at temperature 1.

    The gradient is the CE gradient scaled by p_y^q, which emphasizes examples
    the model already fits.

    Args:
        logits: length-K vector or n x K matrix
        y: Class index, or n class indices
        q: GCE parameter in (0, 1]

    Returns:
        (loss, grad), shaped as in ce_loss_and_grad
    """
    if not 0.0 < q <= 1.0:
        raise ParameterError(f"GCE q must be in (0, 1], got {q}")
    z, labels, single = _check_labels(logits, y)
    rows = np.arange(z.shape[0])

    p = np.exp(_log_softmax(z))
    p_y = np.clip(p[rows, labels], PROB_FLOOR, 1.0)
    scale = p_y ** q
    loss = (1.0 - scale) / q

    grad = p
    grad[rows, labels] -= 1.0
    grad *= scale[:, None]

    if single:
        return float(loss[0]), grad[0]
    return loss, grad


def loss_and_grad(logits: np.ndarray, y, loss_kind: str = "ce", q: float = 0.7):
    """Dispatch on loss kind ('ce' or 'gce')."""
    if loss_kind == "ce":
        return ce_loss_and_grad(logits, y)
    if loss_kind == "gce":
        return gce_loss_and_grad(logits, y, q)
    raise ParameterError(f"Unknown loss kind: {loss_kind}")


# ============================================================
# Optimizer
# ============================================================


def sgd_step(
    model: ClassifierModel,
    grads: GradientBuffer,
    state: OptimizerState,
    step_index: int,
) -> ClassifierModel:
    """
    One momentum SGD step, in place.

    velocity <- momentum * velocity + grad + weight_decay * param
    param    <- param - lr_t * velocity

    Args:
        model: Model to update (mutated)
        grads: Gradients, shape-congruent with model
        state: Optimizer state (velocity mutated)
        step_index: 0-based step, drives the learning-rate schedule

    Returns:
        The updated model

    Raises:
        ShapeError: If grads do not match the model
        TrainingError: If a gradient or updated parameter is non-finite
    """
    if not grads.matches(model):
        raise ShapeError("Gradient buffer is not shape-congruent with the model")
    if not grads.is_finite():
        raise TrainingError("Non-finite gradient", step_index)
    if not state.velocity:
        state.velocity = [(np.zeros_like(w), np.zeros_like(b)) for w, b in model.layers]

    lr = state.lr_at(step_index)
    updates = []
    for (weight, bias), (gw, gb), (vw, vb) in zip(model.layers, grads.layers, state.velocity):
        new_vw = state.momentum * vw + (gw + state.weight_decay * weight)
        new_vb = state.momentum * vb + (gb + state.weight_decay * bias)
        updates.append((new_vw, new_vb, weight - lr * new_vw, bias - lr * new_vb))

    # Nothing is written until every new parameter is finite
    if not all(np.isfinite(w).all() and np.isfinite(b).all() for _, _, w, b in updates):
        raise TrainingError("Non-finite parameter after update", step_index)
    for (weight, bias), (vw, vb), (new_vw, new_vb, new_w, new_b) in zip(model.layers, state.velocity, updates):
        vw[...] = new_vw
        vb[...] = new_vb
        weight[...] = new_w
        bias[...] = new_b
    return model
