"""Minimal MLP core shared by the prediction models and the RL agent.

Plain numpy, float64, fully deterministic under a seed: rectified-linear
hidden layers, a softmax-cross-entropy head for classifiers or an identity
head for Q-values, hand-written backprop, and two optimizers (adaptive
moments for supervised fits, RMSProp with global gradient-norm clipping
for the agent).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np

HEADS = ("softmax", "identity")

MODEL_FORMAT = "rehabkit-mlp-v1"


class TrainingDivergedError(RuntimeError):
    def __init__(self, epoch: int, loss: float):
        super().__init__(f"non-finite loss {loss!r} at epoch {epoch}")
        self.epoch = epoch


@dataclass(frozen=True)
class MlpSpec:
    input_width: int
    hidden: tuple[int, ...]
    output_width: int
    head: str = "softmax"
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "hidden", tuple(int(w) for w in self.hidden))
        if self.input_width < 1 or self.output_width < 1:
            raise ValueError("input and output widths must be >= 1")
        if not 1 <= len(self.hidden) <= 3:
            raise ValueError("hidden layer count must be within 1..3")
        if any(w < 1 for w in self.hidden):
            raise ValueError("hidden widths must be >= 1")
        if self.head not in HEADS:
            raise ValueError(f"head must be one of {HEADS}")

    @property
    def layer_sizes(self) -> tuple[int, ...]:
        return (self.input_width, *self.hidden, self.output_width)


@dataclass
class MlpParams:
    spec: MlpSpec
    weights: list[np.ndarray]
    biases: list[np.ndarray]

    def copy(self) -> "MlpParams":
        return MlpParams(
            spec=self.spec,
            weights=[w.copy() for w in self.weights],
            biases=[b.copy() for b in self.biases],
        )

    def n_parameters(self) -> int:
        return sum(w.size for w in self.weights) + sum(b.size for b in self.biases)


# Gradients carry the same per-layer structure as the parameters.
Grads = tuple[list[np.ndarray], list[np.ndarray]]


def init_params(spec: MlpSpec) -> MlpParams:
    """He-style uniform init scaled by fan-in; biases start at zero."""
    rng = np.random.default_rng(spec.seed)
    sizes = spec.layer_sizes
    weights, biases = [], []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        bound = np.sqrt(6.0 / fan_in)
        weights.append(rng.uniform(-bound, bound, size=(fan_in, fan_out)))
        biases.append(np.zeros(fan_out))
    return MlpParams(spec=spec, weights=weights, biases=biases)


@dataclass
class ForwardCache:
    activations: list[np.ndarray]  # layer inputs: X, h1, ..., hL
    pre_acts: list[np.ndarray]  # hidden pre-activations, for the ReLU mask


def _as_batch(x: np.ndarray) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        return x[None, :], True
    return x, False


def forward_cached(params: MlpParams, x: np.ndarray) -> tuple[np.ndarray, ForwardCache]:
    """Return pre-head outputs (logits / Q-values) and the backprop cache."""
    batch, _ = _as_batch(x)
    if batch.shape[1] != params.spec.input_width:
        raise ValueError(
            f"input width {batch.shape[1]} != spec width {params.spec.input_width}"
        )
    activations = [batch]
    pre_acts = []
    a = batch
    n_layers = len(params.weights)
    for l in range(n_layers - 1):
        z = a @ params.weights[l] + params.biases[l]
        pre_acts.append(z)
        a = np.maximum(z, 0.0)
        activations.append(a)
    out = a @ params.weights[-1] + params.biases[-1]
    return out, ForwardCache(activations=activations, pre_acts=pre_acts)


def softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - np.max(logits, axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / np.sum(e, axis=-1, keepdims=True)


def forward(params: MlpParams, x: np.ndarray) -> np.ndarray:
    """Apply the network including its output head."""
    out, _ = forward_cached(params, x)
    if params.spec.head == "softmax":
        out = softmax(out)
    if np.asarray(x).ndim == 1:
        return out[0]
    return out


def backward(params: MlpParams, cache: ForwardCache, d_out: np.ndarray) -> Grads:
    """Backpropagate d(loss)/d(pre-head output) into parameter gradients."""
    d_out = np.atleast_2d(np.asarray(d_out, dtype=float))
    if d_out.shape != (cache.activations[0].shape[0], params.spec.output_width):
        raise ValueError(f"loss-gradient shape {d_out.shape} mismatches the forward cache")
    n_layers = len(params.weights)
    d_weights: list[np.ndarray] = [None] * n_layers  # type: ignore[list-item]
    d_biases: list[np.ndarray] = [None] * n_layers  # type: ignore[list-item]
    delta = d_out
    for l in range(n_layers - 1, -1, -1):
        d_weights[l] = cache.activations[l].T @ delta
        d_biases[l] = delta.sum(axis=0)
        if l > 0:
            delta = (delta @ params.weights[l].T) * (cache.pre_acts[l - 1] > 0)
    return d_weights, d_biases


def softmax_cross_entropy(
    logits: np.ndarray, labels: np.ndarray
) -> tuple[float, np.ndarray]:
    """Mean cross-entropy over the batch and its gradient w.r.t. the logits."""
    logits = np.atleast_2d(logits)
    labels = np.asarray(labels, dtype=int)
    n = logits.shape[0]
    shifted = logits - np.max(logits, axis=1, keepdims=True)
    log_z = np.log(np.sum(np.exp(shifted), axis=1))
    log_probs = shifted - log_z[:, None]
    loss = float(-np.mean(log_probs[np.arange(n), labels]))
    d_logits = np.exp(log_probs)
    d_logits[np.arange(n), labels] -= 1.0
    return loss, d_logits / n


def global_norm(grads: Grads) -> float:
    total = 0.0
    for arr in (*grads[0], *grads[1]):
        total += float(np.sum(arr * arr))
    return float(np.sqrt(total))


def clip_by_global_norm(grads: Grads, max_norm: float) -> Grads:
    norm = global_norm(grads)
    if norm <= max_norm or norm == 0.0:
        return grads
    scale = max_norm / norm
    return ([g * scale for g in grads[0]], [g * scale for g in grads[1]])


@dataclass
class AdamState:
    """Adaptive-moment optimizer state (decays 0.9/0.999, epsilon 1e-8)."""

    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: Optional[Grads] = None
    v: Optional[Grads] = None

    def _ensure(self, params: MlpParams):
        if self.m is None:
            self.m = ([np.zeros_like(w) for w in params.weights],
                      [np.zeros_like(b) for b in params.biases])
            self.v = ([np.zeros_like(w) for w in params.weights],
                      [np.zeros_like(b) for b in params.biases])


def adam_step(state: AdamState, params: MlpParams, grads: Grads) -> MlpParams:
    state._ensure(params)
    state.t += 1
    bc1 = 1.0 - state.beta1**state.t
    bc2 = 1.0 - state.beta2**state.t
    for kind, tensors in ((0, params.weights), (1, params.biases)):
        for i, p in enumerate(tensors):
            g = grads[kind][i]
            m = state.m[kind][i]
            v = state.v[kind][i]
            m *= state.beta1
            m += (1.0 - state.beta1) * g
            v *= state.beta2
            v += (1.0 - state.beta2) * g * g
            p -= state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
    return params


@dataclass
class RmsPropState:
    """RMSProp state with optional global gradient-norm clipping."""

    lr: float = 0.001
    decay: float = 0.99
    eps: float = 1e-8
    clip_norm: Optional[float] = 1.0
    t: int = 0
    sq: Optional[Grads] = None

    def __post_init__(self):
        if self.clip_norm is not None and self.clip_norm <= 0:
            raise ValueError("clip threshold must be > 0 when present")

    def _ensure(self, params: MlpParams):
        if self.sq is None:
            self.sq = ([np.zeros_like(w) for w in params.weights],
                       [np.zeros_like(b) for b in params.biases])


def rms_step(state: RmsPropState, params: MlpParams, grads: Grads) -> MlpParams:
    """One RMSProp update; gradients are norm-clipped before the accumulators."""
    state._ensure(params)
    if state.clip_norm is not None:
        grads = clip_by_global_norm(grads, state.clip_norm)
    state.t += 1
    for kind, tensors in ((0, params.weights), (1, params.biases)):
        for i, p in enumerate(tensors):
            g = grads[kind][i]
            sq = state.sq[kind][i]
            sq *= state.decay
            sq += (1.0 - state.decay) * g * g
            p -= state.lr * g / (np.sqrt(sq) + state.eps)
    return params


def fit_classifier(
    spec: MlpSpec,
    x: np.ndarray,
    y: np.ndarray,
    learning_rate: float,
    tolerance: float = 1e-4,
    max_epochs: int = 200,
) -> tuple[MlpParams, list[float]]:
    """Full-batch Adam training of a softmax classifier.

    Stops when the absolute change of the epoch loss drops below the
    tolerance, or at the epoch cap. Returns the fitted parameters and the
    per-epoch loss history (loss evaluated before each update).
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=int)
    if x.shape[0] == 0:
        raise ValueError("empty dataset")
    if np.any(y < 0) or np.any(y >= spec.output_width):
        raise ValueError("labels out of range for the output width")
    params = init_params(spec)
    state = AdamState(lr=learning_rate)
    history: list[float] = []
    for epoch in range(max_epochs):
        logits, cache = forward_cached(params, x)
        loss, d_logits = softmax_cross_entropy(logits, y)
        if not np.isfinite(loss):
            raise TrainingDivergedError(epoch, loss)
        history.append(loss)
        if len(history) >= 2 and abs(history[-2] - history[-1]) < tolerance:
            break
        grads = backward(params, cache, d_logits)
        adam_step(state, params, grads)
    return params, history


def gradient_check(
    params: MlpParams,
    loss_and_grads: Callable[[MlpParams], tuple[float, Grads]],
    h: float = 1e-5,
) -> float:
    """Max relative error between analytic and central-difference gradients."""
    _, analytic = loss_and_grads(params)
    worst = 0.0
    for kind, tensors in ((0, params.weights), (1, params.biases)):
        for i, p in enumerate(tensors):
            flat = p.reshape(-1)
            a_flat = analytic[kind][i].reshape(-1)
            for j in range(flat.size):
                orig = flat[j]
                flat[j] = orig + h
                plus, _ = loss_and_grads(params)
                flat[j] = orig - h
                minus, _ = loss_and_grads(params)
                flat[j] = orig
                numeric = (plus - minus) / (2.0 * h)
                denom = max(abs(a_flat[j]) + abs(numeric), 1e-8)
                worst = max(worst, abs(a_flat[j] - numeric) / denom)
    return worst


def params_to_dict(params: MlpParams) -> dict:
    return {
        "spec": {
            "input_width": params.spec.input_width,
            "hidden": list(params.spec.hidden),
            "output_width": params.spec.output_width,
            "head": params.spec.head,
            "seed": params.spec.seed,
        },
        "weights": [w.reshape(-1).tolist() for w in params.weights],
        "biases": [b.tolist() for b in params.biases],
    }


def params_from_dict(doc: dict) -> MlpParams:
    spec = MlpSpec(
        input_width=int(doc["spec"]["input_width"]),
        hidden=tuple(doc["spec"]["hidden"]),
        output_width=int(doc["spec"]["output_width"]),
        head=doc["spec"]["head"],
        seed=int(doc["spec"]["seed"]),
    )
    sizes = spec.layer_sizes
    weights = [
        np.array(flat, dtype=float).reshape(fan_in, fan_out)
        for flat, fan_in, fan_out in zip(doc["weights"], sizes[:-1], sizes[1:])
    ]
    biases = [np.array(b, dtype=float) for b in doc["biases"]]
    return MlpParams(spec=spec, weights=weights, biases=biases)


def save_model(params: MlpParams, path, metadata: Optional[dict] = None) -> None:
    """Versioned JSON model file: spec, flattened weights, training metadata."""
    doc = {"format": MODEL_FORMAT, **params_to_dict(params), "metadata": metadata or {}}
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8") as fh:
        json.dump(doc, fh, separators=(",", ":"))
        fh.write("\n")


def load_model(path) -> tuple[MlpParams, dict]:
    with Path(path).open("r", encoding="utf-8") as fh:
        doc = json.load(fh)
    if doc.get("format") != MODEL_FORMAT:
        raise ValueError(f"unexpected model format {doc.get('format')!r}")
    return params_from_dict(doc), doc.get("metadata", {})
