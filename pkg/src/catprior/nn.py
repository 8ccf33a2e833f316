"""Small numpy neural-network core: MLPs with exact reverse-mode gradients,
categorical / diagonal-Gaussian heads and Adam.

Everything is float64 and batched along the leading axis.  A forward pass
returns a :class:`Trace` that can be consumed exactly once by
:func:`backward`.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from catprior.errors import ConfigurationError, TrainingError, UsageError

LOG_EPS = math.log(1e-12)
HIDDEN_ACTIVATION = "tanh"


def _act(name: str, x: np.ndarray) -> np.ndarray:
    if name == "tanh":
        return np.tanh(x)
    if name == "linear":
        return x
    raise ConfigurationError(f"unknown activation {name!r}")


def _act_grad(name: str, y: np.ndarray) -> np.ndarray:
    # derivative expressed through the activation output
    if name == "tanh":
        return 1.0 - y * y
    return np.ones_like(y)


@dataclass
class ParamSet:
    """Weights ``W[i]`` of shape (in, out), biases ``b[i]`` of shape (out,)."""

    weights: list[np.ndarray]
    biases: list[np.ndarray]
    activations: list[str]

    def __post_init__(self):
        if not (len(self.weights) == len(self.biases) == len(self.activations)):
            raise ConfigurationError("weights, biases and activations must align")
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.ndim != 2 or b.shape != (w.shape[1],):
                raise ConfigurationError(f"layer {i}: bad shapes {w.shape} / {b.shape}")
            if i and self.weights[i - 1].shape[1] != w.shape[0]:
                raise ConfigurationError(
                    f"layer {i} expects width {w.shape[0]}, previous layer emits "
                    f"{self.weights[i - 1].shape[1]}"
                )
            _act(self.activations[i], np.zeros(1))

    @classmethod
    def init(
        cls,
        widths: list[int],
        rng: np.random.Generator,
        hidden: str = HIDDEN_ACTIVATION,
        out_scale: float = 1.0,
    ) -> "ParamSet":
        """Variance-scaled init; the last layer is linear and scaled by ``out_scale``."""
        if len(widths) < 2:
            raise ConfigurationError("need at least input and output width")
        ws, bs, acts = [], [], []
        for i, (n_in, n_out) in enumerate(zip(widths[:-1], widths[1:])):
            last = i == len(widths) - 2
            w = rng.standard_normal((n_in, n_out)) / math.sqrt(n_in)
            ws.append(w * out_scale if last else w)
            bs.append(np.zeros(n_out))
            acts.append("linear" if last else hidden)
        return cls(ws, bs, acts)

    @property
    def widths(self) -> list[int]:
        return [self.weights[0].shape[0]] + [w.shape[1] for w in self.weights]

    @property
    def n_in(self) -> int:
        return self.weights[0].shape[0]

    @property
    def n_out(self) -> int:
        return self.weights[-1].shape[1]

    def arrays(self) -> list[np.ndarray]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out

    def copy(self) -> "ParamSet":
        return ParamSet(
            [w.copy() for w in self.weights],
            [b.copy() for b in self.biases],
            list(self.activations),
        )

    def zeros_like(self) -> list[np.ndarray]:
        return [np.zeros_like(a) for a in self.arrays()]


@dataclass
class Trace:
    params: ParamSet
    inputs: list[np.ndarray]
    outputs: list[np.ndarray]
    squeeze: bool
    used: bool = False


def mlp_forward(params: ParamSet, x: np.ndarray) -> tuple[np.ndarray, Trace]:
    x = np.asarray(x, dtype=np.float64)
    squeeze = x.ndim == 1
    h = x[None, :] if squeeze else x
    if h.shape[-1] != params.n_in:
        raise ConfigurationError(f"input width {h.shape[-1]} != network input {params.n_in}")
    inputs, outputs = [], []
    for w, b, act in zip(params.weights, params.biases, params.activations):
        inputs.append(h)
        h = _act(act, h @ w + b)
        outputs.append(h)
    trace = Trace(params, inputs, outputs, squeeze)
    return (h[0] if squeeze else h), trace


def backward(trace: Trace, grad_out: np.ndarray) -> tuple[list[np.ndarray], np.ndarray]:
    """Returns (gradients aligned with ``params.arrays()``, input gradient)."""
    if trace.used:
        raise UsageError("trace already consumed by a previous backward pass")
    trace.used = True
    g = np.asarray(grad_out, dtype=np.float64)
    if trace.squeeze:
        g = g[None, :]
    p = trace.params
    grads: list[np.ndarray] = [None] * (2 * len(p.weights))  # type: ignore[list-item]
    for i in reversed(range(len(p.weights))):
        g = g * _act_grad(p.activations[i], trace.outputs[i])
        grads[2 * i] = trace.inputs[i].T @ g
        grads[2 * i + 1] = g.sum(axis=0)
        g = g @ p.weights[i].T
    return grads, (g[0] if trace.squeeze else g)


# --------------------------------------------------------------------------
# distribution heads


def log_softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def softmax(logits: np.ndarray) -> np.ndarray:
    return np.exp(log_softmax(logits))


def categorical_stats(logits: np.ndarray, other: np.ndarray | None = None) -> dict:
    """Log-probabilities, entropy and (optionally) KL(self || other).

    Probabilities are clamped at 1e-12 before any log.
    """
    logp = np.maximum(log_softmax(logits), LOG_EPS)
    p = np.exp(logp)
    out = {"log_probs": logp, "probs": p, "entropy": -(p * logp).sum(axis=-1)}
    if other is not None:
        if np.shape(other)[-1] != np.shape(logits)[-1]:
            raise UsageError(f"K mismatch: {np.shape(logits)[-1]} vs {np.shape(other)[-1]}")
        logq = np.maximum(log_softmax(other), LOG_EPS)
        out["kl"] = (p * (logp - logq)).sum(axis=-1)
    return out


def entropy_grad(logits: np.ndarray) -> np.ndarray:
    """d H / d logits."""
    logp = log_softmax(logits)
    p = np.exp(logp)
    h = -(p * logp).sum(axis=-1, keepdims=True)
    return -p * (logp + h)


def kl_grads(logits_p: np.ndarray, logits_q: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """d KL(p||q) / d logits_p and d KL(p||q) / d logits_q."""
    logp = log_softmax(logits_p)
    logq = log_softmax(logits_q)
    p, q = np.exp(logp), np.exp(logq)
    kl = (p * (logp - logq)).sum(axis=-1, keepdims=True)
    return p * (logp - logq - kl), q - p


def sample_categorical(logits: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    p = softmax(np.atleast_2d(logits))
    c = np.cumsum(p, axis=-1)
    u = rng.random((p.shape[0], 1))
    idx = (u > c).sum(axis=-1)
    return np.minimum(idx, p.shape[-1] - 1)


@dataclass
class GaussianHead:
    """Diagonal Gaussian: network mean plus a trainable per-dimension log std."""

    log_std: np.ndarray

    def __post_init__(self):
        self.log_std = np.asarray(self.log_std, dtype=np.float64)

    @property
    def std(self) -> np.ndarray:
        return np.exp(self.log_std)


LOG_2PI = math.log(2.0 * math.pi)


def gaussian_stats(mean: np.ndarray, log_std: np.ndarray, sample: np.ndarray) -> dict:
    mean = np.asarray(mean, dtype=np.float64)
    sample = np.asarray(sample, dtype=np.float64)
    log_std = np.asarray(log_std, dtype=np.float64)
    if mean.shape[-1] != sample.shape[-1] or log_std.shape[-1] != mean.shape[-1]:
        raise UsageError("dimension mismatch between mean, log_std and sample")
    std = np.exp(log_std)
    if not np.all(std > 0):
        raise UsageError("non-positive standard deviation")
    z = (sample - mean) / std
    d = mean.shape[-1]
    log_prob = -0.5 * (z * z).sum(axis=-1) - log_std.sum() - 0.5 * d * LOG_2PI
    entropy = log_std.sum() + 0.5 * d * (1.0 + LOG_2PI)
    return {"log_prob": log_prob, "entropy": entropy}


def gaussian_logp_grads(
    mean: np.ndarray, log_std: np.ndarray, sample: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Per-sample d log_prob / d mean (N, d) and d log_prob / d log_std (N, d)."""
    var = np.exp(2.0 * log_std)
    diff = sample - mean
    return diff / var, diff * diff / var - 1.0


# --------------------------------------------------------------------------
# optimiser


@dataclass
class AdamState:
    lr: float
    m: list[np.ndarray]
    v: list[np.ndarray]
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    max_grad_norm: float | None = None
    extra: dict = field(default_factory=dict)

    @classmethod
    def for_arrays(cls, arrays: list[np.ndarray], lr: float, **kw) -> "AdamState":
        return cls(lr, [np.zeros_like(a) for a in arrays], [np.zeros_like(a) for a in arrays], **kw)


def adam_step(params: list[np.ndarray], grads: list[np.ndarray], state: AdamState) -> AdamState:
    """In-place bias-corrected Adam update of ``params``."""
    if len(params) != len(grads) or len(params) != len(state.m):
        raise UsageError("params, grads and optimiser state are misaligned")
    for i, (p, g) in enumerate(zip(params, grads)):
        if p.shape != g.shape or p.shape != state.m[i].shape:
            raise UsageError(f"shape mismatch at slot {i}: {p.shape} vs {g.shape}")
        if not np.all(np.isfinite(g)):
            raise TrainingError(f"non-finite gradient in slot {i} (shape {g.shape})")
    if state.max_grad_norm is not None:
        norm = math.sqrt(sum(float((g * g).sum()) for g in grads))
        if norm > state.max_grad_norm:
            grads = [g * (state.max_grad_norm / norm) for g in grads]
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return state
