"""Discrete bottleneck: codebook, nearest-code lookup, straight-through
gradient, commitment losses, the soft (finite-variance) posterior and the
Gaussian bottleneck used as a baseline.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from catprior.errors import ConfigurationError, UsageError
from catprior.nn import log_softmax


@dataclass
class Codebook:
    codes: np.ndarray  # (K, D)
    usage: np.ndarray = field(default=None)  # type: ignore[assignment]

    def __post_init__(self):
        self.codes = np.asarray(self.codes, dtype=np.float64)
        if self.codes.ndim != 2 or self.codes.shape[0] < 1:
            raise ConfigurationError("codebook must be a non-empty (K, D) array")
        if self.usage is None:
            self.usage = np.zeros(self.codes.shape[0], dtype=np.int64)

    @classmethod
    def init(cls, k: int, d: int, rng: np.random.Generator) -> "Codebook":
        return cls(rng.standard_normal((k, d)))

    @property
    def K(self) -> int:
        return self.codes.shape[0]

    @property
    def D(self) -> int:
        return self.codes.shape[1]

    def usage_csv(self) -> str:
        lines = ["code,count"] + [f"{i},{int(c)}" for i, c in enumerate(self.usage)]
        return "\n".join(lines) + "\n"


@dataclass
class QuantizeResult:
    index: np.ndarray  # int, shape () or (N,)
    z_q: np.ndarray
    z_e: np.ndarray
    distance: np.ndarray


def _check(book: Codebook, z_e: np.ndarray) -> np.ndarray:
    if book.codes.shape[0] == 0:
        raise ConfigurationError("empty codebook")
    z = np.asarray(z_e, dtype=np.float64)
    if z.shape[-1] != book.D:
        raise UsageError(f"encoder output width {z.shape[-1]} != code dimension {book.D}")
    return z


def squared_distances(book: Codebook, z_e: np.ndarray) -> np.ndarray:
    z = _check(book, z_e)
    diff = z[..., None, :] - book.codes
    return (diff * diff).sum(axis=-1)


def quantize(book: Codebook, z_e: np.ndarray) -> QuantizeResult:
    """Nearest code by Euclidean distance; ``argmin`` keeps the lowest index on ties."""
    d2 = squared_distances(book, z_e)
    idx = np.argmin(d2, axis=-1)
    z_q = book.codes[idx]
    dist = np.sqrt(np.take_along_axis(d2, np.expand_dims(idx, -1), -1)[..., 0])
    return QuantizeResult(idx, z_q, np.asarray(z_e, dtype=np.float64), dist)


def posterior_onehot(book: Codebook, z_e: np.ndarray) -> np.ndarray:
    idx = quantize(book, z_e).index
    return np.eye(book.K)[idx]


def soft_posterior(book: Codebook, z_e: np.ndarray, epsilon: float, deltas=None) -> np.ndarray:
    """Mixture responsibilities with shared isotropic variance ``epsilon``."""
    if epsilon <= 0:
        raise UsageError("epsilon must be positive")
    d2 = squared_distances(book, z_e)
    if deltas is None:
        deltas = np.full(book.K, 1.0 / book.K)
    deltas = np.asarray(deltas, dtype=np.float64)
    if deltas.shape != (book.K,) or abs(deltas.sum() - 1.0) > 1e-9 or np.any(deltas < 0):
        raise UsageError("deltas must be a probability vector of length K")
    with np.errstate(divide="ignore"):
        logits = np.log(deltas) - d2 / (2.0 * epsilon)
    return np.exp(log_softmax(logits))


def commitment_terms(z_e: np.ndarray, code: np.ndarray, beta: float) -> dict:
    """Codebook and commitment losses with their stop-gradient-split gradients.

    ``codebook_loss = |sg[z_e] - e|^2`` only moves the code,
    ``commitment_loss = beta |z_e - sg[e]|^2`` only moves the encoder output.
    Batched inputs return per-row losses.
    """
    z_e = np.asarray(z_e, dtype=np.float64)
    code = np.asarray(code, dtype=np.float64)
    if z_e.shape != code.shape:
        raise UsageError(f"shape mismatch {z_e.shape} vs {code.shape}")
    diff = z_e - code
    sq = (diff * diff).sum(axis=-1)
    return {
        "codebook_loss": sq,
        "commitment_loss": beta * sq,
        # gradients: d codebook_loss / d code, d commitment_loss / d z_e
        "grad_code": -2.0 * diff,
        "grad_z_e": 2.0 * beta * diff,
        "grad_code_from_commitment": np.zeros_like(diff),
        "grad_z_e_from_codebook": np.zeros_like(diff),
    }


class StraightThrough:
    """Forward returns the code; backward copies the downstream gradient to z_e."""

    def __init__(self, z_e: np.ndarray, code: np.ndarray):
        z_e = np.asarray(z_e, dtype=np.float64)
        code = np.asarray(code, dtype=np.float64)
        if z_e.shape != code.shape:
            raise UsageError(f"shape mismatch {z_e.shape} vs {code.shape}")
        self.z_q = code.copy()

    def backward(self, grad_z_q: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Returns (grad wrt z_e, grad wrt code); the latter is identically zero."""
        g = np.asarray(grad_z_q, dtype=np.float64)
        return g.copy(), np.zeros_like(g)


def straight_through(z_e: np.ndarray, code: np.ndarray) -> StraightThrough:
    return StraightThrough(z_e, code)


def onehot_kl_to_uniform(posterior: np.ndarray) -> np.ndarray:
    """KL(q || uniform) for (rows of) a categorical distribution."""
    k = posterior.shape[-1]
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(posterior > 0, posterior * np.log(posterior * k), 0.0)
    return terms.sum(axis=-1)


@dataclass
class GaussianBottleneck:
    mu: np.ndarray
    sigma: np.ndarray
    beta: float = 1.0
    anneal: tuple[float, float, int] | None = None  # (start, end, horizon)

    def __post_init__(self):
        self.mu = np.asarray(self.mu, dtype=np.float64)
        self.sigma = np.asarray(self.sigma, dtype=np.float64)
        if np.any(self.sigma <= 0):
            raise UsageError("sigma must be positive")
        if self.beta < 0:
            raise UsageError("beta must be non-negative")

    def beta_at(self, step: int) -> float:
        if self.anneal is None:
            return self.beta
        start, end, horizon = self.anneal
        frac = min(max(step / horizon, 0.0), 1.0)
        return start + (end - start) * frac


def gaussian_kl_to_standard(mu: np.ndarray, sigma: np.ndarray) -> np.ndarray:
    mu = np.asarray(mu, dtype=np.float64)
    sigma = np.asarray(sigma, dtype=np.float64)
    return 0.5 * (mu * mu + sigma * sigma - 1.0 - 2.0 * np.log(sigma)).sum(axis=-1)


def gaussian_bottleneck_loss(b: GaussianBottleneck, step: int = 0) -> float:
    return b.beta_at(step) * gaussian_kl_to_standard(b.mu, b.sigma)


def log_k(k: int) -> float:
    return math.log(k)
