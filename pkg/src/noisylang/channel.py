"""Noisy channels over fixed-length messages and Gumbel-Softmax utilities.

Three mechanisms share one parameterisation (epsilon, alphabet size):

* ``symbol-replacement``: each symbol is independently replaced, with
  probability epsilon, by a uniformly chosen *different* symbol. Exact
  distributions are available for the optimality oracles.
* ``logit-matrix``: a probability vector ``p`` is mapped to logits
  ``log(W p)`` with a fixed row-stochastic ``W``.
* ``permutation``: with probability epsilon a symbol's one-hot vector is
  multiplied by a uniformly random permutation matrix.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .lang import DomainError, InstanceTooLarge, decode_codes, hamming

KINDS = ("symbol-replacement", "logit-matrix", "permutation")
MAX_TABLE = 10**6
_U_CLAMP = 1e-12


class NumericError(ArithmeticError):
    pass


@dataclass(frozen=True)
class ChannelSpec:
    epsilon: float
    alphabet_size: int
    kind: str = "symbol-replacement"

    def __post_init__(self):
        if not 0.0 <= self.epsilon < 1.0:
            raise DomainError(f"epsilon must lie in [0, 1), got {self.epsilon}")
        if self.alphabet_size < 2:
            raise DomainError(f"alphabet size must be >= 2, got {self.alphabet_size}")
        if self.kind not in KINDS:
            raise DomainError(f"unknown channel kind {self.kind!r}; expected one of {KINDS}")

    @property
    def below_uniform(self) -> bool:
        """epsilon < (d-1)/d: keeping a symbol is likelier than any single swap."""
        d = self.alphabet_size
        return self.epsilon < (d - 1) / d


def corruption_prob(s: Sequence[int], shat: Sequence[int], spec: ChannelSpec) -> float:
    """P(received = shat | sent = s) under symbol replacement."""
    if spec.kind != "symbol-replacement":
        raise DomainError("corruption_prob is defined for the symbol-replacement channel")
    rho = hamming(s, shat)
    eps, d = spec.epsilon, spec.alphabet_size
    return (1.0 - eps) ** (len(s) - rho) * (eps / (d - 1)) ** rho


def corruption_pmf_by_distance(length: int, spec: ChannelSpec) -> np.ndarray:
    """Probability of one particular received message at Hamming distance k, k=0..L."""
    eps, d = spec.epsilon, spec.alphabet_size
    k = np.arange(length + 1)
    return (1.0 - eps) ** (length - k) * (eps / (d - 1)) ** k


@dataclass(frozen=True, eq=False)
class CorruptionDistribution:
    source: tuple[int, ...]
    alphabet_size: int
    probs: np.ndarray

    def messages(self) -> np.ndarray:
        return decode_codes(np.arange(self.probs.size), (self.alphabet_size,) * len(self.source))


def corruption_distribution(s: Sequence[int], spec: ChannelSpec) -> CorruptionDistribution:
    """The full distribution over all d^L received messages, indexed by message code."""
    s = tuple(int(v) for v in s)
    d, L = spec.alphabet_size, len(s)
    if d**L > MAX_TABLE:
        raise InstanceTooLarge(f"d^L = {d ** L} exceeds {MAX_TABLE}")
    if spec.kind != "symbol-replacement":
        raise DomainError("exact distributions exist only for symbol replacement")
    msgs = decode_codes(np.arange(d**L), (d,) * L)
    rho = (msgs != np.asarray(s)).sum(axis=1)
    probs = corruption_pmf_by_distance(L, spec)[rho]
    probs.setflags(write=False)
    return CorruptionDistribution(s, d, probs)


def sample_corrupt(s, spec: ChannelSpec, rng: np.random.Generator) -> np.ndarray:
    """Corrupt one message (shape (L,)) or a batch (shape (..., L))."""
    s = np.asarray(s, dtype=np.int64)
    d = spec.alphabet_size
    flip = rng.random(s.shape) < spec.epsilon
    shift = rng.integers(1, d, size=s.shape)
    return np.where(flip, (s + shift) % d, s)


def noise_matrix(spec: ChannelSpec) -> np.ndarray:
    """1-eps on the diagonal, eps/(d-1) elsewhere."""
    d, eps = spec.alphabet_size, spec.epsilon
    W = np.full((d, d), eps / (d - 1))
    np.fill_diagonal(W, 1.0 - eps)
    return W


def check_noise_matrix(W: np.ndarray, tol: float = 1e-12) -> None:
    W = np.asarray(W, dtype=float)
    if W.ndim != 2 or W.shape[0] != W.shape[1]:
        raise DomainError("noise matrix must be square")
    if (W < 0).any():
        raise DomainError("noise matrix has negative entries")
    rows = W.sum(axis=1)
    if np.max(np.abs(rows - 1.0)) > tol:
        raise DomainError(f"noise matrix rows sum to {rows}, not 1")
    cols = W.sum(axis=0)
    if np.max(np.abs(cols - 1.0)) > tol:
        raise DomainError("noise matrix does not map probability vectors to probability vectors")


def apply_logit_noise(p: np.ndarray, W: np.ndarray) -> np.ndarray:
    """Elementwise ``log(W p)`` along the last axis of ``p``."""
    q = np.asarray(p) @ np.asarray(W).T
    if (q <= 0).any():
        raise NumericError("W p has a nonpositive entry; log undefined")
    return np.log(q)


def permutation_noise_matrices(shape: tuple[int, ...], spec: ChannelSpec, rng: np.random.Generator) -> np.ndarray:
    """Draw one noise matrix ``N = e P + (1-e) I`` per symbol slot in ``shape``.

    ``e`` is Bernoulli(eps) and ``P`` a uniformly random permutation matrix,
    fresh per slot. Returns an array of shape ``shape + (d, d)``.
    """
    d = spec.alphabet_size
    n = int(np.prod(shape, dtype=np.int64))
    active = rng.random(n) < spec.epsilon
    perms = rng.permuted(np.tile(np.arange(d), (n, 1)), axis=1)
    perms[~active] = np.arange(d)
    N = np.zeros((n, d, d))
    # column k of N is e_{perm[k]}: symbol k is sent to perm[k]
    N[np.arange(n)[:, None], perms, np.arange(d)[None, :]] = 1.0
    return N.reshape(*shape, d, d)


def permutation_noise_sample(m: np.ndarray, spec: ChannelSpec, rng: np.random.Generator):
    """Apply independent permutation noise to each symbol vector in ``m`` (..., d).

    Returns ``(corrupted, N)``; the map is linear in ``m`` so gradients flow
    back through ``N.T``.
    """
    if spec.kind != "permutation":
        raise DomainError("permutation_noise_sample needs a permutation channel")
    m = np.asarray(m, dtype=float)
    N = permutation_noise_matrices(m.shape[:-1], spec, rng)
    return np.einsum("...ij,...j->...i", N, m), N


def softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    z = x - np.max(x, axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def log_softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    z = x - np.max(x, axis=axis, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=axis, keepdims=True))


def gumbel_noise(rng: np.random.Generator, shape) -> np.ndarray:
    u = np.clip(rng.random(shape), _U_CLAMP, 1.0 - _U_CLAMP)
    return -np.log(-np.log(u))


def gumbel_softmax(x: np.ndarray, tau: float, g: np.ndarray) -> np.ndarray:
    """softmax((x + g) / tau) along the last axis."""
    if tau <= 0:
        raise DomainError("temperature must be positive")
    return softmax((np.asarray(x) + g) / tau)


def gumbel_sample(x: np.ndarray, g: np.ndarray):
    """argmax(x + g) along the last axis; ties go to the lowest index."""
    return np.argmax(np.asarray(x) + g, axis=-1)
