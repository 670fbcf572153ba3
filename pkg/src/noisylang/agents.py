"""Sender/receiver networks on symbolic inputs, with hand-written backprop.

Pipeline for a batch of meanings::

    one-hot features -> sender MLP -> per-position softmax p
      -> channel logits  (log(W p), or log p for permutation noise)
      -> Gumbel-Softmax relaxed sample y
      -> receiver input: y itself, or the straight-through one-hot of argmax(y)
      -> receiver MLP -> per-feature softmax over d_r values

Parameters are dicts of float64 arrays, row-vector convention
(``h @ W + b``); biases are stored as ``(1, out)`` rows. Every array may
carry extra leading axes: a stack of R independent agent pairs trains as
one computation with weights ``(R, in, out)`` and inputs ``(R, B, ...)``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .channel import ChannelSpec, gumbel_noise, log_softmax, noise_matrix, permutation_noise_matrices, softmax
from .lang import DomainError, FeatureSpace, Language

SENDER_KEYS = ("W1", "b1", "W2", "b2", "Wo", "bo")
RECEIVER_KEYS = ("Ws", "bs", "Wc", "bc", "W2", "b2", "W3", "b3", "Wo", "bo")


@dataclass(frozen=True)
class Arch:
    """Network dimensions derived from the task."""

    sizes: tuple[int, ...]
    d_s: int = 5
    d_r: int = 8
    length: int | None = None
    hidden: int = 64

    @property
    def K(self) -> int:
        return len(self.sizes)

    @property
    def L(self) -> int:
        return self.K if self.length is None else self.length

    @property
    def space(self) -> FeatureSpace:
        return FeatureSpace(self.sizes)

    def input_table(self) -> np.ndarray:
        """Concatenated one-hot encoding of every meaning, shape (|F|, sum m_i)."""
        return one_hot_features(self.space.vectors(), self.sizes)


def _glorot(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


def init_params(arch: Arch, rng: np.random.Generator) -> tuple[dict, dict]:
    """Glorot-uniform weights, zero biases."""
    H, n_in = arch.hidden, sum(arch.sizes)
    ls, kr = arch.L * arch.d_s, arch.K * arch.d_r
    sender = {
        "W1": _glorot(rng, n_in, H),
        "b1": np.zeros((1, H)),
        "W2": _glorot(rng, H, H),
        "b2": np.zeros((1, H)),
        "Wo": _glorot(rng, H, ls),
        "bo": np.zeros((1, ls)),
    }
    receiver = {
        "Ws": _glorot(rng, ls, H),
        "bs": np.zeros((1, H)),
        "Wc": _glorot(rng, ls, H),
        "bc": np.zeros((1, H)),
        "W2": _glorot(rng, H, H),
        "b2": np.zeros((1, H)),
        "W3": _glorot(rng, H, H),
        "b3": np.zeros((1, H)),
        "Wo": _glorot(rng, H, kr),
        "bo": np.zeros((1, kr)),
    }
    return sender, receiver


def stack_params(param_list: list[dict]) -> dict:
    return {k: np.stack([p[k] for p in param_list]) for k in param_list[0]}


def unstack_params(params: dict, r: int) -> dict:
    return {k: v[r].copy() for k, v in params.items()}


def check_params(params: dict) -> None:
    for k, v in params.items():
        if not np.all(np.isfinite(v)):
            raise FloatingPointError(f"non-finite entries in parameter {k}")


def one_hot_features(features: np.ndarray, sizes, dtype=float) -> np.ndarray:
    features = np.asarray(features)
    parts = [(features[..., k, None] == np.arange(m)) for k, m in enumerate(sizes)]
    return np.concatenate(parts, axis=-1).astype(dtype)


def _one_hot(idx: np.ndarray, n: int, dtype=float) -> np.ndarray:
    return (idx[..., None] == np.arange(n)).astype(dtype)


def _elu(z):
    neg = np.minimum(z, 0.0)
    np.exp(neg, out=neg)
    neg -= 1.0
    return np.maximum(z, neg)


def _elu_grad(z, a):
    # 1 for z > 0, exp(z) = elu(z) + 1 otherwise
    return np.minimum(a, 0.0) + 1.0


def _T(a):
    return a.swapaxes(-1, -2)


def _sum_rows(a):
    return a.sum(axis=-2, keepdims=True)


def _sq_norm(params: dict) -> np.ndarray:
    return sum((v * v).sum(axis=(-2, -1)) for v in params.values())


def sender_logits(sp: dict, x: np.ndarray, arch: Arch):
    """Logits (..., B, L, d_s) from one-hot inputs x (..., B, sum m_i)."""
    z1 = x @ sp["W1"] + sp["b1"]
    h1 = _elu(z1)
    z2 = h1 @ sp["W2"] + sp["b2"]
    h2 = _elu(z2)
    logits = h2 @ sp["Wo"] + sp["bo"]
    return logits.reshape(*logits.shape[:-1], arch.L, arch.d_s), (x, z1, h1, z2, h2)


def sender_forward(sp: dict, features, arch: Arch) -> np.ndarray:
    """Per-position symbol distributions, shape (..., B, L, d_s)."""
    check_params(sp)
    x = one_hot_features(np.atleast_2d(features), arch.sizes)
    return softmax(sender_logits(sp, x, arch)[0])


def receiver_logits(rp: dict, msg: np.ndarray, arch: Arch):
    s = msg.reshape(*msg.shape[:-2], -1)
    u = s @ rp["Ws"] + rp["bs"] + (1.0 - s) @ rp["Wc"] + rp["bc"]
    a1 = _elu(u)
    z2 = a1 @ rp["W2"] + rp["b2"]
    a2 = _elu(z2)
    z3 = a2 @ rp["W3"] + rp["b3"]
    a3 = _elu(z3)
    out = a3 @ rp["Wo"] + rp["bo"]
    return out.reshape(*out.shape[:-1], arch.K, arch.d_r), (s, u, a1, z2, a2, z3, a3)


def receiver_forward(rp: dict, msg, arch: Arch) -> np.ndarray:
    """Per-feature distributions over d_r values, shape (..., B, K, d_r).

    ``msg`` holds one one-hot or relaxed vector per position: (..., B, L, d_s).
    """
    check_params(rp)
    msg = np.asarray(msg, dtype=float)
    if msg.ndim == 2:
        msg = msg[None]
    return softmax(receiver_logits(rp, msg, arch)[0])


@dataclass
class Draws:
    """Randomness held fixed for one pathwise loss evaluation."""

    gumbel: np.ndarray  # (..., B, L, d_s)
    perm: np.ndarray | None = None  # (..., B, L, d_s, d_s) permutation-noise matrices
    straight_through: bool = True


def sample_draws(
    batch: int, arch: Arch, spec: ChannelSpec, straight_through: bool, rng: np.random.Generator
) -> Draws:
    g = gumbel_noise(rng, (batch, arch.L, arch.d_s))
    perm = None
    if spec.kind == "permutation":
        perm = permutation_noise_matrices((batch, arch.L), spec, rng)
    return Draws(g, perm, straight_through)


@dataclass
class LossTerms:
    """Total loss and its three terms; arrays of shape (R,) for stacked agents."""

    total: float | np.ndarray
    xent: float | np.ndarray
    kl: float | np.ndarray
    l2: float | np.ndarray


def _channel_logits(p, logits, spec: ChannelSpec, W):
    if spec.kind == "logit-matrix" and spec.epsilon > 0:
        q = p @ W.T
        return np.log(q), q
    if spec.kind in ("logit-matrix", "permutation"):
        # W = I: log(W p) = log p, computed stably
        return log_softmax(logits), None
    raise DomainError(f"channel kind {spec.kind!r} is not differentiable in the pipeline")


def forward(
    sp: dict,
    rp: dict,
    x: np.ndarray,
    labels: np.ndarray,
    arch: Arch,
    spec: ChannelSpec,
    draws: Draws,
    tau: float = 1.0,
    lambda_kl: float = 0.01,
    lambda_l2: float = 0.0003,
):
    """Pathwise loss for fixed draws; returns (LossTerms, cache for ``backward``).

    ``x`` is the one-hot sender input (..., B, sum m_i); ``labels`` the
    target feature values (..., B, K).
    """
    B = x.shape[-2]
    dt = x.dtype
    logits, s_cache = sender_logits(sp, x, arch)
    p = softmax(logits)
    W = noise_matrix(spec).astype(dt) if spec.kind == "logit-matrix" else None
    z, q = _channel_logits(p, logits, spec, W)
    y = softmax((z + draws.gumbel) / tau)
    m = _one_hot(np.argmax(y, axis=-1), arch.d_s, dt) if draws.straight_through else y
    if draws.perm is not None:
        m = (draws.perm @ m[..., None])[..., 0]
    out, r_cache = receiver_logits(rp, m, arch)
    logq = log_softmax(out)
    target = _one_hot(labels, arch.d_r, dt)
    xent = -(logq * target).sum(axis=(-3, -2, -1)) / B
    kl = (-np.log(arch.d_s) - np.log(np.maximum(p, np.finfo(dt).tiny)).mean(axis=-1)).sum(axis=(-2, -1)) / B
    sq_s, sq_r = _sq_norm(sp), _sq_norm(rp)
    l2 = np.sqrt(sq_s) + np.sqrt(sq_r)
    total = xent + lambda_kl * kl + lambda_l2 * l2
    terms = LossTerms(total, xent, kl, l2)
    if np.ndim(total) == 0:
        terms = LossTerms(float(total), float(xent), float(kl), float(l2))
    cache = dict(
        B=B, s_cache=s_cache, p=p, W=W, q=q, y=y, r_cache=r_cache, logq=logq, target=target,
        tau=tau, lambda_kl=lambda_kl, lambda_l2=lambda_l2, draws=draws, arch=arch,
        sp=sp, rp=rp, norms=(np.sqrt(sq_s), np.sqrt(sq_r)),
    )
    return terms, cache


def backward(cache: dict) -> tuple[dict, dict]:
    """Reverse-mode gradients of the pathwise loss (summed over stacked agents).

    On straight-through steps the one-hot receiver input hands its gradient
    unchanged to the relaxed sample.
    """
    B, arch, sp, rp = cache["B"], cache["arch"], cache["sp"], cache["rp"]
    lam_kl, lam_l2 = cache["lambda_kl"], cache["lambda_l2"]
    gs, gr = {}, {}

    s, u, a1, z2, a2, z3, a3 = cache["r_cache"]
    dout = (np.exp(cache["logq"]) - cache["target"]) / B
    dout = dout.reshape(*dout.shape[:-2], -1)
    gr["Wo"] = _T(a3) @ dout
    gr["bo"] = _sum_rows(dout)
    dz3 = (dout @ _T(rp["Wo"])) * _elu_grad(z3, a3)
    gr["W3"] = _T(a2) @ dz3
    gr["b3"] = _sum_rows(dz3)
    dz2 = (dz3 @ _T(rp["W3"])) * _elu_grad(z2, a2)
    gr["W2"] = _T(a1) @ dz2
    gr["b2"] = _sum_rows(dz2)
    du = (dz2 @ _T(rp["W2"])) * _elu_grad(u, a1)
    gr["Ws"] = _T(s) @ du
    gr["bs"] = _sum_rows(du)
    gr["Wc"] = _T(1.0 - s) @ du
    gr["bc"] = gr["bs"].copy()
    dm = du @ _T(rp["Ws"] - rp["Wc"])
    dm = dm.reshape(*dm.shape[:-1], arch.L, arch.d_s)

    draws = cache["draws"]
    if draws.perm is not None:
        dm = (_T(draws.perm) @ dm[..., None])[..., 0]
    y, tau, p = cache["y"], cache["tau"], cache["p"]
    dz = y * (dm - (dm * y).sum(axis=-1, keepdims=True)) / tau
    if cache["q"] is not None:
        dp = (dz / cache["q"]) @ cache["W"]
        dlogits = p * (dp - (dp * p).sum(axis=-1, keepdims=True))
    else:
        dlogits = dz - p * dz.sum(axis=-1, keepdims=True)
    dlogits = dlogits + lam_kl * (p - 1.0 / arch.d_s) / B

    x, z1, h1, zs2, h2 = cache["s_cache"]
    dl = dlogits.reshape(*dlogits.shape[:-2], -1)
    gs["Wo"] = _T(h2) @ dl
    gs["bo"] = _sum_rows(dl)
    dzs2 = (dl @ _T(sp["Wo"])) * _elu_grad(zs2, h2)
    gs["W2"] = _T(h1) @ dzs2
    gs["b2"] = _sum_rows(dzs2)
    dz1 = (dzs2 @ _T(sp["W2"])) * _elu_grad(z1, h1)
    gs["W1"] = _T(x) @ dz1
    gs["b1"] = _sum_rows(dz1)

    for params, grads, norm in ((sp, gs, cache["norms"][0]), (rp, gr, cache["norms"][1])):
        scale = lam_l2 / np.where(norm > 0, norm, np.inf)
        scale = np.reshape(scale, np.shape(scale) + (1, 1))
        for k in grads:
            grads[k] = grads[k] + scale * params[k]
    return gs, gr


def total_loss(sp, rp, features, labels, arch, spec, draws, **hyper) -> LossTerms:
    x = one_hot_features(features, arch.sizes)
    return forward(sp, rp, x, np.asarray(labels), arch, spec, draws, **hyper)[0]


def gradients(sp, rp, features, labels, arch, spec, draws, **hyper):
    """(LossTerms, sender grads, receiver grads) of the pathwise loss for fixed draws."""
    x = one_hot_features(features, arch.sizes)
    terms, cache = forward(sp, rp, x, np.asarray(labels), arch, spec, draws, **hyper)
    gs, gr = backward(cache)
    return terms, gs, gr


def greedy_messages(sp: dict, arch: Arch) -> np.ndarray:
    """Noiseless per-position argmax message for every meaning, (..., |F|, L)."""
    logits, _ = sender_logits(sp, arch.input_table(), arch)
    return np.argmax(logits, axis=-1)


def greedy_language(sp: dict, arch: Arch) -> Language:
    check_params(sp)
    return Language(arch.space, arch.d_s, greedy_messages(sp, arch))


def noisy_predictions(
    sp: dict,
    rp: dict,
    x: np.ndarray,
    arch: Arch,
    spec: ChannelSpec,
    rng: np.random.Generator,
    sampled: bool = True,
) -> np.ndarray:
    """Receiver argmax guesses (..., B, K) for one-hot sender inputs ``x``.

    With ``sampled`` each symbol is drawn (Gumbel-max) from the noisy channel
    output; otherwise the sender's argmax symbol is sent through the channel.
    """
    logits, _ = sender_logits(sp, x, arch)
    W = noise_matrix(spec) if spec.kind == "logit-matrix" else None
    if sampled:
        z, _ = _channel_logits(softmax(logits), logits, spec, W)
        sym = np.argmax(z + gumbel_noise(rng, z.shape), axis=-1)
    else:
        sym = np.argmax(logits, axis=-1)
        if W is not None and spec.epsilon > 0:
            # column sym of W is the corrupted-symbol distribution
            z = np.log(W.T[sym])
            sym = np.argmax(z + gumbel_noise(rng, z.shape), axis=-1)
    m = _one_hot(sym, arch.d_s)
    if spec.kind == "permutation":
        m = (permutation_noise_matrices(m.shape[:-1], spec, rng) @ m[..., None])[..., 0]
    out, _ = receiver_logits(rp, m, arch)
    return np.argmax(out, axis=-1)
