"""Exact channel losses and the brute-force optimality oracle.

For a bijective language the decoded meaning after corruption is
``f' = l^-1(l(f)')``. Two losses are evaluated exactly by summing over all
received messages:

* ``J2(l, f) = E[H(rho(f', f))]`` for an increasing penalty ``H``;
* ``J1(l, f) = F(e_1, ..., e_K)`` with per-feature error rates
  ``e_j = P(f'_j != f_j)``.

The oracle scores every bijection of a small instance and checks that the
minimisers of the f-averaged J2 are exactly the compositional languages,
with minimum ``E[H(Binomial(K, eps))]``.
"""

from __future__ import annotations

import itertools
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass
from typing import Callable

import numpy as np

from .channel import ChannelSpec, corruption_distribution, corruption_pmf_by_distance
from .lang import (
    MAX_ENUMERATION,
    DomainError,
    FeatureSpace,
    InstanceTooLarge,
    Language,
    hamming_matrix,
)

PENALTY_KINDS = ("linear-normalized", "linear", "power")
ARGMIN_RTOL = 1e-9


class PreconditionError(DomainError):
    """An assumption of the optimality result does not hold for the instance."""


@dataclass(frozen=True)
class PenaltyH:
    """Penalty on the number of wrongly decoded features."""

    kind: str = "linear-normalized"
    gamma: float = 1.0

    def __post_init__(self):
        if self.kind not in PENALTY_KINDS:
            raise DomainError(f"unknown penalty {self.kind!r}; expected one of {PENALTY_KINDS}")
        if self.kind == "power" and self.gamma < 1:
            raise DomainError("power penalty needs gamma >= 1")

    def values(self, K: int) -> np.ndarray:
        """H(0), ..., H(K)."""
        k = np.arange(K + 1, dtype=float)
        if self.kind == "linear-normalized":
            h = k / K
        elif self.kind == "linear":
            h = k
        else:
            h = k**self.gamma
        if h[0] < 0 or (np.diff(h) <= 0).any():
            raise DomainError("penalty must be nonnegative and strictly increasing")
        return h

    def __call__(self, x: int, K: int) -> float:
        return float(self.values(K)[x])

    def describe(self) -> str:
        return f"power(gamma={self.gamma})" if self.kind == "power" else self.kind


def _decoded_distribution(lang: Language, f, spec: ChannelSpec):
    if spec.kind != "symbol-replacement":
        raise DomainError("exact losses use the symbol-replacement channel")
    if spec.alphabet_size != lang.alphabet_size:
        raise DomainError("channel and language alphabets differ")
    inv = lang.inverse_codes()
    f = tuple(int(v) for v in f)
    dist = corruption_distribution(lang(f), spec)
    decoded = lang.space.vectors()[inv]  # row c: meaning decoded from message code c
    return f, dist.probs, decoded


def expected_J2(lang: Language, f, spec: ChannelSpec, h: PenaltyH = PenaltyH()) -> float:
    """E[H(rho(f', f))], summed exactly over every received message."""
    f, probs, decoded = _decoded_distribution(lang, f, spec)
    H = h.values(lang.space.K)
    rho = (decoded != np.asarray(f)).sum(axis=1)
    return math.fsum(H[rho] * probs)


def feature_error_rates(lang: Language, f, spec: ChannelSpec) -> np.ndarray:
    """e_j = P(f'_j != f_j) for each feature j."""
    f, probs, decoded = _decoded_distribution(lang, f, spec)
    wrong = decoded != np.asarray(f)
    return np.array([math.fsum(probs[wrong[:, j]]) for j in range(lang.space.K)])


def expected_J1(
    lang: Language,
    f,
    spec: ChannelSpec,
    aggregate: Callable[[np.ndarray], float] | None = None,
) -> float:
    """F(e_1, ..., e_K); the default F is sum_j (e_j - eps)^2."""
    e = feature_error_rates(lang, f, spec)
    if aggregate is None:
        return float(np.sum((e - spec.epsilon) ** 2))
    return float(aggregate(e))


def closed_form_min_J2(K: int, eps: float, h: PenaltyH = PenaltyH()) -> float:
    """E[H(B)] with B ~ Binomial(K, eps)."""
    H = h.values(K)
    return math.fsum(
        H[k] * math.comb(K, k) * eps**k * (1.0 - eps) ** (K - k) for k in range(K + 1)
    )


@dataclass
class OracleReport:
    K: int
    m: int
    epsilon: float
    penalty: str
    min_loss: float
    closed_form_min: float
    argmin_count: int
    compositional_count: int
    argmin_all_compositional: bool
    compositional_all_argmin: bool
    per_meaning_constant: bool
    languages_scored: int
    argmin_rtol: float
    next_best_gap: float | None

    @property
    def passed(self) -> bool:
        return (
            self.argmin_all_compositional
            and self.compositional_all_argmin
            and self.per_meaning_constant
            and abs(self.min_loss - self.closed_form_min) <= 1e-10
        )

    def to_dict(self) -> dict:
        out = asdict(self)
        out["passed"] = self.passed
        return out


def check_optimality_assumptions(space: FeatureSpace, d: int, eps: float) -> None:
    if space.K < 2:
        raise PreconditionError(f"assumption K >= 2 violated (K = {space.K})")
    if d < 2:
        raise PreconditionError(f"assumption |A| >= 2 violated (|A| = {d})")
    if any(m != d for m in space.sizes):
        raise PreconditionError(f"assumption |A| = |F_i| violated (|A| = {d}, sizes {space.sizes})")
    if not 0.0 < eps < 1.0:
        raise PreconditionError(f"assumption eps in (0, 1) violated (eps = {eps})")
    if not eps < (d - 1) / d:
        raise PreconditionError(
            f"assumption eps < (|A|-1)/|A| = {(d - 1) / d:.6g} violated (eps = {eps})"
        )
    if space.size > MAX_ENUMERATION:
        raise InstanceTooLarge(f"|F| = {space.size} > {MAX_ENUMERATION}")


def _score_block(args):
    """Score every bijection whose first message code is ``lead``.

    Returns (f-averaged losses, compositional flags) in lexicographic order.
    """
    n, lead, q_matrix, h_matrix, feat_dist, msg_dist = args
    rest = [c for c in range(n) if c != lead]
    sig = np.array([(lead, *p) for p in itertools.permutations(rest)], dtype=np.int64)
    rows, cols = sig[:, :, None], sig[:, None, :]
    losses = (q_matrix[rows, cols] * h_matrix).sum(axis=(1, 2)) / n
    comp = (msg_dist[rows, cols] == feat_dist).all(axis=(1, 2))
    return losses, comp


def nth_permutation(n: int, rank: int) -> np.ndarray:
    """The permutation of ``range(n)`` at position ``rank`` in lexicographic order."""
    pool = list(range(n))
    out = []
    for i in range(n, 0, -1):
        j, rank = divmod(rank, math.factorial(i - 1))
        out.append(pool.pop(j))
    return np.array(out, dtype=np.int64)


def _per_meaning_losses(sigma: np.ndarray, q_matrix, h_matrix) -> np.ndarray:
    # J2(l, f) = sum_g P(l(g) | l(f)) H(rho(g, f))
    return (q_matrix[sigma[:, None], sigma[None, :]] * h_matrix).sum(axis=1)


def verify_optimality(
    space: FeatureSpace,
    d: int,
    eps: float,
    h: PenaltyH = PenaltyH(),
    workers: int = 1,
) -> OracleReport:
    """Score every bijective language and compare the argmin set with the compositional family."""
    check_optimality_assumptions(space, d, eps)
    spec = ChannelSpec(eps, d)
    n, K = space.size, space.K
    feats = space.vectors()
    feat_dist = hamming_matrix(feats)
    msg_dist = feat_dist  # messages are A^K with A = F_i, same code layout
    q_matrix = corruption_pmf_by_distance(K, spec)[msg_dist]
    h_matrix = h.values(K)[feat_dist]

    jobs = [(n, lead, q_matrix, h_matrix, feat_dist, msg_dist) for lead in range(n)]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(_score_block, jobs))
    else:
        parts = [_score_block(j) for j in jobs]
    losses = np.concatenate([p[0] for p in parts])
    comp = np.concatenate([p[1] for p in parts])

    best = float(losses.min())
    argmin = losses - best <= ARGMIN_RTOL * max(abs(best), np.finfo(float).tiny)
    rest = losses[~argmin]
    gap = float(rest.min() - best) if rest.size else None

    closed = closed_form_min_J2(K, eps, h)
    per_f_ok = True
    for idx in np.flatnonzero(argmin):
        per_f = _per_meaning_losses(nth_permutation(n, int(idx)), q_matrix, h_matrix)
        per_f_ok &= bool(np.all(np.abs(per_f - closed) <= 1e-10))

    return OracleReport(
        K=K,
        m=d,
        epsilon=eps,
        penalty=h.describe(),
        min_loss=best,
        closed_form_min=closed,
        argmin_count=int(argmin.sum()),
        compositional_count=int(comp.sum()),
        argmin_all_compositional=bool(np.all(comp[argmin])),
        compositional_all_argmin=bool(np.all(argmin[comp])),
        per_meaning_constant=per_f_ok,
        languages_scored=int(losses.size),
        argmin_rtol=ARGMIN_RTOL,
        next_best_gap=gap,
    )
