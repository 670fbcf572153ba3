"""Compositionality metrics over (meaning, message) logs.

Undefined values (zero rank variance, zero symbol entropy) are returned as
``None`` rather than as numbers.
"""

from __future__ import annotations

import csv
import io
import itertools
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.stats import rankdata

from .lang import DomainError, FeatureSpace, Language, hamming_matrix, parse_table_rows

RANK_METHODS = {"min": "min", "max": "max", "avg": "average", "average": "average"}


@dataclass(frozen=True, eq=False)
class MessageLog:
    """Rows of (feature vector, message), optionally weighted by multiplicity."""

    space: FeatureSpace
    features: np.ndarray
    messages: np.ndarray
    weights: np.ndarray | None = None

    def __post_init__(self):
        feats = np.atleast_2d(np.asarray(self.features, dtype=np.int64))
        msgs = np.atleast_2d(np.asarray(self.messages, dtype=np.int64))
        if feats.shape[0] != msgs.shape[0]:
            raise DomainError("features and messages have different row counts")
        if feats.shape[1] != self.space.K:
            raise DomainError(f"rows must have {self.space.K} features")
        if ((feats < 0) | (feats >= np.asarray(self.space.sizes))).any():
            raise DomainError("feature value outside its range")
        w = None
        if self.weights is not None:
            w = np.asarray(self.weights, dtype=np.int64)
            if w.shape != (feats.shape[0],) or (w < 0).any():
                raise DomainError("weights must be one nonnegative integer per row")
        for arr in (feats, msgs, w):
            if arr is not None:
                arr.setflags(write=False)
        object.__setattr__(self, "features", feats)
        object.__setattr__(self, "messages", msgs)
        object.__setattr__(self, "weights", w)

    @classmethod
    def from_language(cls, lang: Language) -> "MessageLog":
        """The dense balanced log: one row per meaning."""
        return cls(lang.space, lang.space.vectors(), lang.table)

    def __len__(self):
        return self.features.shape[0]

    @property
    def length(self) -> int:
        return self.messages.shape[1]

    @property
    def row_weights(self) -> np.ndarray:
        return np.ones(len(self), dtype=np.int64) if self.weights is None else self.weights

    def is_dense(self) -> bool:
        codes = self.space.encode_array(self.features)
        return len(self) == self.space.size and len(np.unique(codes)) == self.space.size


@dataclass
class MetricsReport:
    topo: float | None
    conf: int | None
    cont: float | None
    pos: float | None
    acc: float | None = None

    def to_dict(self, include_acc: bool = True) -> dict:
        out = asdict(self)
        if not include_acc:
            out.pop("acc")
        return out


def levenshtein(a: Sequence[int], b: Sequence[int]) -> int:
    """Edit distance with unit insert, delete and substitute costs."""
    a, b = list(a), list(b)
    prev = list(range(len(b) + 1))
    for i, x in enumerate(a, 1):
        cur = [i]
        for j, y in enumerate(b, 1):
            cur.append(min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (x != y)))
        prev = cur
    return prev[-1]


def _rank_pearson(rx: np.ndarray, ry: np.ndarray) -> float | None:
    # ranks are integers or half-integers; doubled they are exact integers, so the
    # sums below are exact and identical rankings give exactly 1.0
    x = [int(v) for v in np.rint(2 * rx)]
    y = [int(v) for v in np.rint(2 * ry)]
    n = len(x)
    sx, sy = sum(x), sum(y)
    sxx = n * sum(v * v for v in x) - sx * sx
    syy = n * sum(v * v for v in y) - sy * sy
    if sxx == 0 or syy == 0:
        return None
    sxy = n * sum(u * v for u, v in zip(x, y)) - sx * sy
    return sxy / math.sqrt(sxx * syy)


def spearman(x: Sequence[float], y: Sequence[float], ranks: str = "avg") -> float | None:
    """Pearson correlation of tie-aware ranks; None when either side is constant."""
    if len(x) != len(y):
        raise DomainError("spearman needs equal-length inputs")
    if len(x) < 2:
        raise DomainError("spearman needs at least two observations")
    method = RANK_METHODS[ranks]
    return _rank_pearson(rankdata(x, method=method), rankdata(y, method=method))


def _message_distances(messages: np.ndarray) -> np.ndarray:
    uniq, inv = np.unique(messages, axis=0, return_inverse=True)
    inv = inv.ravel()
    du = np.array([[levenshtein(a, b) for b in uniq] for a in uniq], dtype=np.int64)
    return du[inv][:, inv]


def topo(log: MessageLog, include_diagonal: bool = False, ranks: str = "avg") -> float | None:
    """Spearman correlation of Hamming meaning distances and Levenshtein message distances.

    By default over all unordered pairs of distinct meanings. With
    ``include_diagonal`` the correlation runs over all ordered pairs
    ``(f0, f1)`` including ``f0 == f1``, i.e. independent uniform draws.
    """
    if not log.is_dense():
        raise DomainError("topo needs a dense log (one message per meaning)")
    if len(log) < 2:
        raise DomainError("topo needs at least two meanings")
    df = hamming_matrix(log.features)
    dm = _message_distances(log.messages)
    if include_diagonal:
        return spearman(df.ravel(), dm.ravel(), ranks)
    iu = np.triu_indices(len(log), 1)
    return spearman(df[iu], dm[iu], ranks)


def conflict_count(log: MessageLog) -> int:
    """Minimum over position-to-feature assignments of off-principal-meaning counts."""
    K, L = log.space.K, log.length
    if L != K:
        raise DomainError(f"conflict count needs message length = K (got L={L}, K={K})")
    w = log.row_weights
    d = int(log.messages.max()) + 1 if len(log) else 1
    best = None
    for phi in itertools.permutations(range(K)):
        total = 0
        for j in range(L):
            c = phi[j]
            counts = np.zeros((d, log.space.sizes[c]), dtype=np.int64)
            np.add.at(counts, (log.messages[:, j], log.features[:, c]), w)
            total += int((counts.sum(axis=1) - counts.max(axis=1)).sum())
        best = total if best is None else min(best, total)
    return best


def context_independence(log: MessageLog) -> float:
    """Mean over feature values f of p(s_f | f) * p(f | s_f), s_f = argmax_s p(f | s).

    A message "contains" a symbol if it occurs at any position.
    """
    if len(log) == 0:
        raise DomainError("empty log")
    w = log.row_weights
    d = int(log.messages.max()) + 1
    contains = np.zeros((len(log), d), dtype=np.int64)
    for j in range(log.length):
        contains[np.arange(len(log)), log.messages[:, j]] = 1
    n_s = (w[:, None] * contains).sum(axis=0)
    scores = []
    for k, m in enumerate(log.space.sizes):
        for v in range(m):
            has_f = (log.features[:, k] == v).astype(np.int64) * w
            n_f = int(has_f.sum())
            if n_f == 0:
                continue
            n_fs = has_f @ contains
            with np.errstate(divide="ignore", invalid="ignore"):
                p_f_given_s = np.where(n_s > 0, n_fs / np.maximum(n_s, 1), -1.0)
            s_f = int(np.argmax(p_f_given_s))
            scores.append((n_fs[s_f] / n_f) * max(p_f_given_s[s_f], 0.0))
    return float(np.mean(scores))


def _entropy(counts: np.ndarray) -> float:
    n = int(counts.sum())
    terms = [(c / n) * math.log(n / c) for c in (int(v) for v in counts.ravel()) if c > 0]
    return math.fsum(terms)


def _mutual_information(joint: np.ndarray) -> float:
    # log ratios are formed from reduced integer fractions so that independence
    # gives exactly 0 and a one-to-one relation gives exactly the entropy
    n = int(joint.sum())
    row = joint.sum(axis=1)
    col = joint.sum(axis=0)
    terms = []
    for (i, j), c in np.ndenumerate(joint):
        c = int(c)
        if c == 0:
            continue
        num, den = c * n, int(row[i]) * int(col[j])
        g = math.gcd(num, den)
        num, den = num // g, den // g
        terms.append(0.0 if num == den else (c / n) * math.log(num / den))
    return math.fsum(terms)


def positional_disentanglement(log: MessageLog) -> float | None:
    """Average over positions of (I(s_j; best feature) - I(s_j; second best)) / H(s_j).

    Positions with zero symbol entropy are skipped; None if all are.
    """
    K = log.space.K
    if K < 2:
        raise DomainError("positional disentanglement needs at least two features")
    if len(log) == 0:
        raise DomainError("empty log")
    w = log.row_weights
    d = int(log.messages.max()) + 1
    gaps = []
    for j in range(log.length):
        sym = log.messages[:, j]
        h = _entropy(np.bincount(sym, weights=w, minlength=d).astype(np.int64))
        if h == 0.0:
            continue
        mis = []
        for c, m in enumerate(log.space.sizes):
            joint = np.zeros((d, m), dtype=np.int64)
            np.add.at(joint, (sym, log.features[:, c]), w)
            mis.append(_mutual_information(joint))
        mis.sort(reverse=True)
        gaps.append((mis[0] - mis[1]) / h)
    if not gaps:
        return None
    return float(np.mean(gaps))


def accuracy(predictions, truths) -> float:
    """Mean per-feature agreement between predicted and true feature vectors."""
    p = np.asarray(predictions)
    t = np.asarray(truths)
    if p.shape != t.shape:
        raise DomainError(f"shape mismatch: {p.shape} vs {t.shape}")
    if p.size == 0:
        raise DomainError("no predictions")
    return float(np.mean(p == t))


def compute_metrics(log: MessageLog, predictions=None, truths=None) -> MetricsReport:
    acc = None if predictions is None else accuracy(predictions, truths)
    return MetricsReport(
        topo=topo(log) if log.is_dense() else None,
        conf=conflict_count(log) if log.length == log.space.K else None,
        cont=context_independence(log),
        pos=positional_disentanglement(log) if log.space.K >= 2 else None,
        acc=acc,
    )


def _distance_probabilities(n: int) -> np.ndarray:
    counts = np.array([n**2, 2 * n**2 * (n - 1), n**2 * (n - 1) ** 2], dtype=float)
    return counts / n**4


def rank_values(n: int, ranks: str = "avg") -> np.ndarray:
    """Population ranks R(0), R(1), R(2) of the meaning distance, per convention."""
    p0, p1, _ = _distance_probabilities(n)
    if ranks == "min":
        return np.array([0.0, p0, p0 + p1])
    if ranks == "max":
        return np.array([p0, p0 + p1, 1.0])
    if ranks in ("avg", "average"):
        # midpoint of the min and max rank of each tie block
        return np.array([p0 / 2, p0 + p1 / 2, (p0 + p1 + 1) / 2])
    raise DomainError(f"unknown rank convention {ranks!r}")


def expected_topo_random(n: int, ranks: str = "avg") -> float:
    """Expected topo of a uniformly random bijection {0..n-1}^2 -> {0..n-1}^2.

    topo here is the rank correlation over independent uniform pairs
    (F0, F1), diagonal included.
    """
    if n < 2:
        raise DomainError("n must be at least 2")
    p0, p1, p2 = _distance_probabilities(n)
    R0, R1, R2 = rank_values(n, ranks)
    mean = p0 * R0 + p1 * R1 + p2 * R2
    var = p0 * R0**2 + p1 * R1**2 + p2 * R2**2 - mean**2
    cross = (
        p0 * R0**2
        + 2 * p1 / (n + 1) * R1**2
        + p2 * (n - 1) / (n + 1) * R2**2
        + 4 * p2 / (n + 1) * R1 * R2
    )
    return float((cross - mean**2) / var)


def _random_topo_batch(sigmas: np.ndarray, feat_dist: np.ndarray, ranks: str) -> np.ndarray:
    # every bijection has the same distance multiset, so rank mean and variance
    # are shared; only the cross moment varies with the language
    method = RANK_METHODS[ranks]
    r = rankdata(feat_dist.ravel(), method=method).reshape(feat_dist.shape)
    mu = r.mean()
    var = ((r - mu) ** 2).mean()
    rank_of = np.zeros(feat_dist.max() + 1)
    rank_of[feat_dist.ravel()] = r.ravel()
    # messages of length 2: Levenshtein equals Hamming
    rm = rank_of[feat_dist[sigmas[:, :, None], sigmas[:, None, :]]]
    cross = (rm * r).mean(axis=(1, 2))
    return (cross - mu**2) / var


def monte_carlo_topo_random(
    n: int,
    trials: int,
    rng: np.random.Generator | None = None,
    ranks: str = "avg",
    exhaustive: bool = False,
    chunk: int = 2000,
) -> tuple[float, float | None]:
    """Mean (and standard error) of diagonal-inclusive topo over random bijections.

    With ``exhaustive`` every bijection is scored once and the standard error
    is 0. A single trial has no standard error (None).
    """
    space = FeatureSpace.uniform(2, n)
    fd = hamming_matrix(space.vectors())
    N = space.size
    if exhaustive:
        if N > 9:
            raise DomainError("exhaustive mode limited to n = 2, 3")
        vals = np.concatenate(
            [
                _random_topo_batch(np.array(block), fd, ranks)
                for block in _batched(itertools.permutations(range(N)), chunk)
            ]
        )
        return float(vals.mean()), 0.0
    if trials < 1:
        raise DomainError("trials must be >= 1")
    if rng is None:
        raise DomainError("sampling mode needs an rng")
    vals = []
    done = 0
    while done < trials:
        b = min(chunk, trials - done)
        sig = rng.permuted(np.tile(np.arange(N), (b, 1)), axis=1)
        vals.append(_random_topo_batch(sig, fd, ranks))
        done += b
    vals = np.concatenate(vals)
    if trials == 1:
        return float(vals[0]), None
    return float(vals.mean()), float(vals.std(ddof=1) / math.sqrt(trials))


def _batched(it, size):
    while True:
        block = list(itertools.islice(it, size))
        if not block:
            return
        yield block


def parse_log(text: str) -> MessageLog:
    """Read a ``f -> s`` table or a CSV with header ``f1,...,fK,s1,...,sL``.

    CSV rows may carry an optional trailing ``weight`` column.
    """
    stripped = [ln for ln in text.splitlines() if ln.strip() and not ln.lstrip().startswith("#")]
    if stripped and "->" in stripped[0]:
        feats, msgs, header = parse_table_rows(text)
        weights = None
    else:
        reader = csv.reader(io.StringIO("\n".join(stripped)))
        try:
            head = [h.strip() for h in next(reader)]
        except StopIteration:
            raise DomainError("empty log") from None
        fcols = [i for i, h in enumerate(head) if h.startswith("f")]
        scols = [i for i, h in enumerate(head) if h.startswith("s")]
        wcol = head.index("weight") if "weight" in head else None
        if not fcols or not scols:
            raise DomainError("CSV header must name f1..fK and s1..sL columns")
        feats, msgs, weights = [], [], [] if wcol is not None else None
        for row in reader:
            feats.append(tuple(int(row[i]) for i in fcols))
            msgs.append(tuple(int(row[i]) for i in scols))
            if wcol is not None:
                weights.append(int(row[wcol]))
        header = {}
    if not feats:
        raise DomainError("empty log")
    if "sizes" in header:
        sizes = tuple(int(t) for t in header["sizes"].split(","))
    else:
        sizes = tuple(int(c) + 1 for c in np.max(feats, axis=0))
    return MessageLog(FeatureSpace(sizes), np.array(feats), np.array(msgs), weights)


def read_log(path: str | Path) -> MessageLog:
    return parse_log(Path(path).read_text())
