"""Feature spaces, languages as explicit tables, and compositionality.

Feature vectors and messages are encoded as mixed-radix integers with the
first coordinate most significant, so every table is a dense array indexed
by the feature code.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Iterator, Sequence

import numpy as np

MAX_SPACE = 10**6
MAX_ENUMERATION = 9


class DomainError(ValueError):
    """Raised when inputs fall outside an operation's domain."""


class InstanceTooLarge(DomainError):
    pass


def _radix_weights(sizes: Sequence[int]) -> np.ndarray:
    w = np.ones(len(sizes), dtype=np.int64)
    for i in range(len(sizes) - 2, -1, -1):
        w[i] = w[i + 1] * sizes[i + 1]
    return w


@dataclass(frozen=True)
class FeatureSpace:
    """Cartesian product of K finite feature value sets ``0..m_i-1``."""

    sizes: tuple[int, ...]

    def __post_init__(self):
        sizes = tuple(int(s) for s in self.sizes)
        if not sizes:
            raise DomainError("a feature space needs at least one feature")
        if any(s < 1 for s in sizes):
            raise DomainError(f"feature sizes must be positive, got {sizes}")
        if math.prod(sizes) > MAX_SPACE:
            raise InstanceTooLarge(f"|F| = {math.prod(sizes)} exceeds {MAX_SPACE}")
        object.__setattr__(self, "sizes", sizes)

    @classmethod
    def uniform(cls, K: int, m: int) -> "FeatureSpace":
        return cls((m,) * K)

    @property
    def K(self) -> int:
        return len(self.sizes)

    @property
    def size(self) -> int:
        return math.prod(self.sizes)

    def encode(self, values: Sequence[int]) -> int:
        if len(values) != self.K:
            raise DomainError(f"expected {self.K} feature values, got {len(values)}")
        code = 0
        for v, m in zip(values, self.sizes):
            if not 0 <= v < m:
                raise DomainError(f"feature value {v} outside [0, {m})")
            code = code * m + int(v)
        return code

    def decode(self, code: int) -> tuple[int, ...]:
        if not 0 <= code < self.size:
            raise DomainError(f"code {code} outside [0, {self.size})")
        out = []
        for m in reversed(self.sizes):
            code, v = divmod(code, m)
            out.append(v)
        return tuple(reversed(out))

    def vectors(self) -> np.ndarray:
        """All feature vectors, shape (|F|, K), row i is ``decode(i)``."""
        return decode_codes(np.arange(self.size), self.sizes)

    def encode_array(self, vectors: np.ndarray) -> np.ndarray:
        return np.asarray(vectors, dtype=np.int64) @ _radix_weights(self.sizes)


def decode_codes(codes: np.ndarray, sizes: Sequence[int]) -> np.ndarray:
    codes = np.asarray(codes, dtype=np.int64)
    w = _radix_weights(sizes)
    return (codes[..., None] // w) % np.asarray(sizes, dtype=np.int64)


def hamming(u: Sequence[int], v: Sequence[int]) -> int:
    """Number of positions where ``u`` and ``v`` differ."""
    if len(u) != len(v):
        raise DomainError(f"length mismatch: {len(u)} vs {len(v)}")
    return sum(1 for a, b in zip(u, v) if a != b)


def hamming_matrix(rows: np.ndarray) -> np.ndarray:
    """Pairwise Hamming distances between the rows of an integer matrix."""
    rows = np.asarray(rows)
    return (rows[:, None, :] != rows[None, :, :]).sum(axis=-1)


@dataclass(frozen=True, eq=False)
class Language:
    """A total map from feature vectors to length-L messages over ``0..d-1``.

    ``table[i]`` is the message for the feature vector with code ``i``.
    """

    space: FeatureSpace
    alphabet_size: int
    table: np.ndarray = field(repr=False)

    def __post_init__(self):
        table = np.array(self.table, dtype=np.int64, copy=True)
        if table.ndim != 2 or table.shape[0] != self.space.size:
            raise DomainError(
                f"table must have shape (|F|={self.space.size}, L), got {table.shape}"
            )
        if self.alphabet_size < 1:
            raise DomainError("alphabet size must be positive")
        if table.size and (table.min() < 0 or table.max() >= self.alphabet_size):
            raise DomainError(f"symbols must lie in [0, {self.alphabet_size})")
        table.setflags(write=False)
        object.__setattr__(self, "table", table)

    @classmethod
    def from_codes(cls, space: FeatureSpace, d: int, length: int, codes) -> "Language":
        return cls(space, d, decode_codes(np.asarray(codes), (d,) * length))

    @property
    def length(self) -> int:
        return self.table.shape[1]

    @property
    def codes(self) -> np.ndarray:
        """Message codes (mixed radix, base d) for each feature code."""
        return self.table @ _radix_weights((self.alphabet_size,) * self.length)

    def __call__(self, f: Sequence[int]) -> tuple[int, ...]:
        return tuple(int(s) for s in self.table[self.space.encode(f)])

    def __eq__(self, other):
        if not isinstance(other, Language):
            return NotImplemented
        return (
            self.space == other.space
            and self.alphabet_size == other.alphabet_size
            and np.array_equal(self.table, other.table)
        )

    def __hash__(self):
        return hash((self.space, self.alphabet_size, self.table.tobytes()))

    def is_bijective(self) -> bool:
        if self.alphabet_size**self.length != self.space.size:
            return False
        return len(np.unique(self.codes)) == self.space.size

    def inverse_codes(self) -> np.ndarray:
        """Feature code for each message code; requires a bijection."""
        if not self.is_bijective():
            raise DomainError("language is not a bijection onto A^L; inverse undefined")
        inv = np.empty(self.space.size, dtype=np.int64)
        inv[self.codes] = np.arange(self.space.size)
        return inv


def compositional_violation(lang: Language) -> str | None:
    """Why ``lang`` fails the distance-preservation test, or None if it passes."""
    space = lang.space
    if lang.length != space.K:
        return "length-mismatch"
    if any(m != lang.alphabet_size for m in space.sizes):
        return "alphabet-size-mismatch"
    if not lang.is_bijective():
        return "not-bijective"
    if not np.array_equal(hamming_matrix(space.vectors()), hamming_matrix(lang.table)):
        return "distance-not-preserved"
    return None


def is_compositional(lang: Language) -> bool:
    """True iff ``lang`` preserves Hamming distance between every pair of meanings.

    For K=1 this reduces to bijectivity.
    """
    return compositional_violation(lang) is None


class FeaturePermutation:
    """A bijection on the feature codes ``0..|F|-1``."""

    def __init__(self, perm):
        perm = np.array(perm, dtype=np.int64)
        n = perm.shape[0]
        if perm.ndim != 1 or not np.array_equal(np.sort(perm), np.arange(n)):
            raise DomainError("not a permutation of 0..n-1")
        perm.setflags(write=False)
        self.perm = perm

    @classmethod
    def identity(cls, n: int) -> "FeaturePermutation":
        return cls(np.arange(n))

    @classmethod
    def random(cls, n: int, rng: np.random.Generator) -> "FeaturePermutation":
        return cls(rng.permutation(n))

    def __len__(self):
        return self.perm.shape[0]

    def __call__(self, code: int) -> int:
        return int(self.perm[code])

    def inverse(self) -> "FeaturePermutation":
        inv = np.empty_like(self.perm)
        inv[self.perm] = np.arange(len(self))
        return FeaturePermutation(inv)

    def is_isometry(self, space: FeatureSpace) -> bool:
        """Whether the permutation preserves Hamming distance on ``space``."""
        vecs = space.vectors()
        return np.array_equal(hamming_matrix(vecs), hamming_matrix(vecs[self.perm]))

    def __repr__(self):
        return f"FeaturePermutation({self.perm.tolist()})"


def apply_feature_permutation(lang: Language, p: FeaturePermutation) -> Language:
    """The language ``f -> lang(p(f))`` as an explicit table."""
    if len(p) != lang.space.size:
        raise DomainError("permutation and language are over different spaces")
    return Language(lang.space, lang.alphabet_size, lang.table[p.perm])


def pushforward_uniform_is_uniform(space: FeatureSpace, p: FeaturePermutation) -> bool:
    """Push the uniform distribution on ``space`` through ``p`` and test uniformity.

    Arithmetic is exact: each code carries mass 1/|F| as a Fraction.
    """
    n = space.size
    if len(p) != n:
        raise DomainError("permutation is over a different space")
    mass = Fraction(1, n)
    counts = np.bincount(p.perm, minlength=n)
    pushed = {Fraction(int(c)) * mass for c in counts}
    return pushed == {mass} and sum(Fraction(int(c)) for c in counts) * mass == 1


def _check_enumerable(space: FeatureSpace, d: int) -> None:
    if d**space.K != space.size:
        raise DomainError(f"|A|^K = {d ** space.K} differs from |F| = {space.size}")
    if space.size > MAX_ENUMERATION:
        raise InstanceTooLarge(
            f"|F| = {space.size} > {MAX_ENUMERATION}: {math.factorial(space.size)} languages"
        )


def bijection_code_chunks(n: int, chunk: int = 40320) -> Iterator[np.ndarray]:
    """All permutations of ``range(n)`` in lexicographic order, as int8 row blocks."""
    perms = itertools.permutations(range(n))
    while True:
        block = list(itertools.islice(perms, chunk))
        if not block:
            return
        yield np.array(block, dtype=np.int8)


def enumerate_bijective_languages(space: FeatureSpace, d: int) -> Iterator[Language]:
    """Every bijection F -> A^K, lexicographic over message-code permutations."""
    _check_enumerable(space, d)
    for codes in itertools.permutations(range(space.size)):
        yield Language.from_codes(space, d, space.K, codes)


def enumerate_compositional_languages(space: FeatureSpace, d: int) -> Iterator[Language]:
    """The K!·(m!)^K distance-preserving bijections.

    Message position j carries feature ``sigma[j]`` relabelled by the symbol
    bijection ``tau[j]``.
    """
    if any(m != d for m in space.sizes):
        raise DomainError("compositional family needs |A| = m_i for every feature")
    if d < 2 and space.K > 1:
        raise DomainError("need at least two symbols")
    vecs = space.vectors()
    for sigma in itertools.permutations(range(space.K)):
        for taus in itertools.product(itertools.permutations(range(d)), repeat=space.K):
            table = np.empty_like(vecs)
            for j, (feat, tau) in enumerate(zip(sigma, taus)):
                table[:, j] = np.asarray(tau)[vecs[:, feat]]
            yield Language(space, d, table)


def format_language(lang: Language) -> str:
    """Text table, one ``f1,...,fK -> s1,...,sL`` row per feature vector."""
    lines = [
        f"# sizes={','.join(map(str, lang.space.sizes))} alphabet={lang.alphabet_size}"
    ]
    for f, msg in zip(lang.space.vectors(), lang.table):
        lines.append(f"{','.join(map(str, f))} -> {','.join(map(str, msg))}")
    return "\n".join(lines) + "\n"


def parse_table_rows(text: str) -> tuple[list[tuple[int, ...]], list[tuple[int, ...]], dict]:
    """Rows of a ``f -> s`` table plus any ``# key=value`` header fields."""
    feats, msgs, header = [], [], {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line:
            continue
        if line.startswith("#"):
            for tok in line[1:].split():
                if "=" in tok:
                    k, v = tok.split("=", 1)
                    header[k] = v
            continue
        if "->" not in line:
            raise DomainError(f"line {lineno}: expected 'f1,...,fK -> s1,...,sL'")
        lhs, rhs = line.split("->", 1)
        try:
            feats.append(tuple(int(t) for t in lhs.split(",")))
            msgs.append(tuple(int(t) for t in rhs.split(",")))
        except ValueError as exc:
            raise DomainError(f"line {lineno}: {exc}") from None
    return feats, msgs, header


def parse_language(text: str) -> Language:
    feats, msgs, header = parse_table_rows(text)
    if not feats:
        raise DomainError("empty language table")
    if "sizes" in header:
        sizes = tuple(int(t) for t in header["sizes"].split(","))
    else:
        sizes = tuple(int(c) + 1 for c in np.max(feats, axis=0))
    space = FeatureSpace(sizes)
    d = int(header.get("alphabet", int(np.max(msgs)) + 1))
    lengths = {len(m) for m in msgs}
    if len(lengths) != 1:
        raise DomainError("messages must share a single length")
    table = np.full((space.size, lengths.pop()), -1, dtype=np.int64)
    for f, m in zip(feats, msgs):
        table[space.encode(f)] = m
    if (table < 0).any():
        raise DomainError("table is not total over the feature space")
    return Language(space, d, table)
