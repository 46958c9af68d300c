"""Order-k Markov softmax policies over a word vocabulary.

A policy keeps one logit row per materialized context (the last ``k`` tokens of
the state, BOS-padded) plus a shared default row used for every other context.
Row 0 of :attr:`TokenPolicy.table` is the default row. Tables are read-only;
updates go through :meth:`TokenPolicy.with_table`, which returns a new snapshot.
"""
from __future__ import annotations

import hashlib
import itertools
import json
from dataclasses import dataclass
from functools import cached_property
from typing import Iterable, Optional, Sequence

import numpy as np

from .errors import ArgumentError, ConfigurationError
from .verbal import Vocabulary

ROLES = ("target", "base", "preference")
# Largest context space for which every row is materialized up front.
MATERIALIZE_LIMIT = 200_000
# Largest context space for which a dense code -> row lookup is built.
DENSE_LOOKUP_LIMIT = 1 << 24


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def log_softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


@dataclass
class PolicyGradient:
    """Partial derivatives laid out exactly like the policy's logit table."""

    array: np.ndarray

    def norm(self) -> float:
        return float(np.sqrt(np.sum(self.array * self.array)))

    def is_finite(self) -> bool:
        return bool(np.all(np.isfinite(self.array)))

    def __add__(self, other: "PolicyGradient") -> "PolicyGradient":
        return PolicyGradient(self.array + other.array)

    def __mul__(self, scale: float) -> "PolicyGradient":
        return PolicyGradient(self.array * scale)

    __rmul__ = __mul__


class TokenPolicy:
    def __init__(
        self,
        vocab: Vocabulary,
        k: int = 1,
        role: str = "target",
        contexts: Sequence[tuple] = (),
        table: Optional[np.ndarray] = None,
    ):
        if k < 0:
            raise ArgumentError("context order k must be >= 0")
        if role not in ROLES:
            raise ArgumentError(f"role must be one of {ROLES}")
        self.vocab = vocab
        self.k = int(k)
        self.role = role
        self.contexts = tuple(tuple(int(t) for t in c) for c in contexts)
        if any(len(c) != self.k for c in self.contexts):
            raise ArgumentError("context keys must have length k")
        self._row_of = {c: i + 1 for i, c in enumerate(self.contexts)}
        if len(self._row_of) != len(self.contexts):
            raise ArgumentError("duplicate context keys")
        V = len(vocab)
        if table is None:
            table = np.zeros((len(self.contexts) + 1, V))
        table = np.array(table, dtype=np.float64)
        if table.shape != (len(self.contexts) + 1, V):
            raise ArgumentError(f"table shape {table.shape} does not match layout")
        if not np.all(np.isfinite(table)):
            raise ArgumentError("non-finite logits")
        table.setflags(write=False)
        self.table = table

    # construction ---------------------------------------------------------

    @staticmethod
    def all_contexts(vocab: Vocabulary, k: int):
        if len(vocab) ** k > MATERIALIZE_LIMIT:
            return ()
        return list(itertools.product(range(len(vocab)), repeat=k))

    @classmethod
    def uniform(cls, vocab, k=1, role="target", materialize=True) -> "TokenPolicy":
        ctx = cls.all_contexts(vocab, k) if materialize else ()
        return cls(vocab, k, role, ctx)

    @classmethod
    def random(cls, vocab, k=1, role="target", scale=1.0, seed=0, materialize=True) -> "TokenPolicy":
        ctx = cls.all_contexts(vocab, k) if materialize else ()
        rng = np.random.default_rng(seed)
        return cls(vocab, k, role, ctx, scale * rng.standard_normal((len(ctx) + 1, len(vocab))))

    @classmethod
    def from_counts(
        cls,
        vocab: Vocabulary,
        episodes: Iterable,
        k: int = 1,
        smoothing: float = 1.0,
        role: str = "base",
    ) -> "TokenPolicy":
        """Smoothed maximum-likelihood n-gram fit on episode step tokens.

        Each row holds ``log(count + smoothing)``; the default row uses the
        smoothed unigram counts.
        """
        if smoothing <= 0:
            raise ArgumentError("smoothing must be positive")
        V = len(vocab)
        ctx = cls.all_contexts(vocab, k)
        counts: dict[tuple, np.ndarray] = {}
        unigram = np.zeros(V)
        probe = cls(vocab, k, role)
        for ep in episodes:
            for state, tok, _ in ep.states():
                key = probe.context_key(state)
                counts.setdefault(key, np.zeros(V))[tok] += 1
                unigram[tok] += 1
        if not ctx:
            ctx = sorted(counts)
        table = np.empty((len(ctx) + 1, V))
        table[0] = np.log(unigram + smoothing)
        for i, key in enumerate(ctx, start=1):
            table[i] = np.log(counts.get(key, np.zeros(V)) + smoothing)
        return cls(vocab, k, role, ctx, table)

    def with_table(self, table: np.ndarray, role: Optional[str] = None) -> "TokenPolicy":
        return TokenPolicy(self.vocab, self.k, role or self.role, self.contexts, table)

    def clone_as(self, role: str) -> "TokenPolicy":
        return self.with_table(self.table.copy(), role)

    def same_layout(self, other: "TokenPolicy") -> bool:
        return (
            self.vocab.tokens == other.vocab.tokens
            and self.k == other.k
            and self.contexts == other.contexts
        )

    # context handling -----------------------------------------------------

    @property
    def key_mod(self) -> int:
        return len(self.vocab) ** self.k

    def context_key(self, state: Sequence[int]) -> tuple:
        if self.k == 0:
            return ()
        tail = tuple(state[-self.k:])
        return (self.vocab.bos,) * (self.k - len(tail)) + tail

    def encode_key(self, key: Sequence[int]) -> int:
        code = 0
        for t in key:
            code = code * len(self.vocab) + int(t)
        return code

    def row_index(self, state: Sequence[int]) -> int:
        return self._row_of.get(self.context_key(state), 0)

    @cached_property
    def _sorted_codes(self):
        codes = np.array([self.encode_key(c) for c in self.contexts], dtype=np.int64)
        order = np.argsort(codes, kind="stable")
        return codes[order], (order + 1).astype(np.int64)

    def dense_row_lookup(self) -> np.ndarray:
        """Array mapping every context code to its row (0 = default)."""
        if self.key_mod > DENSE_LOOKUP_LIMIT:
            raise ConfigurationError(
                f"context space {self.key_mod} too large for a dense lookup"
            )
        return self._dense_lookup

    @cached_property
    def _dense_lookup(self) -> np.ndarray:
        lookup = np.zeros(self.key_mod, dtype=np.int64)
        codes, rows = self._sorted_codes
        lookup[codes] = rows
        return lookup

    def rows_for_codes(self, codes: np.ndarray) -> np.ndarray:
        codes = np.asarray(codes, dtype=np.int64)
        if self.key_mod <= DENSE_LOOKUP_LIMIT:
            return self._dense_lookup[codes]
        sorted_codes, rows = self._sorted_codes
        if len(sorted_codes) == 0:
            return np.zeros(len(codes), dtype=np.int64)
        pos = np.minimum(np.searchsorted(sorted_codes, codes), len(sorted_codes) - 1)
        return np.where(sorted_codes[pos] == codes, rows[pos], 0)

    # probabilities --------------------------------------------------------

    @cached_property
    def prob_table(self) -> np.ndarray:
        p = softmax(self.table)
        p.setflags(write=False)
        return p

    @cached_property
    def log_prob_table(self) -> np.ndarray:
        lp = log_softmax(self.table)
        lp.setflags(write=False)
        return lp

    @cached_property
    def cdf_table(self) -> np.ndarray:
        c = np.cumsum(self.prob_table, axis=1)
        c.setflags(write=False)
        return c

    def logits(self, state) -> np.ndarray:
        return self.table[self.row_index(state)]

    def probs(self, state) -> np.ndarray:
        return self.prob_table[self.row_index(state)]

    def prob(self, state, token: int) -> float:
        return float(self.prob_table[self.row_index(state), token])

    def log_prob(self, state, token: int) -> float:
        return float(self.log_prob_table[self.row_index(state), token])

    def token_probs(self, codes, tokens) -> np.ndarray:
        return self.prob_table[self.rows_for_codes(codes), np.asarray(tokens, dtype=np.int64)]

    def token_log_probs(self, codes, tokens) -> np.ndarray:
        return self.log_prob_table[self.rows_for_codes(codes), np.asarray(tokens, dtype=np.int64)]

    def sample(self, state, rng_seed=0) -> int:
        rng = rng_seed if isinstance(rng_seed, np.random.Generator) else np.random.default_rng(rng_seed)
        cdf = self.cdf_table[self.row_index(state)]
        return min(int(np.searchsorted(cdf, rng.random(), side="right")), len(cdf) - 1)

    # gradients ------------------------------------------------------------

    def grad_log_prob(self, state, token: int) -> PolicyGradient:
        """d log p(token | state) / d logits: ``onehot(token) - softmax(row)`` on
        the context's row, zero elsewhere."""
        g = np.zeros_like(self.table)
        row = self.row_index(state)
        g[row] = -self.prob_table[row]
        g[row, token] += 1.0
        return PolicyGradient(g)

    def grad_prob(self, state, token: int) -> PolicyGradient:
        row = self.row_index(state)
        g = self.grad_log_prob(state, token)
        g.array[row] *= self.prob_table[row, token]
        return g

    # serialization --------------------------------------------------------

    def to_dict(self) -> dict:
        return {
            "vocab_hash": self.vocab.hash(),
            "k": self.k,
            "role": self.role,
            "rows": [
                {"context": list(c), "logits": self.table[i + 1].tolist()}
                for i, c in enumerate(self.contexts)
            ],
            "default_row": self.table[0].tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict, vocab: Vocabulary) -> "TokenPolicy":
        if d["vocab_hash"] != vocab.hash():
            raise ConfigurationError("policy was built for a different vocabulary")
        contexts = [tuple(r["context"]) for r in d["rows"]]
        table = np.array([d["default_row"]] + [r["logits"] for r in d["rows"]], dtype=np.float64)
        return cls(vocab, d["k"], d["role"], contexts, table.reshape(len(contexts) + 1, len(vocab)))

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            json.dump(self.to_dict(), fh, sort_keys=True)
            fh.write("\n")

    @classmethod
    def load(cls, path, vocab: Vocabulary) -> "TokenPolicy":
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh), vocab)

    def hash(self) -> str:
        """Digest of vocabulary, order and parameters (role excluded)."""
        return self._digest

    @cached_property
    def _digest(self) -> str:
        h = hashlib.sha256()
        h.update(self.vocab.hash().encode())
        h.update(json.dumps([self.k, [list(c) for c in self.contexts]]).encode())
        h.update(np.ascontiguousarray(self.table).tobytes())
        return h.hexdigest()

    def __repr__(self):
        return f"TokenPolicy(role={self.role!r}, k={self.k}, |V|={len(self.vocab)}, rows={len(self.contexts) + 1})"


def episode_log_prob(policy: TokenPolicy, episode) -> float:
    """Sum of token log-probabilities over all step tokens, conditioning on the
    question and every earlier token."""
    return float(sum(policy.log_prob(state, tok) for state, tok, _ in episode.states()))


def row_kl(log_p: np.ndarray, log_q: np.ndarray) -> np.ndarray:
    """Row-wise KL(p || q) from log-probability rows."""
    return np.sum(np.exp(log_p) * (log_p - log_q), axis=-1)
