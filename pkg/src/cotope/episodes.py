"""Logged chain-of-thought datasets.

Episodes are generated by the behavior distribution: every token position of a
verbalized walk is redrawn, entity-mention positions from the preference
policy and all other positions from the base policy, and the probability of the
drawn token under its generating policy is cached as the propensity. Everything
is held in flat arrays so estimators can work vectorized.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import _kernels
from .errors import ArgumentError, ConfigurationError, LoggingError, StalenessError, ValidationError
from .policy import TokenPolicy
from .verbal import Step, VerbalizedEpisode, Vocabulary, episode_for
from .walk import DEFAULT_HOP_RANGE, sample_walk_set

PROPENSITY_FLOOR = 1e-9
_CANON = dict(sort_keys=True, separators=(",", ":"))


@dataclass(frozen=True)
class Skeleton:
    """Shape of an episode: fixed question, step lengths and the entity mask."""

    question: tuple[int, ...]
    step_lengths: tuple[int, ...]
    mask: tuple[bool, ...]
    answer: str = ""
    template_tokens: tuple[int, ...] = field(default=(), compare=False)

    @classmethod
    def from_episode(cls, ep: VerbalizedEpisode) -> "Skeleton":
        return cls(
            ep.question,
            tuple(len(s.tokens) for s in ep.steps),
            tuple(m for s in ep.steps for m in s.mask),
            ep.answer,
            tuple(t for s in ep.steps for t in s.tokens),
        )

    @property
    def length(self) -> int:
        return len(self.mask)


@dataclass(frozen=True)
class LoggedEpisode:
    episode: VerbalizedEpisode
    propensities: tuple[tuple[float, ...], ...]
    base_log_probs: tuple[tuple[float, ...], ...]

    @property
    def num_steps(self) -> int:
        return self.episode.num_steps

    @property
    def step_token_counts(self) -> tuple[int, ...]:
        return tuple(len(s.tokens) for s in self.episode.steps)


class LoggedDataset:
    """Flat-array store for ``N`` logged episodes.

    ``step_offsets`` index token arrays by step and ``episode_offsets`` index
    steps by episode.
    """

    def __init__(
        self,
        vocab: Vocabulary,
        questions: Sequence[tuple],
        answers: Sequence[str],
        tokens,
        mask,
        step_offsets,
        episode_offsets,
        propensity,
        base_logp,
        header: Optional[dict] = None,
        validated: bool = False,
    ):
        self.vocab = vocab
        self.questions = [tuple(int(t) for t in q) for q in questions]
        self.answers = list(answers)
        self.tokens = np.asarray(tokens, dtype=np.int64)
        self.mask = np.asarray(mask, dtype=bool)
        self.step_offsets = np.asarray(step_offsets, dtype=np.int64)
        self.episode_offsets = np.asarray(episode_offsets, dtype=np.int64)
        self.propensity = np.asarray(propensity, dtype=np.float64)
        self.base_logp = np.asarray(base_logp, dtype=np.float64)
        self.header = dict(header or {})
        self.header["N"] = len(self.questions)
        self.header.setdefault("vocab_hash", vocab.hash())
        self.validated = validated
        self._codes: dict[int, np.ndarray] = {}
        self._check()

    def _check(self):
        L = len(self.tokens)
        n = len(self.questions)
        if len(self.answers) != n or len(self.episode_offsets) != n + 1:
            raise ValidationError("episode count mismatch")
        for arr in (self.mask, self.propensity, self.base_logp):
            if len(arr) != L:
                raise ValidationError("token arrays are not length-aligned")
        if self.step_offsets[0] != 0 or self.step_offsets[-1] != L or np.any(np.diff(self.step_offsets) < 1):
            raise ValidationError("every step needs at least one token")
        if self.episode_offsets[0] != 0 or self.episode_offsets[-1] != len(self.step_offsets) - 1 or (
            n and np.any(np.diff(self.episode_offsets) < 1)
        ):
            raise ValidationError("every episode needs at least one step")
        if self.header.get("vocab_hash") != self.vocab.hash():
            raise ConfigurationError("dataset vocabulary hash mismatch")
        if L and not np.all(self.propensity > 0):
            raise ValidationError("propensities must be strictly positive")

    # basic views ---------------------------------------------------------

    def __len__(self) -> int:
        return len(self.questions)

    @property
    def token_offsets(self) -> np.ndarray:
        return self.step_offsets[self.episode_offsets]

    @property
    def num_steps(self) -> np.ndarray:
        return np.diff(self.episode_offsets)

    @property
    def step_token_counts(self) -> np.ndarray:
        return np.diff(self.step_offsets)

    def token_weights(self) -> np.ndarray:
        """Per-token factor ``1 / (N * T_i * |c_t|)`` of the nested mean."""
        per_step = 1.0 / self.step_token_counts
        steps_of_ep = np.repeat(self.num_steps, self.num_steps)
        per_step = per_step / steps_of_ep / max(len(self), 1)
        return np.repeat(per_step, self.step_token_counts)

    def episode_of_token(self) -> np.ndarray:
        return np.repeat(np.arange(len(self)), np.diff(self.token_offsets))

    def codes(self, k: int) -> np.ndarray:
        """Context code (last ``k`` tokens of the state, BOS-padded) for every
        logged token."""
        if k not in self._codes:
            self._codes[k] = _context_codes(self, k)
        return self._codes[k]

    def seed_codes(self, k: int, codes: np.ndarray) -> None:
        self._codes[k] = np.asarray(codes, dtype=np.int64)

    def episode(self, i: int) -> LoggedEpisode:
        s0, s1 = self.episode_offsets[i], self.episode_offsets[i + 1]
        steps, props, lps = [], [], []
        for t in range(s0, s1):
            a, b = self.step_offsets[t], self.step_offsets[t + 1]
            steps.append(Step(tuple(self.tokens[a:b].tolist()), tuple(self.mask[a:b].tolist())))
            props.append(tuple(self.propensity[a:b].tolist()))
            lps.append(tuple(self.base_logp[a:b].tolist()))
        ep = VerbalizedEpisode(self.questions[i], tuple(steps), self.answers[i])
        return LoggedEpisode(ep, tuple(props), tuple(lps))

    def episodes(self):
        return [self.episode(i) for i in range(len(self))]

    def subset(self, indices) -> "LoggedDataset":
        return LoggedDataset.from_logged([self.episode(int(i)) for i in indices], self.vocab, self.header)

    @classmethod
    def from_logged(cls, logged: Sequence[LoggedEpisode], vocab: Vocabulary, header=None) -> "LoggedDataset":
        tokens, mask, props, lps = [], [], [], []
        step_offsets, episode_offsets = [0], [0]
        for le in logged:
            for step, p, lp in zip(le.episode.steps, le.propensities, le.base_log_probs):
                if not (len(step.tokens) == len(p) == len(lp)):
                    raise ValidationError("propensities not aligned with step tokens")
                tokens.extend(step.tokens)
                mask.extend(step.mask)
                props.extend(p)
                lps.extend(lp)
                step_offsets.append(len(tokens))
            episode_offsets.append(len(step_offsets) - 1)
        return cls(
            vocab,
            [le.episode.question for le in logged],
            [le.episode.answer for le in logged],
            tokens, mask, step_offsets, episode_offsets, props, lps,
            dict(header or {}),
        )

    # persistence ----------------------------------------------------------

    def header_line(self) -> str:
        return json.dumps(self.header, **_CANON)

    def episode_lines(self):
        for i in range(len(self)):
            le = self.episode(i)
            yield json.dumps(
                {
                    "q": list(le.episode.question),
                    "answer": le.episode.answer,
                    "steps": [
                        {"t": list(s.tokens), "mask": list(s.mask), "lambda": list(p), "base_logp": list(lp)}
                        for s, p, lp in zip(le.episode.steps, le.propensities, le.base_log_probs)
                    ],
                },
                **_CANON,
            )


def _context_codes(ds: LoggedDataset, k: int) -> np.ndarray:
    if k == 0 or len(ds.tokens) == 0:
        return np.zeros(len(ds.tokens), dtype=np.int64)
    V = len(ds.vocab)
    bos = ds.vocab.bos
    offsets = ds.token_offsets
    parts, positions = [], []
    base = 0
    for i, q in enumerate(ds.questions):
        a, b = offsets[i], offsets[i + 1]
        parts.append(np.full(k, bos, dtype=np.int64))
        parts.append(np.asarray(q, dtype=np.int64))
        parts.append(ds.tokens[a:b])
        start = base + k + len(q)
        positions.append(np.arange(start, start + (b - a)))
        base = start + (b - a)
    stream = np.concatenate(parts)
    pos = np.concatenate(positions)
    codes = np.zeros(len(pos), dtype=np.int64)
    for j in range(k, 0, -1):
        codes = codes * V + stream[pos - j]
    return codes


def _init_code(question: Sequence[int], k: int, vocab: Vocabulary) -> int:
    V = len(vocab)
    tail = list(question[-k:]) if k else []
    key = [vocab.bos] * (k - len(tail)) + tail
    code = 0
    for t in key:
        code = code * V + int(t)
    return code


def _joint_rows(policy: TokenPolicy, k: int) -> np.ndarray:
    """Row lookup over order-``k`` codes for a policy of order ``<= k``."""
    V = len(policy.vocab)
    codes = np.arange(V ** k, dtype=np.int64) % (V ** policy.k)
    return policy.dense_row_lookup()[codes]


def check_behavior(mu: TokenPolicy, base: TokenPolicy) -> None:
    if mu.vocab.tokens != base.vocab.tokens:
        raise ConfigurationError("preference and base policies use different vocabularies")


def sample_behavior(
    skeletons: Sequence[Skeleton],
    mu: TokenPolicy,
    base: TokenPolicy,
    uniforms: np.ndarray,
    header: Optional[dict] = None,
) -> LoggedDataset:
    """Redraw every token of each skeleton from the behavior mixture.

    ``uniforms`` supplies one U(0,1) draw per token position, in order.
    """
    check_behavior(mu, base)
    vocab = mu.vocab
    V = len(vocab)
    k = max(mu.k, base.k)
    lengths = np.array([s.length for s in skeletons], dtype=np.int64)
    ep_offsets = np.concatenate([[0], np.cumsum(lengths)]).astype(np.int64)
    if len(uniforms) != ep_offsets[-1]:
        raise ArgumentError("need exactly one uniform per token position")
    mask = np.array([m for s in skeletons for m in s.mask], dtype=np.uint8)
    init = np.array([_init_code(s.question, k, vocab) for s in skeletons], dtype=np.int64)
    tokens, codes = _kernels.sample_tokens(
        init, mask, ep_offsets, np.asarray(uniforms, dtype=np.float64),
        _joint_rows(mu, k), mu.cdf_table, _joint_rows(base, k), base.cdf_table,
        V, V ** k,
    )
    mask_b = mask.astype(bool)
    mu_p = mu.token_probs(codes % mu.key_mod, tokens)
    base_p = base.token_probs(codes % base.key_mod, tokens)
    propensity = np.where(mask_b, mu_p, base_p)
    low = np.flatnonzero(propensity < PROPENSITY_FLOOR)
    if len(low):
        raise LoggingError(
            f"propensity {propensity[low[0]]:.3g} below floor for token "
            f"{vocab.tokens[tokens[low[0]]]!r} at flat position {low[0]}"
        )
    base_logp = base.token_log_probs(codes % base.key_mod, tokens)

    step_lengths = [n for s in skeletons for n in s.step_lengths]
    step_offsets = np.concatenate([[0], np.cumsum(step_lengths)]).astype(np.int64)
    n_steps = [len(s.step_lengths) for s in skeletons]
    episode_offsets = np.concatenate([[0], np.cumsum(n_steps)]).astype(np.int64)
    hdr = {"mu_hash": mu.hash(), "base_hash": base.hash()}
    hdr.update(header or {})
    ds = LoggedDataset(
        vocab, [s.question for s in skeletons], [s.answer for s in skeletons],
        tokens, mask_b, step_offsets, episode_offsets, propensity, base_logp, hdr,
        validated=True,
    )
    ds.seed_codes(k, codes)
    for kk in {mu.k, base.k}:
        ds.seed_codes(kk, codes % (V ** kk))
    return ds


def log_episodes(
    graph,
    templates,
    vocab: Vocabulary,
    mu: TokenPolicy,
    base: TokenPolicy,
    count: int,
    hop_range=DEFAULT_HOP_RANGE,
    rng_seed: int = 0,
) -> LoggedDataset:
    """Sample ``count`` walks, verbalize them into skeletons and redraw their
    tokens from the behavior mixture. Episode ``i`` uses its own generators, so
    the output is independent of any parallel split."""
    if mu.vocab.tokens != vocab.tokens:
        raise ConfigurationError("policies do not use the supplied vocabulary")
    walks = sample_walk_set(graph, count, hop_range, rng_seed)
    skeletons = [Skeleton.from_episode(episode_for(w, graph, templates, vocab)) for w in walks]
    uniforms = [np.random.default_rng([rng_seed, i, 1]).random(s.length) for i, s in enumerate(skeletons)]
    u = np.concatenate(uniforms) if uniforms else np.zeros(0)
    header = {"seed": rng_seed, "hop_range": list(hop_range)}
    return sample_behavior(skeletons, mu, base, u, header)


def recompute_propensities(ds: LoggedDataset, mu: TokenPolicy, base: TokenPolicy):
    mu_p = mu.token_probs(ds.codes(mu.k), ds.tokens)
    base_p = base.token_probs(ds.codes(base.k), ds.tokens)
    return np.where(ds.mask, mu_p, base_p), base.token_log_probs(ds.codes(base.k), ds.tokens)


def validate_against(ds: LoggedDataset, mu: TokenPolicy, base: TokenPolicy, tol: float = 1e-15) -> None:
    """Raise unless the cached propensities belong to these snapshots."""
    if ds.header.get("mu_hash") not in (None, mu.hash()) or ds.header.get("base_hash") not in (None, base.hash()):
        raise StalenessError("dataset was logged with different policy snapshots")
    lam, lp = recompute_propensities(ds, mu, base)
    bad = np.flatnonzero((np.abs(lam - ds.propensity) > tol) | (np.abs(lp - ds.base_logp) > tol))
    if len(bad):
        raise ValidationError(
            f"{len(bad)} cached propensities disagree with the snapshots (first at flat position {bad[0]})"
        )


def save_dataset(path, ds: LoggedDataset) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(ds.header_line() + "\n")
        for line in ds.episode_lines():
            fh.write(line + "\n")


def load_dataset(path, vocab: Vocabulary, mu: Optional[TokenPolicy] = None, base: Optional[TokenPolicy] = None) -> LoggedDataset:
    """Load a dataset file; with both snapshots given, every cached propensity
    is recomputed and compared. Without them ``validated`` stays False."""
    if (mu is None) != (base is None):
        raise ConfigurationError("supply both policy snapshots or neither")
    with open(path, encoding="utf-8") as fh:
        lines = [line for line in fh if line.strip()]
    if not lines:
        raise ValidationError("empty dataset file")
    header = json.loads(lines[0])
    if header.get("vocab_hash") != vocab.hash():
        raise StalenessError("dataset vocabulary differs from the supplied vocabulary")
    logged = []
    for line in lines[1:]:
        d = json.loads(line)
        steps = tuple(Step(tuple(s["t"]), tuple(bool(m) for m in s["mask"])) for s in d["steps"])
        logged.append(
            LoggedEpisode(
                VerbalizedEpisode(tuple(d["q"]), steps, d["answer"]),
                tuple(tuple(float(x) for x in s["lambda"]) for s in d["steps"]),
                tuple(tuple(float(x) for x in s["base_logp"]) for s in d["steps"]),
            )
        )
    if len(logged) != header.get("N", len(logged)):
        raise ValidationError("header N disagrees with the number of episodes")
    ds = LoggedDataset.from_logged(logged, vocab, header)
    if mu is not None:
        validate_against(ds, mu, base)
        ds.validated = True
    return ds
