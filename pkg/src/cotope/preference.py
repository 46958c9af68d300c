"""Self-consistency rewards for verbalized walks and reward-weighted training of
the preference policy."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .episodes import LoggedDataset
from .errors import ArgumentError, ConfigurationError
from .graph import KnowledgeGraph
from .policy import PolicyGradient, TokenPolicy
from .verbal import VerbalizedEpisode, Vocabulary, episode_for, tokenize
from .walk import Trajectory


class AnswerOracle:
    """Graph-grounded answerer with a noise knob.

    It reads the entity mentions of the chain of thought, checks each hop
    against the graph along the relations the question names, and answers
    with the final entity. With probability ``noise`` it instead answers a
    uniformly random other entity.
    """

    def __init__(self, graph: KnowledgeGraph, vocab: Vocabulary, noise: float = 0.0, rng_seed: int = 0):
        if not 0.0 <= noise <= 1.0:
            raise ArgumentError("noise must lie in [0, 1]")
        if noise > 0 and graph.num_entities < 2:
            raise ArgumentError("a noisy oracle needs at least two entities")
        self.graph = graph
        self.vocab = vocab
        self.noise = noise
        self.rng_seed = rng_seed
        self._by_tokens = {
            vocab.encode(tokenize(label)): i for i, label in enumerate(graph.entity_labels)
        }

    def generator(self, item: int) -> np.random.Generator:
        return np.random.default_rng([self.rng_seed, item])

    def grounded_answer(self, relations, episode: VerbalizedEpisode) -> Optional[int]:
        current = None
        for r, step in zip(relations, episode.steps):
            spans = step.entity_spans()
            if len(spans) != 2:
                return None
            subj, obj = (self._by_tokens.get(s) for s in spans)
            if subj is None or obj is None or (current is not None and subj != current):
                return None
            if not self.graph.has_edge(subj, r, obj):
                return None
            current = obj
        return current

    def answer(self, trajectory: Trajectory, episode: VerbalizedEpisode, rng: np.random.Generator) -> Optional[int]:
        truth = self.grounded_answer(trajectory.relations, episode)
        if self.noise > 0 and rng.random() < self.noise:
            n = self.graph.num_entities
            if truth is None:
                return int(rng.integers(n))
            wrong = int(rng.integers(n - 1))
            return wrong + (wrong >= truth)
        return truth


def self_consistency_reward(
    trajectory: Trajectory,
    episode: VerbalizedEpisode,
    oracle: AnswerOracle,
    k_q: int = 10,
    item: int = 0,
) -> float:
    """Fraction of ``k_q`` independent oracle answers equal to the final entity."""
    if k_q < 1:
        raise ArgumentError("k_q must be positive")
    rng = oracle.generator(item)
    target = trajectory.entities[-1]
    correct = sum(oracle.answer(trajectory, episode, rng) == target for _ in range(k_q))
    return correct / k_q


@dataclass
class RewardedTrajectorySet:
    items: list = field(default_factory=list)  # (Trajectory, VerbalizedEpisode, reward)
    k_q: int = 10
    vocab_hash: Optional[str] = None

    def __len__(self):
        return len(self.items)

    @property
    def rewards(self) -> np.ndarray:
        return np.array([r for _, _, r in self.items], dtype=float)

    @property
    def episodes(self) -> list:
        return [e for _, e, _ in self.items]

    def save(self, path, graph: KnowledgeGraph) -> None:
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            for traj, ep, r in self.items:
                row = {
                    "trajectory": traj.to_dict(graph),
                    "episode": ep.to_dict(),
                    "reward": r,
                    "k_q": self.k_q,
                    "vocab_hash": self.vocab_hash,
                }
                fh.write(json.dumps(row, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path, graph: KnowledgeGraph) -> "RewardedTrajectorySet":
        items, k_q, vh = [], 10, None
        with open(path, encoding="utf-8") as fh:
            for line in fh:
                if not line.strip():
                    continue
                d = json.loads(line)
                traj = Trajectory.from_dict(d["trajectory"], graph)
                ep = VerbalizedEpisode.from_dict(d["episode"])
                items.append((traj, VerbalizedEpisode(ep.question, ep.steps, ep.answer, traj), d["reward"]))
                k_q, vh = d["k_q"], d.get("vocab_hash")
        return cls(items, k_q, vh)


def score_trajectories(
    trajectories,
    graph: KnowledgeGraph,
    templates,
    vocab: Vocabulary,
    oracle: AnswerOracle,
    k_q: int = 10,
) -> RewardedTrajectorySet:
    items = []
    for i, traj in enumerate(trajectories):
        ep = episode_for(traj, graph, templates, vocab)
        r = self_consistency_reward(traj, ep, oracle, k_q, item=i)
        items.append((traj.with_reward(r), ep, r))
    return RewardedTrajectorySet(items, k_q, vocab.hash())


def reward_distribution(rset: RewardedTrajectorySet) -> dict:
    """Counts per reward level ``j / k_q``; empty set gives an empty dict."""
    if not rset.items:
        return {}
    counts = np.zeros(rset.k_q + 1, dtype=int)
    for r in rset.rewards:
        counts[int(round(r * rset.k_q))] += 1
    return {j / rset.k_q: int(c) for j, c in enumerate(counts)}


def total_variation(counts: dict, pmf: np.ndarray) -> float:
    """TV distance between a count histogram over ``j / K`` and a pmf over j."""
    total = sum(counts.values())
    K = len(pmf) - 1
    emp = np.zeros(K + 1)
    for level, c in counts.items():
        emp[int(round(level * K))] = c / total
    return 0.5 * float(np.abs(emp - pmf).sum())


# training ------------------------------------------------------------------


def _token_store(episodes, vocab: Vocabulary) -> LoggedDataset:
    tokens, mask, step_offsets, ep_offsets = [], [], [0], [0]
    for ep in episodes:
        for s in ep.steps:
            tokens.extend(s.tokens)
            mask.extend(s.mask)
            step_offsets.append(len(tokens))
        ep_offsets.append(len(step_offsets) - 1)
    L = len(tokens)
    return LoggedDataset(
        vocab, [ep.question for ep in episodes], [ep.answer for ep in episodes],
        tokens, mask, step_offsets, ep_offsets, np.ones(L), np.zeros(L),
    )


class PreferenceObjective:
    """``J = sum_k R_k * sum_t log mu(y_t | q, y_<t)`` over step tokens."""

    def __init__(self, rset: RewardedTrajectorySet, policy: TokenPolicy):
        if rset.vocab_hash is not None and rset.vocab_hash != policy.vocab.hash():
            raise ConfigurationError("reward set and policy use different vocabularies")
        self.store = _token_store(rset.episodes, policy.vocab)
        if len(self.store.tokens) and self.store.tokens.max() >= len(policy.vocab):
            raise ConfigurationError("episode tokens fall outside the policy vocabulary")
        counts = np.diff(self.store.token_offsets)
        self.weights = np.repeat(rset.rewards, counts)
        self.k = policy.k
        self.codes = self.store.codes(policy.k)

    def value(self, policy: TokenPolicy) -> float:
        if not len(self.weights):
            return 0.0
        return float(np.dot(self.weights, policy.token_log_probs(self.codes, self.store.tokens)))

    def gradient(self, policy: TokenPolicy) -> PolicyGradient:
        g = np.zeros_like(policy.table)
        if len(self.weights):
            rows = policy.rows_for_codes(self.codes)
            np.add.at(g, (rows, self.store.tokens), self.weights)
            row_w = np.bincount(rows, weights=self.weights, minlength=len(g))
            g -= row_w[:, None] * policy.prob_table
        return PolicyGradient(g)


def train_preference(
    policy: TokenPolicy,
    rset: RewardedTrajectorySet,
    learning_rate: float = 1e-3,
    epochs: int = 10,
    lr_decay: bool = True,
    max_backtracks: int = 20,
):
    """Full-batch gradient ascent on the reward-weighted log-likelihood.

    A step that lowers J is retried at half the rate, up to ``max_backtracks``
    times, so J never decreases across accepted epochs. Returns the trained
    policy and a per-epoch log.
    """
    if epochs < 1 or learning_rate < 0:
        raise ArgumentError("epochs must be positive and learning_rate non-negative")
    objective = PreferenceObjective(rset, policy)
    current = policy
    j_cur = objective.value(current)
    log = [{"epoch": 0, "J": j_cur, "lr": 0.0, "accepted": True}]
    for epoch in range(epochs):
        lr = learning_rate * (1.0 - epoch / epochs) if lr_decay else learning_rate
        grad = objective.gradient(current).array
        accepted = False
        for _ in range(max_backtracks + 1):
            cand = current.with_table(current.table + lr * grad)
            j_new = objective.value(cand)
            if j_new >= j_cur:
                current, j_cur, accepted = cand, j_new, True
                break
            lr *= 0.5
        log.append({"epoch": epoch + 1, "J": j_cur, "lr": lr if accepted else 0.0, "accepted": accepted})
    return current.with_table(current.table, "preference"), log


def mean_log_likelihood(policy: TokenPolicy, episodes) -> float:
    """Average per-token log-likelihood of step tokens given the question."""
    if not episodes:
        raise ArgumentError("no episodes")
    store = _token_store(episodes, policy.vocab)
    return float(np.mean(policy.token_log_probs(store.codes(policy.k), store.tokens)))
