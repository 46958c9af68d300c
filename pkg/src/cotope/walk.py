"""Multi-hop walks over a knowledge graph with a uniform out-edge policy."""
from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import ArgumentError, GraphIntegrityError, SamplingExhaustedError, TruncatedWalkError
from .graph import KnowledgeGraph

DEFAULT_HOP_RANGE = (2, 4)


@dataclass(frozen=True)
class Trajectory:
    """Alternating chain ``(e0, r1, e1, ..., rT, eT)`` of dense indices."""

    steps: tuple[int, ...]
    reward: Optional[float] = None

    def __post_init__(self):
        if len(self.steps) % 2 != 1:
            raise ArgumentError("trajectory must alternate entity/relation and end on an entity")
        if self.reward is not None and not 0.0 <= self.reward <= 1.0:
            raise ArgumentError(f"reward {self.reward} outside [0, 1]")

    @property
    def hop_count(self) -> int:
        return len(self.steps) // 2

    @property
    def entities(self) -> tuple[int, ...]:
        return self.steps[0::2]

    @property
    def relations(self) -> tuple[int, ...]:
        return self.steps[1::2]

    def triples(self):
        s = self.steps
        return [(s[2 * i], s[2 * i + 1], s[2 * i + 2]) for i in range(self.hop_count)]

    def with_reward(self, reward: float) -> "Trajectory":
        return Trajectory(self.steps, reward)

    def is_valid_for(self, graph: KnowledgeGraph) -> bool:
        return all(graph.has_edge(h, r, t) for h, r, t in self.triples())

    def to_dict(self, graph: KnowledgeGraph) -> dict:
        ids = [
            graph.entity_ids[x] if i % 2 == 0 else graph.relation_ids[x]
            for i, x in enumerate(self.steps)
        ]
        return {"steps": ids, "hops": self.hop_count, "reward": self.reward}

    @classmethod
    def from_dict(cls, d: dict, graph: KnowledgeGraph) -> "Trajectory":
        try:
            steps = tuple(
                graph.entity_index[x] if i % 2 == 0 else graph.relation_index[x]
                for i, x in enumerate(d["steps"])
            )
        except KeyError as exc:
            raise GraphIntegrityError("trajectory id not in graph", [exc.args[0]]) from None
        traj = cls(steps, d.get("reward"))
        if "hops" in d and d["hops"] != traj.hop_count:
            raise ArgumentError("hops field disagrees with steps")
        return traj


def _as_rng(rng_seed) -> np.random.Generator:
    if isinstance(rng_seed, np.random.Generator):
        return rng_seed
    return np.random.default_rng(rng_seed)


def _walk(graph, start, hops, rng, no_revisit):
    steps = [start]
    visited = {start}
    current = start
    for _ in range(hops):
        options = graph.out_index[current]
        if no_revisit:
            options = [o for o in options if o[1] not in visited]
        if not options:
            raise TruncatedWalkError(Trajectory(tuple(steps)), hops)
        r, t = options[int(rng.integers(len(options)))]
        steps.extend((r, t))
        visited.add(t)
        current = t
    return Trajectory(tuple(steps))


def sample_walk(graph: KnowledgeGraph, start, hops: int, rng_seed=0, no_revisit: bool = False) -> Trajectory:
    """One walk of exactly ``hops`` hops, each transition uniform over the
    current entity's out-edges.

    Raises :class:`TruncatedWalkError` (carrying the partial walk) when a sink
    is reached early.
    """
    if hops < 1:
        raise ArgumentError("hops must be positive")
    start = graph.resolve_entity(start)
    return _walk(graph, start, hops, _as_rng(rng_seed), no_revisit)


def sample_walk_set(
    graph: KnowledgeGraph,
    count: int,
    hop_range=DEFAULT_HOP_RANGE,
    rng_seed: int = 0,
    no_revisit: bool = False,
    max_retries: int = 100,
) -> list[Trajectory]:
    """``count`` complete walks; walk ``i`` draws from its own generator seeded
    with ``[rng_seed, i]`` so the result does not depend on scheduling.

    Start entities are uniform over entities with out-degree >= 1 and hop
    counts uniform over ``hop_range`` (inclusive). A truncated attempt is
    redrawn from scratch, at most ``max_retries`` times per walk.
    """
    lo, hi = hop_range
    if count < 0:
        raise ArgumentError("count must be >= 0")
    if not 1 <= lo <= hi:
        raise ArgumentError("hop_range must satisfy 1 <= min <= max")
    starts = graph.non_sinks()
    out: list[Trajectory] = []
    for i in range(count):
        if not starts:
            raise SamplingExhaustedError("graph has no entity with outgoing edges", out)
        rng = np.random.default_rng([rng_seed, i])
        for _ in range(max_retries):
            start = starts[int(rng.integers(len(starts)))]
            hops = int(rng.integers(lo, hi + 1))
            try:
                out.append(_walk(graph, start, hops, rng, no_revisit))
                break
            except TruncatedWalkError:
                continue
        else:
            raise SamplingExhaustedError(
                f"walk {i}: no complete walk within {max_retries} attempts", out
            )
    return out


def save_trajectories(path, trajectories, graph: KnowledgeGraph) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for t in trajectories:
            fh.write(json.dumps(t.to_dict(graph)) + "\n")


def load_trajectories(path, graph: KnowledgeGraph) -> list[Trajectory]:
    with open(path, encoding="utf-8") as fh:
        return [Trajectory.from_dict(json.loads(line), graph) for line in fh if line.strip()]
