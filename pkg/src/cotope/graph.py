"""Directed labeled knowledge graphs: storage, TSV I/O, synthetic generation and
frequency statistics over walk sets."""
from __future__ import annotations

import json
import math
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import ArgumentError, GraphIntegrityError, TripleParseError


@dataclass(frozen=True)
class KnowledgeGraph:
    """Immutable graph with ids interned to dense indices.

    ``edges`` holds ``(head, relation, tail)`` index triples, sorted and
    duplicate-free. ``out_index[e]`` lists ``(relation, tail)`` pairs for head ``e``.
    """

    entity_ids: tuple[str, ...]
    entity_labels: tuple[str, ...]
    relation_ids: tuple[str, ...]
    relation_labels: tuple[str, ...]
    edges: tuple[tuple[int, int, int], ...]
    out_index: tuple[tuple[tuple[int, int], ...], ...] = field(
        init=False, repr=False, compare=False
    )
    entity_index: dict = field(init=False, repr=False, compare=False)
    relation_index: dict = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        ne, nr = len(self.entity_ids), len(self.relation_ids)
        if len(self.entity_labels) != ne or len(self.relation_labels) != nr:
            raise GraphIntegrityError("id and label lists differ in length")
        for kind, ids, labels in (
            ("entity", self.entity_ids, self.entity_labels),
            ("relation", self.relation_ids, self.relation_labels),
        ):
            dup_ids = [k for k, c in Counter(ids).items() if c > 1]
            if dup_ids:
                raise GraphIntegrityError(f"duplicate {kind} ids", sorted(dup_ids))
            if any(not lab for lab in labels):
                raise GraphIntegrityError(f"empty {kind} label")
            dup_labels = [k for k, c in Counter(labels).items() if c > 1]
            if dup_labels:
                raise GraphIntegrityError(f"duplicate {kind} labels", sorted(dup_labels))
        edges = tuple(sorted(set(tuple(int(x) for x in e) for e in self.edges)))
        bad = [e for e in edges if not (0 <= e[0] < ne and 0 <= e[1] < nr and 0 <= e[2] < ne)]
        if bad:
            raise GraphIntegrityError("edge endpoints out of range", bad)
        out: list[list[tuple[int, int]]] = [[] for _ in range(ne)]
        for h, r, t in edges:
            out[h].append((r, t))
        object.__setattr__(self, "edges", edges)
        object.__setattr__(self, "out_index", tuple(tuple(o) for o in out))
        object.__setattr__(self, "entity_index", {k: i for i, k in enumerate(self.entity_ids)})
        object.__setattr__(self, "relation_index", {k: i for i, k in enumerate(self.relation_ids)})

    @property
    def num_entities(self) -> int:
        return len(self.entity_ids)

    @property
    def num_relations(self) -> int:
        return len(self.relation_ids)

    def out_degree(self, entity: int) -> int:
        return len(self.out_index[entity])

    def has_edge(self, head: int, relation: int, tail: int) -> bool:
        return (relation, tail) in self.out_index[head]

    def non_sinks(self) -> list[int]:
        return [e for e in range(self.num_entities) if self.out_index[e]]

    def resolve_entity(self, entity) -> int:
        if isinstance(entity, (int, np.integer)):
            if not 0 <= entity < self.num_entities:
                raise GraphIntegrityError("unknown entity index", [int(entity)])
            return int(entity)
        try:
            return self.entity_index[entity]
        except KeyError:
            raise GraphIntegrityError("unknown entity id", [entity]) from None


@dataclass
class LoadReport:
    num_entities: int = 0
    num_relations: int = 0
    num_edges: int = 0
    duplicate_edges: int = 0
    relabeled: int = 0
    dropped_edges: int = 0
    unresolved_ids: list = field(default_factory=list)

    def to_json(self) -> str:
        return json.dumps(self.__dict__, sort_keys=True)


def _read_rows(path: Path):
    with open(path, encoding="utf-8", newline="") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.rstrip("\n").rstrip("\r")
            if not line.strip():
                continue
            yield lineno, line.split("\t")


def _read_labels(path: Path, report: LoadReport):
    ids: list[str] = []
    labels: list[str] = []
    seen: set[str] = set()
    for lineno, cols in _read_rows(path):
        if len(cols) < 2:
            raise TripleParseError(path, lineno, "expected id<TAB>label[<TAB>alias...]")
        key, label = cols[0].strip(), cols[1].strip()
        if not key or not label:
            raise TripleParseError(path, lineno, "empty id or label")
        if key in seen:
            continue
        seen.add(key)
        ids.append(key)
        labels.append(label)
    # Real label files repeat surface forms; suffix the id so labels stay unique.
    counts = Counter(labels)
    for i, label in enumerate(labels):
        if counts[label] > 1:
            labels[i] = f"{label} {ids[i]}"
            report.relabeled += 1
    return ids, labels


def load_triples(
    triples_path,
    entity_labels_path,
    relation_labels_path,
    strict: bool = True,
) -> tuple[KnowledgeGraph, LoadReport]:
    """Load a Wikidata5M-style TSV triple file plus its two label files.

    Label files hold ``id<TAB>label[<TAB>alias...]``; the first label wins.
    With ``strict`` an edge naming an undeclared id raises
    :class:`GraphIntegrityError`; otherwise such edges are dropped and listed
    in the report.
    """
    triples_path = Path(triples_path)
    report = LoadReport()
    ent_ids, ent_labels = _read_labels(Path(entity_labels_path), report)
    rel_ids, rel_labels = _read_labels(Path(relation_labels_path), report)
    ent_index = {k: i for i, k in enumerate(ent_ids)}
    rel_index = {k: i for i, k in enumerate(rel_ids)}

    edges: set[tuple[int, int, int]] = set()
    unresolved: set[str] = set()
    for lineno, cols in _read_rows(triples_path):
        if len(cols) != 3:
            raise TripleParseError(
                triples_path, lineno, f"expected 3 tab-separated fields, got {len(cols)}"
            )
        h, r, t = (c.strip() for c in cols)
        missing = [x for x, idx in ((h, ent_index), (r, rel_index), (t, ent_index)) if x not in idx]
        if missing:
            unresolved.update(missing)
            report.dropped_edges += 1
            continue
        edge = (ent_index[h], rel_index[r], ent_index[t])
        if edge in edges:
            report.duplicate_edges += 1
        edges.add(edge)

    report.unresolved_ids = sorted(unresolved)
    if unresolved and strict:
        raise GraphIntegrityError("triples reference undeclared ids", report.unresolved_ids)
    graph = KnowledgeGraph(tuple(ent_ids), tuple(ent_labels), tuple(rel_ids), tuple(rel_labels), tuple(edges))
    report.num_entities = graph.num_entities
    report.num_relations = graph.num_relations
    report.num_edges = len(graph.edges)
    return graph, report


def save_triples(graph: KnowledgeGraph, triples_path, entity_labels_path, relation_labels_path) -> None:
    with open(triples_path, "w", encoding="utf-8", newline="\n") as fh:
        for h, r, t in graph.edges:
            fh.write(f"{graph.entity_ids[h]}\t{graph.relation_ids[r]}\t{graph.entity_ids[t]}\n")
    for path, ids, labels in (
        (entity_labels_path, graph.entity_ids, graph.entity_labels),
        (relation_labels_path, graph.relation_ids, graph.relation_labels),
    ):
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            for key, label in zip(ids, labels):
                fh.write(f"{key}\t{label}\n")


def relation_weights(num_relations: int, skew: float) -> np.ndarray:
    """Zipf-like weights ``i ** -skew`` over relation ranks 1..R, normalized."""
    w = np.arange(1, num_relations + 1, dtype=float) ** (-float(skew))
    return w / w.sum()


def generate_synthetic(
    num_entities: int,
    num_relations: int,
    edges_per_entity: int,
    relation_skew: float = 0.0,
    seed: int = 0,
) -> KnowledgeGraph:
    """Random graph where every entity has exactly ``edges_per_entity`` out-edges.

    Relations are drawn with Zipf-like skew, tails uniformly among the other
    entities (a lone entity gets self-loops).
    """
    if num_entities < 1 or num_relations < 1 or edges_per_entity < 1:
        raise ArgumentError("num_entities, num_relations and edges_per_entity must be positive")
    if relation_skew < 0:
        raise ArgumentError("relation_skew must be >= 0")
    n_tails = max(num_entities - 1, 1)
    if edges_per_entity > n_tails * num_relations:
        raise ArgumentError("edges_per_entity exceeds the number of distinct possible edges")

    rng = np.random.default_rng(seed)
    weights = relation_weights(num_relations, relation_skew)
    edges: set[tuple[int, int, int]] = set()
    for h in range(num_entities):
        mine: set[tuple[int, int]] = set()
        while len(mine) < edges_per_entity:
            r = int(rng.choice(num_relations, p=weights))
            if num_entities == 1:
                t = 0
            else:
                t = int(rng.integers(num_entities - 1))
                t += t >= h
            mine.add((r, t))
        edges.update((h, r, t) for r, t in mine)
    return KnowledgeGraph(
        tuple(f"E{i}" for i in range(num_entities)),
        tuple(f"ent{i}" for i in range(num_entities)),
        tuple(f"R{j}" for j in range(num_relations)),
        tuple(f"rel{j}" for j in range(num_relations)),
        tuple(edges),
    )


def chain_graph(labels: Sequence[str] = ("a", "b", "c"), relation_label: str = "to") -> KnowledgeGraph:
    """Path graph ``labels[0] -> labels[1] -> ...`` over a single relation."""
    n = len(labels)
    return KnowledgeGraph(
        tuple(f"Q{i + 1}" for i in range(n)),
        tuple(labels),
        ("P1",),
        (relation_label,),
        tuple((i, 0, i + 1) for i in range(n - 1)),
    )


@dataclass
class GraphStats:
    relation_frequencies: dict
    entity_frequencies: dict
    top_decile_share_relations: float
    top_decile_share_entities: float

    def to_dict(self) -> dict:
        return {
            "relation_frequencies": self.relation_frequencies,
            "entity_frequencies": self.entity_frequencies,
            "top_decile_share_relations": self.top_decile_share_relations,
            "top_decile_share_entities": self.top_decile_share_entities,
        }


def top_decile_share(counts: Iterable[int], namespace_size: int) -> float:
    """Fraction of all occurrences held by the ``ceil(namespace_size / 10)``
    most frequent ids. Zero when nothing was counted."""
    counts = sorted(counts, reverse=True)
    total = sum(counts)
    if total == 0 or namespace_size == 0:
        return 0.0
    k = max(1, math.ceil(namespace_size / 10))
    return sum(counts[:k]) / total


def trajectory_stats(graph: KnowledgeGraph, trajectories) -> GraphStats:
    rel = Counter()
    ent = Counter()
    bad = []
    for traj in trajectories:
        for e in traj.entities:
            if not 0 <= e < graph.num_entities:
                bad.append(("entity", e))
            ent[e] += 1
        for r in traj.relations:
            if not 0 <= r < graph.num_relations:
                bad.append(("relation", r))
            rel[r] += 1
    if bad:
        raise GraphIntegrityError("trajectory ids do not resolve in graph", bad)
    return GraphStats(
        relation_frequencies={graph.relation_ids[r]: c for r, c in sorted(rel.items())},
        entity_frequencies={graph.entity_ids[e]: c for e, c in sorted(ent.items())},
        top_decile_share_relations=top_decile_share(rel.values(), graph.num_relations),
        top_decile_share_entities=top_decile_share(ent.values(), graph.num_entities),
    )


def edge_relation_share(graph: KnowledgeGraph) -> float:
    """Top-decile relation share measured over the graph's own edge list."""
    counts = Counter(r for _, r, _ in graph.edges)
    return top_decile_share(counts.values(), graph.num_relations)
