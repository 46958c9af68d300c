"""Template verbalization of graph walks into word-level token episodes with
entity-span masks, plus question proposal."""
from __future__ import annotations

import hashlib
import json
import re
from dataclasses import dataclass, field
from typing import Optional, Sequence

import yaml

from .errors import ArgumentError, ConfigurationError, TemplateMissError
from .graph import KnowledgeGraph
from .walk import Trajectory

BOS, EOS, UNK = "<BOS>", "<EOS>", "<UNK>"
SPECIALS = (BOS, EOS, UNK)
SUBJ, OBJ = "<SUBJ>", "<OBJ>"
# Prefix used to nest a question inside the next hop's question.
NEST_WORDS = ("the", "answer", "to")

_WORD = re.compile(r"<SUBJ>|<OBJ>|\w+|[^\w\s]")


def tokenize(text: str) -> list[str]:
    """Word-level split: runs of word characters, or single punctuation marks."""
    return _WORD.findall(text)


@dataclass(frozen=True)
class Vocabulary:
    tokens: tuple[str, ...]
    token_of: dict = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        mapping = {}
        for i, tok in enumerate(self.tokens):
            if tok in mapping:
                raise ArgumentError(f"duplicate vocabulary token {tok!r}")
            mapping[tok] = i
        for s in SPECIALS:
            if s not in mapping:
                raise ArgumentError(f"vocabulary lacks special token {s}")
        object.__setattr__(self, "token_of", mapping)

    def __len__(self):
        return len(self.tokens)

    @property
    def bos(self) -> int:
        return self.token_of[BOS]

    @property
    def eos(self) -> int:
        return self.token_of[EOS]

    @property
    def unk(self) -> int:
        return self.token_of[UNK]

    def encode(self, words: Sequence[str]) -> tuple[int, ...]:
        unk = self.unk
        return tuple(self.token_of.get(w, unk) for w in words)

    def decode(self, ids: Sequence[int]) -> list[str]:
        return [self.tokens[i] for i in ids]

    def hash(self) -> str:
        return hashlib.sha256(json.dumps(list(self.tokens)).encode()).hexdigest()

    def to_json(self) -> str:
        return json.dumps({"tokens": list(self.tokens)})

    @classmethod
    def from_json(cls, text: str) -> "Vocabulary":
        return cls(tuple(json.loads(text)["tokens"]))


@dataclass(frozen=True)
class Template:
    statement: str
    question: str

    def __post_init__(self):
        st = tokenize(self.statement)
        if st.count(SUBJ) != 1 or st.count(OBJ) != 1:
            raise ArgumentError(f"statement needs one {SUBJ} and one {OBJ}: {self.statement!r}")
        i, j = sorted((st.index(SUBJ), st.index(OBJ)))
        if j - i < 2:
            # Adjacent slots would merge into one masked span.
            raise ArgumentError(f"statement slots must be separated by text: {self.statement!r}")
        qt = tokenize(self.question)
        if qt.count(SUBJ) != 1 or OBJ in qt:
            raise ArgumentError(f"question needs exactly one {SUBJ} and no {OBJ}: {self.question!r}")

    def words(self) -> list[str]:
        return [w for w in tokenize(self.statement) + tokenize(self.question) if w not in (SUBJ, OBJ)]


class TemplateSet(dict):
    """Mapping relation id -> :class:`Template`."""

    def for_relation(self, relation_id: str) -> Template:
        try:
            return self[relation_id]
        except KeyError:
            raise TemplateMissError(relation_id) from None

    @classmethod
    def from_dict(cls, raw: dict) -> "TemplateSet":
        return cls({k: Template(v["statement"], v["question"]) for k, v in raw.items()})

    def to_dict(self) -> dict:
        return {k: {"statement": t.statement, "question": t.question} for k, t in self.items()}

    @classmethod
    def load(cls, path) -> "TemplateSet":
        # JSON files parse as YAML too
        with open(path, encoding="utf-8") as fh:
            raw = yaml.safe_load(fh)
        if not isinstance(raw, dict):
            raise ConfigurationError(f"template file {path} must hold a mapping")
        return cls.from_dict(raw)

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            json.dump(self.to_dict(), fh, indent=2, sort_keys=True)
            fh.write("\n")

    @classmethod
    def default_for(cls, graph: KnowledgeGraph) -> "TemplateSet":
        """Generic templates that use the relation label as the verb phrase."""
        return cls(
            {
                rid: Template(f"<SUBJ> {label} <OBJ> .", f"what does <SUBJ> {label} ?")
                for rid, label in zip(graph.relation_ids, graph.relation_labels)
            }
        )


def build_vocabulary(graph: KnowledgeGraph, templates: TemplateSet) -> Vocabulary:
    """Specials, then template words, nesting words and entity-label words in
    first-seen order."""
    seen = dict.fromkeys(SPECIALS)
    ordered_relations = [r for r in graph.relation_ids if r in templates]
    ordered_relations += [r for r in templates if r not in graph.relation_index]
    for rid in ordered_relations:
        seen.update(dict.fromkeys(templates[rid].words()))
    seen.update(dict.fromkeys(NEST_WORDS))
    for label in graph.entity_labels:
        seen.update(dict.fromkeys(tokenize(label)))
    return Vocabulary(tuple(seen))


@dataclass(frozen=True)
class Step:
    tokens: tuple[int, ...]
    mask: tuple[bool, ...]

    def __post_init__(self):
        if not self.tokens:
            raise ArgumentError("a step needs at least one token")
        if len(self.mask) != len(self.tokens):
            raise ArgumentError("mask length differs from token length")

    def entity_spans(self) -> list[tuple[int, ...]]:
        spans, cur = [], []
        for tok, m in zip(self.tokens, self.mask):
            if m:
                cur.append(tok)
            elif cur:
                spans.append(tuple(cur))
                cur = []
        if cur:
            spans.append(tuple(cur))
        return spans


@dataclass(frozen=True)
class VerbalizedEpisode:
    question: tuple[int, ...]
    steps: tuple[Step, ...]
    answer: str
    source: Optional[Trajectory] = field(default=None, compare=False)

    @property
    def num_steps(self) -> int:
        return len(self.steps)

    def states(self):
        """Yield ``(state, token, masked)`` for every step token, where the
        state is the question followed by all earlier tokens."""
        state = list(self.question)
        for step in self.steps:
            for tok, m in zip(step.tokens, step.mask):
                yield tuple(state), tok, m
                state.append(tok)

    def to_dict(self) -> dict:
        return {
            "q": list(self.question),
            "steps": [{"t": list(s.tokens), "mask": list(s.mask)} for s in self.steps],
            "answer": self.answer,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "VerbalizedEpisode":
        steps = tuple(Step(tuple(s["t"]), tuple(bool(m) for m in s["mask"])) for s in d["steps"])
        return cls(tuple(d["q"]), steps, d["answer"])


def _label_ids(vocab: Vocabulary, label: str) -> tuple[int, ...]:
    return vocab.encode(tokenize(label))


def verbalize(
    trajectory: Trajectory,
    graph: KnowledgeGraph,
    templates: TemplateSet,
    vocab: Vocabulary,
) -> VerbalizedEpisode:
    """One step per hop; the mask marks the subject and object label tokens.

    The returned episode carries no question; see :func:`episode_for`.
    """
    steps = []
    for h, r, t in trajectory.triples():
        tmpl = templates.for_relation(graph.relation_ids[r])
        toks, mask = [], []
        for w in tokenize(tmpl.statement):
            if w in (SUBJ, OBJ):
                ids = _label_ids(vocab, graph.entity_labels[h if w == SUBJ else t])
                toks.extend(ids)
                mask.extend([True] * len(ids))
            else:
                toks.append(vocab.encode([w])[0])
                mask.append(False)
        steps.append(Step(tuple(toks), tuple(mask)))
    answer = graph.entity_ids[trajectory.entities[-1]]
    return VerbalizedEpisode((), tuple(steps), answer, trajectory)


def question_words(trajectory: Trajectory, graph: KnowledgeGraph, templates: TemplateSet) -> list[str]:
    if trajectory.hop_count < 1:
        raise ArgumentError("a question needs at least one hop")
    subject = tokenize(graph.entity_labels[trajectory.entities[0]])
    words: list[str] = []
    for r in trajectory.relations:
        tmpl = templates.for_relation(graph.relation_ids[r])
        words = []
        for w in tokenize(tmpl.question):
            words.extend(subject if w == SUBJ else [w])
        inner = words[:-1] if words and words[-1] == "?" else words
        subject = list(NEST_WORDS) + inner
    return words


def propose_question(
    trajectory: Trajectory,
    graph: KnowledgeGraph,
    templates: TemplateSet,
    vocab: Vocabulary,
) -> tuple[int, ...]:
    """Question naming ``e0`` and every relation phrase along the walk, nested
    hop by hop, whose intended answer is the final entity."""
    return vocab.encode(question_words(trajectory, graph, templates))


def episode_for(trajectory, graph, templates, vocab) -> VerbalizedEpisode:
    ep = verbalize(trajectory, graph, templates, vocab)
    q = propose_question(trajectory, graph, templates, vocab)
    return VerbalizedEpisode(q, ep.steps, ep.answer, trajectory)


def check_vocabulary(vocab: Vocabulary, other: Vocabulary) -> None:
    if vocab.tokens != other.tokens:
        raise ConfigurationError("vocabulary mismatch")


def save_episodes(path, episodes) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for ep in episodes:
            fh.write(json.dumps(ep.to_dict()) + "\n")


def load_episodes(path) -> list[VerbalizedEpisode]:
    with open(path, encoding="utf-8") as fh:
        return [VerbalizedEpisode.from_dict(json.loads(line)) for line in fh if line.strip()]
