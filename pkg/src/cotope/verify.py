"""Independent oracles for the estimator: exact enumeration of the behavior
distribution, Monte Carlo coverage of the confidence radius, and agreement of
the entity-only and full objectives.

Throughout, the true value of a target policy is the per-state expected
reward of the target's next token, averaged with the same step and episode
normalization as the estimator, over the states the behavior distribution
visits.
"""
from __future__ import annotations

import itertools
import math
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import _kernels
from .episodes import LoggedDataset, Skeleton, sample_behavior
from .errors import ArgumentError, EnumerationBoundError
from .estimator import EstimatorConfig, confidence_radius, kg_ips_estimate, variance_proxy_bound
from .graph import KnowledgeGraph, chain_graph
from .optimizer import OptimizerConfig, optimize_target
from .policy import TokenPolicy
from .preference import AnswerOracle, score_trajectories, train_preference
from .verbal import TemplateSet, Vocabulary, build_vocabulary, episode_for, tokenize
from .walk import Trajectory

ENUMERATION_BOUND = 10**6


@dataclass
class Instance:
    """Everything needed to generate behavior episodes and score a target."""

    name: str
    vocab: Vocabulary
    skeletons: list
    skeleton_probs: np.ndarray
    target: TokenPolicy
    mu: TokenPolicy
    base: TokenPolicy
    entity_tokens: frozenset = frozenset()
    description: str = ""

    def __post_init__(self):
        self.skeleton_probs = np.asarray(self.skeleton_probs, dtype=float)
        if len(self.skeletons) != len(self.skeleton_probs) or not self.skeletons:
            raise ArgumentError("need one probability per skeleton")
        if abs(self.skeleton_probs.sum() - 1.0) > 1e-12:
            raise ArgumentError("skeleton probabilities must sum to 1")

    def with_target(self, target: TokenPolicy, name: Optional[str] = None) -> "Instance":
        return Instance(
            name or self.name, self.vocab, self.skeletons, self.skeleton_probs,
            target, self.mu, self.base, self.entity_tokens, self.description,
        )

    def episode_space_size(self) -> int:
        V = len(self.vocab)
        return sum(V ** s.length for s in self.skeletons)

    def sample(self, n: int, rng) -> LoggedDataset:
        rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
        idx = rng.choice(len(self.skeletons), size=n, p=self.skeleton_probs)
        chosen = [self.skeletons[i] for i in idx]
        u = rng.random(sum(s.length for s in chosen))
        return sample_behavior(chosen, self.mu, self.base, u)


def walk_distribution(graph: KnowledgeGraph, hop_range) -> list:
    """Exact output distribution of the walk-set sampler: uniform non-sink
    start, uniform hop count, uniform out-edges, conditioned on completion."""
    lo, hi = hop_range
    starts = graph.non_sinks()
    out = []

    def extend(path, prob, remaining):
        if remaining == 0:
            out.append((Trajectory(tuple(path)), prob))
            return
        options = graph.out_index[path[-1]]
        for r, t in options:
            extend(path + [r, t], prob / len(options), remaining - 1)

    for s in starts:
        for h in range(lo, hi + 1):
            extend([s], 1.0 / (len(starts) * (hi - lo + 1)), h)
    total = math.fsum(p for _, p in out)
    if total == 0:
        raise ArgumentError("no complete walk exists for this hop range")
    return [(t, p / total) for t, p in out]


def instance_from_graph(name, graph, templates, vocab, target, mu, base, hop_range, description="") -> Instance:
    dist = walk_distribution(graph, hop_range)
    skeletons = [Skeleton.from_episode(episode_for(t, graph, templates, vocab)) for t, _ in dist]
    ent = frozenset(t for label in graph.entity_labels for t in vocab.encode(tokenize(label)))
    return Instance(name, vocab, skeletons, [p for _, p in dist], target, mu, base, ent, description)


# exact enumeration ---------------------------------------------------------


@dataclass
class EnumerationReport:
    instance: str
    expected_estimate: float
    true_value: float
    gap: float
    episode_space_size: int
    behavior_mass: float
    target_mass: float
    target_rollout_value: float
    max_ratio: float

    def to_dict(self) -> dict:
        return asdict(self)


def _codes_matrix(question, tokens: np.ndarray, k: int, vocab: Vocabulary) -> np.ndarray:
    """Context codes of every position for a batch of token rows."""
    C, L = tokens.shape
    V = len(vocab)
    prefix = np.array([vocab.bos] * k + list(question), dtype=np.int64)
    full = np.concatenate([np.broadcast_to(prefix, (C, len(prefix))), tokens], axis=1)
    codes = np.zeros((C, L), dtype=np.int64)
    for i in range(k):
        col0 = len(prefix) - k + i
        codes = codes * V + full[:, col0:col0 + L]
    return codes


def _row_probs(policy: TokenPolicy, codes, tokens):
    rows = policy.rows_for_codes(codes.ravel() % policy.key_mod).reshape(codes.shape)
    return policy.prob_table[rows, tokens], rows


def _nested(values: np.ndarray, step_lengths) -> np.ndarray:
    """Mean over steps of per-step means, for a (C, L) batch."""
    means, a = [], 0
    for n in step_lengths:
        means.append(values[:, a:a + n].mean(axis=1))
        a += n
    return np.mean(means, axis=0)


def enumerate_expectation(
    instance: Instance,
    config: EstimatorConfig = EstimatorConfig(),
    bound: int = ENUMERATION_BOUND,
) -> EnumerationReport:
    """Exact behavior expectation of the estimate versus the exact true value.

    Every token sequence compatible with each skeleton is enumerated. The
    estimate side runs the production estimator on the enumerated episodes;
    the value side only touches the target and base probability tables.
    """
    size = instance.episode_space_size()
    if size > bound:
        raise EnumerationBoundError(f"{size} episodes exceed the enumeration bound {bound}")
    V = len(instance.vocab)
    tgt, mu, base = instance.target, instance.mu, instance.base
    reward_table = np.maximum(base.log_prob_table, config.reward_floor)

    est_parts, val_parts, roll_parts, b_mass, t_mass = [], [], [], [], []
    max_ratio = 0.0
    for sk, sk_p in zip(instance.skeletons, instance.skeleton_probs):
        L = sk.length
        tokens = np.array(list(itertools.product(range(V), repeat=L)), dtype=np.int64).reshape(-1, L)
        mask = np.array(sk.mask, dtype=bool)
        k = max(tgt.k, mu.k, base.k)
        codes = _codes_matrix(sk.question, tokens, k, instance.vocab)
        p_mu, _ = _row_probs(mu, codes, tokens)
        p_base, base_rows = _row_probs(base, codes, tokens)
        p_tgt, tgt_rows = _row_probs(tgt, codes, tokens)
        lam = np.where(mask[None, :], p_mu, p_base)
        p_behavior = lam.prod(axis=1)
        max_ratio = max(max_ratio, float((p_tgt / lam).max()))

        # estimator path
        C = len(tokens)
        ds = LoggedDataset(
            instance.vocab, [sk.question] * C, [sk.answer] * C,
            tokens.ravel(), np.tile(mask, C),
            np.concatenate([[0], np.cumsum(np.tile(sk.step_lengths, C))]),
            np.arange(0, C * len(sk.step_lengths) + 1, len(sk.step_lengths)),
            lam.ravel(), base.log_prob_table[base_rows, tokens].ravel(),
        )
        for kk in {tgt.k, mu.k, base.k}:
            ds.seed_codes(kk, (codes % (V ** kk)).ravel())
        terms = kg_ips_estimate(ds, tgt, config=EstimatorConfig(config.delta, None, config.reward_floor, False)).per_episode_terms
        est_parts.append(sk_p * math.fsum(p_behavior * terms))

        # value path: exact next-token expectation at each visited state
        per_state = np.einsum("cjv,cjv->cj", tgt.prob_table[tgt_rows], reward_table[base_rows])
        val_parts.append(sk_p * math.fsum(p_behavior * _nested(per_state, sk.step_lengths)))

        p_rollout = p_tgt.prod(axis=1)
        own_reward = reward_table[base_rows, tokens]
        roll_parts.append(sk_p * math.fsum(p_rollout * _nested(own_reward, sk.step_lengths)))
        b_mass.append(sk_p * math.fsum(p_behavior))
        t_mass.append(sk_p * math.fsum(p_rollout))

    expected = math.fsum(est_parts)
    true_value = math.fsum(val_parts)
    return EnumerationReport(
        instance=instance.name,
        expected_estimate=expected,
        true_value=true_value,
        gap=abs(expected - true_value),
        episode_space_size=size,
        behavior_mass=math.fsum(b_mass),
        target_mass=math.fsum(t_mass),
        target_rollout_value=math.fsum(roll_parts),
        max_ratio=max_ratio,
    )


def reference_value(instance: Instance, samples: int = 10**7, seed: int = 0, config=EstimatorConfig(), chunk: int = 200_000) -> float:
    """Monte Carlo true value: behavior states, exact target expectation per state."""
    tgt, base = instance.target, instance.base
    V = len(instance.vocab)
    k = max(tgt.k, instance.mu.k, base.k)
    all_codes = np.arange(V ** k, dtype=np.int64)
    reward_table = np.maximum(base.log_prob_table, config.reward_floor)
    by_code = np.einsum(
        "cv,cv->c",
        tgt.prob_table[tgt.rows_for_codes(all_codes % tgt.key_mod)],
        reward_table[base.rows_for_codes(all_codes % base.key_mod)],
    )
    rng = np.random.default_rng([seed, 7])
    parts, done = [], 0
    while done < samples:
        n = min(chunk, samples - done)
        ds = instance.sample(n, rng)
        vals = by_code[ds.codes(k)]
        parts.append(_kernels.kahan_sum(_kernels.nested_means(vals, ds.step_offsets, ds.episode_offsets)))
        done += n
    return math.fsum(parts) / samples


def true_value(instance: Instance, config=EstimatorConfig(), reference_samples: int = 10**7, seed: int = 0):
    """``(value, route)`` where route is ``"enumeration"`` or ``"monte_carlo"``."""
    if instance.episode_space_size() <= ENUMERATION_BOUND:
        return enumerate_expectation(instance, config).true_value, "enumeration"
    return reference_value(instance, reference_samples, seed, config), "monte_carlo"


@dataclass
class MonteCarloCheck:
    samples: int
    mean: float
    standard_error: float
    true_value: float
    z: float

    @property
    def passed(self) -> bool:
        return abs(self.z) < 3.0


def monte_carlo_check(instance: Instance, samples: int = 10**5, seed: int = 0, config=EstimatorConfig(), value=None) -> MonteCarloCheck:
    if value is None:
        value, _ = true_value(instance, config, seed=seed)
    ds = instance.sample(samples, np.random.default_rng([seed, 11]))
    est = kg_ips_estimate(ds, instance.target, config=EstimatorConfig(config.delta, None, config.reward_floor, False))
    se = math.sqrt(est.empirical_variance / samples)
    return MonteCarloCheck(samples, est.value, se, value, (est.value - value) / se if se > 0 else 0.0)


# coverage -----------------------------------------------------------------


@dataclass
class CoverageReport:
    instance: str
    replications: int
    n: int
    delta: float
    true_value: float
    route: str
    fraction_covered: float
    mean_estimate: float
    variance_estimate: float
    mean_M: float
    max_M: float
    mean_radius: float
    proxy_bound_at_mean_M: float
    floor_binding: bool
    mean_term_scale: float = float("nan")
    fraction_covered_term_scale: float = float("nan")
    variance_replications: int = 0
    variance_n: float = float("nan")
    variance_2n: float = float("nan")
    variance_ratio: float = float("nan")

    def to_dict(self) -> dict:
        return asdict(self)


def coverage_experiment(
    instance: Instance,
    replications: int = 1000,
    n: int = 500,
    delta: float = 0.05,
    seed: int = 0,
    variance_replications: int = 500,
    config: Optional[EstimatorConfig] = None,
    reference_samples: int = 10**7,
) -> CoverageReport:
    """Fraction of replications whose estimate lands within the confidence
    radius of the true value, plus the ``Var[2n] / Var[n]`` ratio."""
    if replications < 1 or n < 1:
        raise ArgumentError("replications and n must be positive")
    config = config or EstimatorConfig(delta=delta, validate=False)
    config = EstimatorConfig(delta, config.weight_cap, config.reward_floor, False)
    v_true, route = true_value(instance, config, reference_samples, seed)

    estimates, Ms, radii, covered, floor = [], [], [], 0, False
    scales, covered_scale = [], 0
    for r in range(replications):
        est = kg_ips_estimate(instance.sample(n, np.random.default_rng([seed, 0, r])), instance.target, config=config)
        estimates.append(est.value)
        Ms.append(est.M)
        radii.append(est.ci_radius)
        covered += abs(est.value - v_true) <= est.ci_radius
        floor |= est.floor_binding
        # Hoeffding scale of the episode terms themselves; differs from M
        # whenever rewards leave [-1, 0]
        scale = float(np.max(np.abs(est.per_episode_terms)))
        scales.append(scale)
        covered_scale += abs(est.value - v_true) <= confidence_radius(max(scale, 1e-300), n, delta)
    mean_M = float(np.mean(Ms))
    report = CoverageReport(
        instance=instance.name,
        replications=replications,
        n=n,
        delta=delta,
        true_value=v_true,
        route=route,
        fraction_covered=covered / replications,
        mean_estimate=float(np.mean(estimates)),
        variance_estimate=float(np.var(estimates, ddof=1)) if replications > 1 else 0.0,
        mean_M=mean_M,
        max_M=float(np.max(Ms)),
        mean_radius=float(np.mean(radii)),
        proxy_bound_at_mean_M=variance_proxy_bound(mean_M, n),
        floor_binding=floor,
        mean_term_scale=float(np.mean(scales)),
        fraction_covered_term_scale=covered_scale / replications,
    )
    if variance_replications > 1:
        at_n, at_2n = [], []
        for r in range(variance_replications):
            at_n.append(kg_ips_estimate(instance.sample(n, np.random.default_rng([seed, 1, r])), instance.target, config=config).value)
            at_2n.append(kg_ips_estimate(instance.sample(2 * n, np.random.default_rng([seed, 2, r])), instance.target, config=config).value)
        report.variance_replications = variance_replications
        report.variance_n = float(np.var(at_n, ddof=1))
        report.variance_2n = float(np.var(at_2n, ddof=1))
        report.variance_ratio = report.variance_2n / report.variance_n
    return report


# entity-only versus full objective ------------------------------------------


@dataclass
class ConsistencyReport:
    instance: str
    contexts: list
    argmax_full: list
    argmax_kg: list
    value_full: float
    value_kg_objective_final: float
    passed: bool = field(default=False)

    def to_dict(self) -> dict:
        return asdict(self)


def entity_argmax(policy: TokenPolicy, codes: Sequence[int], entity_tokens) -> list:
    ent = np.array(sorted(entity_tokens), dtype=np.int64)
    rows = policy.rows_for_codes(np.asarray(codes, dtype=np.int64) % policy.key_mod)
    return [int(ent[np.argmax(policy.table[r, ent])]) for r in rows]


def decomposition_consistency(
    instance: Instance,
    n: int = 2000,
    seed: int = 0,
    optimizer_config: OptimizerConfig = OptimizerConfig(learning_rate=0.5, steps=200),
    config: EstimatorConfig = EstimatorConfig(validate=False),
) -> ConsistencyReport:
    """Optimize the full objective and the entity-only objective from the same
    start and compare the preferred entity token in every logged entity context."""
    if not instance.entity_tokens:
        raise ArgumentError("instance declares no entity tokens")
    ds = instance.sample(n, np.random.default_rng([seed, 3]))
    init = instance.target
    full = optimize_target(ds, init, instance.mu, instance.base, optimizer_config, config)
    kg_cfg = OptimizerConfig(**{**asdict(optimizer_config), "objective": "kg"})
    kg = optimize_target(ds, init, instance.mu, instance.base, kg_cfg, config)
    codes = sorted(set(ds.codes(init.k)[ds.mask].tolist()))
    a_full = entity_argmax(full.final, codes, instance.entity_tokens)
    a_kg = entity_argmax(kg.final, codes, instance.entity_tokens)
    return ConsistencyReport(
        instance.name, codes, a_full, a_kg, full.final_value, kg.final_value, a_full == a_kg
    )


# bundled toy instances ------------------------------------------------------

TOY_TEMPLATES = {"P1": {"statement": "<SUBJ> to <OBJ> .", "question": "where does <SUBJ> go ?"}}


def toy_chain_parts(k: int = 1, smoothing: float = 1.0, noise: float = 0.3, k_q: int = 10,
                    num_walks: int = 200, hop_range=(1, 2), seed: int = 0,
                    learning_rate: float = 0.05, epochs: int = 10):
    """Graph, templates, vocabulary, base and preference policies for the
    3-entity chain, built the same way as the end-to-end pipeline."""
    from .walk import sample_walk_set

    graph = chain_graph()
    templates = TemplateSet.from_dict(TOY_TEMPLATES)
    vocab = build_vocabulary(graph, templates)
    walks = sample_walk_set(graph, num_walks, hop_range, seed)
    rset = score_trajectories(walks, graph, templates, vocab, AnswerOracle(graph, vocab, noise, seed), k_q)
    base = TokenPolicy.from_counts(vocab, rset.episodes, k=k, smoothing=smoothing, role="base")
    mu, _ = train_preference(base.clone_as("preference"), rset, learning_rate, epochs)
    return graph, templates, vocab, base, mu


def shift_entities(policy: TokenPolicy, entity_tokens, shift: float, role: str = "target") -> TokenPolicy:
    table = policy.table.copy()
    table[:, sorted(entity_tokens)] += shift
    return policy.with_table(table, role)


def builtin_instance(name: str) -> Instance:
    """Named instances: ``single-token``, ``toy-chain``, ``toy-chain-divergent``,
    ``toy-chain-k0``, ``toy-chain-random``, ``one-slot``."""
    if name == "single-token":
        vocab = Vocabulary(("<BOS>", "<EOS>", "<UNK>", "a", "b"))
        mu = TokenPolicy.random(vocab, 0, "preference", 1.0, 5)
        base = TokenPolicy.random(vocab, 0, "base", 1.0, 6)
        sk = Skeleton((3,), (1,), (True,), "a")
        return Instance(name, vocab, [sk], [1.0], mu.clone_as("target"), mu, base, frozenset({3, 4}))
    if name == "one-slot":
        return one_slot_instance()
    k = 0 if name == "toy-chain-k0" else 1
    graph, templates, vocab, base, mu = toy_chain_parts(k=k)
    ent = frozenset(t for label in graph.entity_labels for t in vocab.encode(tokenize(label)))
    if name in ("toy-chain", "toy-chain-k0"):
        target = base.clone_as("target")
    elif name == "toy-chain-divergent":
        target = shift_entities(base, ent, 3.0)
    elif name == "toy-chain-random":
        target = TokenPolicy.random(vocab, k, "target", 1.5, 17)
        mu = TokenPolicy.random(vocab, k, "preference", 1.0, 18)
        base = TokenPolicy.random(vocab, k, "base", 1.0, 19)
    else:
        raise ArgumentError(f"unknown instance {name!r}")
    return instance_from_graph(name, graph, templates, vocab, target, mu, base, (1, 1))


def one_slot_instance(k: int = 0, base_bias=(1.0, 0.5, 0.0), skew=(2.0, 1.0, 0.0), noise: float = 0.3,
                      seed: int = 0, uniform_base: bool = False) -> Instance:
    """Episodes ``h to <X> .`` with a single entity slot ``X`` over the
    candidates ``x, y, z``. ``base_bias`` ranks the candidates under the base
    policy and the preference policy adds ``skew`` on top. Random noise only
    touches non-candidate columns so the candidate ranking stays as given."""
    graph = KnowledgeGraph(
        ("H", "A", "B", "C"), ("h", "x", "y", "z"), ("P1",), ("to",),
        ((0, 0, 1), (0, 0, 2), (0, 0, 3)),
    )
    templates = TemplateSet.from_dict(TOY_TEMPLATES)
    vocab = build_vocabulary(graph, templates)
    q = vocab.encode(tokenize("where does h go ?"))
    sk = Skeleton(q, (3,), (False, True, False), "A")
    cands = [vocab.token_of[w] for w in ("x", "y", "z")]
    layout = TokenPolicy.uniform(vocab, k, "base")
    base = np.zeros_like(layout.table)
    if not uniform_base:
        rng = np.random.default_rng(seed)
        base += noise * rng.standard_normal(base.shape)
        base[:, cands] = 0.0
        base[:, vocab.token_of["to"]] += 2.0
        base[:, vocab.token_of["."]] += 2.0
        base[:, cands] += np.asarray(base_bias)
    mu = base.copy()
    mu[:, cands] += np.asarray(skew)
    base_p = layout.with_table(base, "base")
    mu_p = layout.with_table(mu, "preference")
    return Instance("one-slot", vocab, [sk], [1.0], base_p.clone_as("target"), mu_p, base_p, frozenset(cands))


# finite-difference oracle -----------------------------------------------------


def _rel_err(a, b) -> float:
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    scale = max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)
    return float(np.linalg.norm(a - b) / scale)


def _perturbed(policy: TokenPolicy, direction, h):
    return policy.with_table(policy.table + h * direction)


def gradient_checks(probes: int = 50, seed: int = 0, h: float = 1e-5) -> dict:
    """Largest relative error between each analytic gradient and central finite
    differences, over ``probes`` randomized probes per gradient.

    ``grad_log_prob`` and ``grad_prob`` are compared row-wise on random
    ``(context, token)`` pairs of random policies. The preference objective and
    the value estimate are compared along random directions in logit space on
    freshly randomized chain instances.
    """
    from .episodes import log_episodes
    from .optimizer import estimated_value, grad_value
    from .preference import PreferenceObjective
    from .walk import sample_walk_set

    rng = np.random.default_rng([seed, 99])
    graph = chain_graph(("a", "b", "c", "d"))
    templates = TemplateSet.from_dict(TOY_TEMPLATES)
    vocab = build_vocabulary(graph, templates)
    V = len(vocab)
    out = {"grad_log_prob": 0.0, "grad_prob": 0.0, "preference_objective": 0.0, "value_estimate": 0.0}

    for i in range(probes):
        pol = TokenPolicy.random(vocab, int(rng.integers(0, 3)), "target", 2.0, int(rng.integers(2**31)))
        state = tuple(int(x) for x in rng.integers(0, V, size=int(rng.integers(0, 4))))
        tok = int(rng.integers(V))
        row = pol.row_index(state)
        for name, analytic, f in (
            ("grad_log_prob", pol.grad_log_prob(state, tok), lambda p: p.log_prob(state, tok)),
            ("grad_prob", pol.grad_prob(state, tok), lambda p: p.prob(state, tok)),
        ):
            fd = np.empty(V)
            for j in range(V):
                e = np.zeros_like(pol.table)
                e[row, j] = 1.0
                fd[j] = (f(_perturbed(pol, e, h)) - f(_perturbed(pol, e, -h))) / (2 * h)
            out[name] = max(out[name], _rel_err(analytic.array[row], fd))

    walks = sample_walk_set(graph, 6, (1, 3), seed)
    oracle = AnswerOracle(graph, vocab, 0.3, seed)
    for i in range(probes):
        if i % 10 == 0:
            k = int(rng.integers(0, 2))
            mu = TokenPolicy.random(vocab, k, "preference", 1.0, int(rng.integers(2**31)))
            base = TokenPolicy.random(vocab, k, "base", 1.0, int(rng.integers(2**31)))
            target = TokenPolicy.random(vocab, k, "target", 1.0, int(rng.integers(2**31)))
            ds = log_episodes(graph, templates, vocab, mu, base, 5, (1, 3), int(rng.integers(2**31)))
            rset = score_trajectories(walks[:2] if i % 20 == 0 else walks[2:4], graph, templates, vocab, oracle)
            objective = PreferenceObjective(rset, mu)
            cfg = EstimatorConfig()
            g_v = grad_value(ds, target, mu, base, cfg).array
            g_j = objective.gradient(mu).array
        d = rng.standard_normal(target.table.shape)
        d /= np.linalg.norm(d)
        fd_v = (estimated_value(ds, _perturbed(target, d, h), cfg) - estimated_value(ds, _perturbed(target, d, -h), cfg)) / (2 * h)
        out["value_estimate"] = max(out["value_estimate"], _rel_err(np.sum(g_v * d), fd_v))
        d = rng.standard_normal(mu.table.shape)
        d /= np.linalg.norm(d)
        fd_j = (objective.value(_perturbed(mu, d, h)) - objective.value(_perturbed(mu, d, -h))) / (2 * h)
        out["preference_objective"] = max(out["preference_objective"], _rel_err(np.sum(g_j * d), fd_j))
    return out
