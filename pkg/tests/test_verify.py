from collections import Counter

import numpy as np
import pytest

from cotope.episodes import LoggedDataset
from cotope.errors import EnumerationBoundError
from cotope.estimator import EstimatorConfig
from cotope.graph import chain_graph, generate_synthetic
from cotope.optimizer import OptimizerConfig, optimize_target
from cotope.policy import TokenPolicy
from cotope.verify import (
    Instance,
    builtin_instance,
    coverage_experiment,
    decomposition_consistency,
    entity_argmax,
    enumerate_expectation,
    monte_carlo_check,
    one_slot_instance,
    reference_value,
    shift_entities,
    walk_distribution,
)
from cotope.walk import sample_walk_set


def test_single_token_gap_exactly_zero():
    rep = enumerate_expectation(builtin_instance("single-token"))
    assert rep.gap == 0.0
    assert rep.max_ratio == 1.0


@pytest.mark.parametrize("name", ["toy-chain", "toy-chain-divergent", "toy-chain-random", "toy-chain-k0", "one-slot"])
def test_enumeration_unbiased(name):
    inst = builtin_instance(name)
    rep = enumerate_expectation(inst)
    assert rep.gap <= 1e-10
    assert abs(rep.behavior_mass - 1) <= 1e-12 and abs(rep.target_mass - 1) <= 1e-12
    assert rep.episode_space_size == sum(len(inst.vocab) ** s.length for s in inst.skeletons)


def test_tiny_propensity_instance():
    inst = builtin_instance("toy-chain")
    c = inst.vocab.token_of["c"]
    mu = inst.mu.with_table(inst.mu.table - 8.0 * (np.arange(len(inst.vocab)) == c))
    target = shift_entities(inst.base, {c}, 5.0)
    skewed = Instance("tiny", inst.vocab, inst.skeletons, inst.skeleton_probs, target, mu, inst.base, inst.entity_tokens)
    rep = enumerate_expectation(skewed)
    assert rep.gap <= 1e-10
    assert rep.max_ratio > 1000


def test_monte_carlo_agrees_with_enumeration():
    inst = builtin_instance("toy-chain")
    check = monte_carlo_check(inst, 100_000, seed=4)
    assert check.passed


def test_reference_value_route():
    inst = builtin_instance("toy-chain-divergent")
    exact = enumerate_expectation(inst).true_value
    mc = reference_value(inst, samples=400_000, seed=1)
    assert abs(mc - exact) < 0.01


def test_enumeration_bound():
    inst = builtin_instance("toy-chain")
    with pytest.raises(EnumerationBoundError):
        enumerate_expectation(inst, bound=1000)


def test_walk_distribution_matches_sampler():
    g = generate_synthetic(6, 2, 2, 0.0, 3)
    dist = walk_distribution(g, (1, 2))
    assert sum(p for _, p in dist) == pytest.approx(1.0, abs=1e-12)
    walks = sample_walk_set(g, 20000, (1, 2), 9)
    freq = Counter(w.steps for w in walks)
    for traj, p in dist:
        assert abs(freq[traj.steps] / 20000 - p) < 0.01


def test_walk_distribution_conditions_on_completion():
    dist = walk_distribution(chain_graph(), (2, 2))
    assert [(t.steps, p) for t, p in dist] == [((0, 0, 1, 0, 2), 1.0)]


def test_coverage_report_contract():
    inst = builtin_instance("toy-chain")
    rep = coverage_experiment(inst, replications=50, n=100, delta=0.05, seed=2, variance_replications=0)
    assert 0.0 <= rep.fraction_covered <= 1.0 and rep.replications == 50
    assert rep.route == "enumeration"
    tiny = coverage_experiment(inst, replications=50, n=100, delta=0.999, seed=2, variance_replications=0)
    assert tiny.mean_radius < rep.mean_radius
    assert tiny.floor_binding is False


def test_skewed_preference_argmax():
    inst = one_slot_instance()
    rep = decomposition_consistency(inst)
    assert rep.passed
    x = inst.vocab.token_of["x"]
    assert set(rep.argmax_full) == {x}


def test_uniform_base_agreement():
    rep = decomposition_consistency(one_slot_instance(uniform_base=True))
    assert rep.passed


def test_symmetric_instance_relabeling():
    """Swapping two equivalent candidates in the logged data swaps the
    resulting argmax under both objectives."""
    inst = one_slot_instance(base_bias=(0.0, 0.0, 0.0), skew=(1.0, 1.0, 1.0))
    vocab = inst.vocab
    x, y = vocab.token_of["x"], vocab.token_of["y"]
    ds = inst.sample(300, np.random.default_rng(8))
    perm = np.arange(len(vocab))
    perm[[x, y]] = [y, x]
    swapped = LoggedDataset(
        vocab, ds.questions, ds.answers, perm[ds.tokens], ds.mask, ds.step_offsets,
        ds.episode_offsets, ds.propensity, ds.base_logp, ds.header,
    )
    cfg = EstimatorConfig(validate=False)
    for objective in ("full", "kg"):
        oc = OptimizerConfig(learning_rate=0.5, steps=100, objective=objective)
        a = optimize_target(ds, inst.target, inst.mu, inst.base, oc, cfg).final
        b = optimize_target(swapped, inst.target, inst.mu, inst.base, oc, cfg).final
        ea = entity_argmax(a, [0], inst.entity_tokens)[0]
        eb = entity_argmax(b, [0], inst.entity_tokens)[0]
        assert eb == perm[ea]


def test_one_slot_k1_contexts():
    rep = decomposition_consistency(one_slot_instance(k=1))
    assert rep.passed and len(rep.contexts) > 1
