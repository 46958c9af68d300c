import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cotope.episodes import LoggedDataset, LoggedEpisode, log_episodes
from cotope.errors import ArgumentError, StalenessError
from cotope.estimator import (
    EstimatorConfig,
    confidence_radius,
    decompose_reward,
    kg_ips_estimate,
    lambda_propensity,
    plain_ips_estimate,
    snips_estimate,
    variance_proxy_bound,
)
from cotope.policy import TokenPolicy
from cotope.verbal import Step, VerbalizedEpisode, Vocabulary
from cotope.verify import builtin_instance

V4 = Vocabulary(("<BOS>", "<EOS>", "<UNK>", "w"))


def test_lambda_definition():
    uniform = TokenPolicy.uniform(V4, 0, "preference")
    table = np.log(np.array([[0.9, 0.05, 0.03, 0.02]]))
    base = TokenPolicy(V4, 0, "base", (), table)
    step = Step((3, 0), (True, False))
    assert lambda_propensity(3, 0, step, uniform, base, ()) == 0.25
    assert lambda_propensity(0, 1, step, uniform, base, (3,)) == pytest.approx(0.9, abs=1e-15)


def test_unit_weight_single_token():
    base = TokenPolicy(V4, 0, "base", (), np.log(np.array([[0.5, 0.2, 0.2, 0.1]])))
    ds = LoggedDataset(V4, [()], ["x"], [0], [False], [0, 1], [0, 1], [0.5], [math.log(0.5)])
    est = kg_ips_estimate(ds, base, config=EstimatorConfig(validate=False))
    assert est.value == pytest.approx(math.log(0.5), abs=1e-15)
    assert est.M == pytest.approx(1.0, abs=1e-15)


def test_on_policy_degeneracy(toy_parts):
    graph, templates, vocab, base, _ = toy_parts
    ds = log_episodes(graph, templates, vocab, base, base, 100, (1, 2), 3)
    est = kg_ips_estimate(ds, base, base, base)
    for i, term in enumerate(est.per_episode_terms):
        le = ds.episode(i)
        step_means = [np.mean(lp) for lp in le.base_log_probs]
        assert term == pytest.approx(np.mean(step_means), abs=1e-13)
    assert est.value == pytest.approx(np.mean(est.per_episode_terms), abs=1e-14)
    plain = plain_ips_estimate(ds, base)
    assert plain.value == pytest.approx(est.value, abs=1e-13)


def test_snips_constant_reward(toy_parts):
    graph, templates, vocab, base, mu = toy_parts
    ds = log_episodes(graph, templates, vocab, mu, base, 50, (1, 2), 4)
    target = TokenPolicy.random(vocab, 1, "target", 1.0, 3)
    for c in (-0.5, -1.7):
        const = LoggedDataset(
            vocab, ds.questions, ds.answers, ds.tokens, ds.mask, ds.step_offsets,
            ds.episode_offsets, ds.propensity, np.full(len(ds.tokens), c),
        )
        v = snips_estimate(const, target).value
        if c == -0.5:
            assert v == c
        else:
            assert v == pytest.approx(c, rel=1e-15)


def test_plain_ips_has_higher_variance_under_divergence():
    inst = builtin_instance("toy-chain-divergent")
    kg, plain = [], []
    for r in range(200):
        ds = inst.sample(200, np.random.default_rng([5, r]))
        kg.append(kg_ips_estimate(ds, inst.target, config=EstimatorConfig(validate=False)).value)
        plain.append(plain_ips_estimate(ds, inst.target).value)
    assert np.var(plain) > np.var(kg)


def test_confidence_radius_examples():
    assert confidence_radius(1.0, 2, 1 / math.e) == pytest.approx(0.5, abs=1e-15)
    assert confidence_radius(2.0, 100, 0.05) == pytest.approx(2 * math.sqrt(math.log(20) / 200), rel=1e-15)
    assert confidence_radius(2.0, 100, 0.05) == pytest.approx(0.2448, abs=5e-5)


def test_radius_monotone_grid():
    for M in (0.5, 1, 3):
        radii = [confidence_radius(M, n, 0.05) for n in (1, 2, 5, 10, 100)]
        assert all(a > b for a, b in zip(radii, radii[1:]))
    for n in (1, 10, 100):
        radii = [confidence_radius(M, n, 0.05) for M in (0.1, 1, 10)]
        assert all(a < b for a, b in zip(radii, radii[1:]))


def test_variance_proxy_examples():
    assert variance_proxy_bound(1.0, 25) == pytest.approx(0.01, abs=1e-17)
    assert variance_proxy_bound(2.0, 1) == 1.0
    for M in (0.3, 1.0, 7.0):
        for n in (1, 3, 50):
            assert variance_proxy_bound(M, 2 * n) == pytest.approx(variance_proxy_bound(M, n) / 2, rel=1e-15)


def test_formula_domains():
    with pytest.raises(ArgumentError):
        confidence_radius(0.0, 10, 0.05)
    with pytest.raises(ArgumentError):
        confidence_radius(1.0, 0, 0.05)
    with pytest.raises(ArgumentError):
        EstimatorConfig(delta=1.5)


def _one_episode(mask):
    base = TokenPolicy.random(V4, 0, "base", 1.0, 0)
    mu = TokenPolicy.random(V4, 0, "preference", 1.0, 1)
    target = TokenPolicy.random(V4, 0, "target", 1.0, 2)
    toks = (3, 0, 3)
    lam = tuple(mu.prob((), t) if m else base.prob((), t) for t, m in zip(toks, mask))
    lp = tuple(base.log_prob((), t) for t in toks)
    le = LoggedEpisode(VerbalizedEpisode((), (Step(toks, mask),), "x"), (lam,), (lp,))
    return le, target, mu, base


def test_decomposition_edge_cases():
    le, target, mu, base = _one_episode((True, True, True))
    assert decompose_reward(le, target, mu, base).reg_term == 0.0
    le, target, mu, base = _one_episode((False, False, False))
    assert decompose_reward(le, target, mu, base).kg_term == 0.0


def test_decomposition_additive(toy_parts):
    graph, templates, vocab, base, mu = toy_parts
    ds = log_episodes(graph, templates, vocab, mu, base, 100, (1, 2), 7)
    target = TokenPolicy.random(vocab, 1, "target", 1.0, 5)
    est = kg_ips_estimate(ds, target, mu, base)
    for i in range(len(ds)):
        le = ds.episode(i)
        d = decompose_reward(le, target, mu, base)
        # the split is taken before dividing by the step count
        assert d.total / le.num_steps == pytest.approx(est.per_episode_terms[i], abs=1e-13)
        assert d.kg_term + d.reg_term == pytest.approx(d.total, abs=1e-15)
    kg = kg_ips_estimate(ds, target, mu, base, part="kg").value
    reg = kg_ips_estimate(ds, target, mu, base, part="reg").value
    assert kg + reg == pytest.approx(est.value, abs=1e-13)


def test_truncation_and_M(toy_parts):
    inst = builtin_instance("toy-chain-divergent")
    ds = inst.sample(300, np.random.default_rng(1))
    free = kg_ips_estimate(ds, inst.target, config=EstimatorConfig(validate=False))
    capped = kg_ips_estimate(ds, inst.target, config=EstimatorConfig(weight_cap=2.0, validate=False))
    assert free.M > 2.0 and capped.M == free.M
    assert capped.truncated and not free.truncated
    assert capped.ci_radius == free.ci_radius == confidence_radius(free.M, 300, 0.05)


def test_floor_binding_flag():
    base = TokenPolicy.random(V4, 0, "base", 1.0, 0)
    ds = LoggedDataset(V4, [()], ["x"], [0], [False], [0, 1], [0, 1], [0.5], [-30.0])
    est = kg_ips_estimate(ds, base, config=EstimatorConfig(validate=False))
    assert est.floor_binding
    assert est.value == pytest.approx(base.prob((), 0) / 0.5 * -20.0, rel=1e-15)


def test_stale_snapshot_rejected(toy_parts):
    graph, templates, vocab, base, mu = toy_parts
    ds = log_episodes(graph, templates, vocab, mu, base, 5, (1, 2), 7)
    with pytest.raises(StalenessError):
        kg_ips_estimate(ds, base, mu.with_table(mu.table * 2), base)


def test_empty_dataset_rejected(toy_parts):
    graph, templates, vocab, base, mu = toy_parts
    ds = log_episodes(graph, templates, vocab, mu, base, 0)
    with pytest.raises(ArgumentError):
        kg_ips_estimate(ds, base)


def test_report_fields(toy_parts):
    graph, templates, vocab, base, mu = toy_parts
    ds = log_episodes(graph, templates, vocab, mu, base, 20, (1, 2), 7)
    d = kg_ips_estimate(ds, base, mu, base).to_dict("terms.csv")
    assert set(d) == {
        "estimator", "value", "n", "M", "weight_cap", "truncated", "floor_binding",
        "delta", "ci_radius", "variance", "proxy_bound", "per_episode_terms_path",
    }


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10**6), scale=st.floats(0.1, 3.0))
def test_ratio_one_recovers_mean_loglik(seed, scale):
    vocab = V4
    base = TokenPolicy.random(vocab, 1, "base", scale, seed)
    rng = np.random.default_rng(seed)
    n_tok = int(rng.integers(1, 6))
    toks = rng.integers(0, 4, size=n_tok)
    codes = np.concatenate([[vocab.bos], toks[:-1]])
    lp = base.token_log_probs(codes, toks)
    ds = LoggedDataset(vocab, [()], ["x"], toks, np.zeros(n_tok, bool), [0, n_tok], [0, 1], np.exp(lp), lp)
    est = kg_ips_estimate(ds, base, config=EstimatorConfig(validate=False))
    assert est.value == pytest.approx(np.mean(np.maximum(lp, -20)), abs=1e-12)
