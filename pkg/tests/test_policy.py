import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cotope.errors import ArgumentError, ConfigurationError
from cotope.policy import TokenPolicy, episode_log_prob, row_kl
from cotope.verbal import Vocabulary
from cotope.verify import gradient_checks

V4 = Vocabulary(("<BOS>", "<EOS>", "<UNK>", "w"))


def test_uniform_log_prob():
    pol = TokenPolicy.uniform(V4, k=0)
    for tok in range(4):
        assert pol.log_prob((), tok) == pytest.approx(math.log(0.25), abs=1e-15)


def test_closed_form_softmax():
    vocab = Vocabulary(("<BOS>", "<EOS>", "<UNK>", "a", "b"))
    table = np.array([[-800.0, -800.0, -800.0, 2.0, 0.0]])
    pol = TokenPolicy(vocab, 0, "target", (), table)
    e2 = math.exp(2)
    assert pol.prob((), 3) == pytest.approx(e2 / (e2 + 1), rel=1e-14)
    assert pol.log_prob((), 3) == pytest.approx(-0.12692801104297263, rel=1e-12)


def test_rows_normalized(rng):
    vocab = Vocabulary(("<BOS>", "<EOS>", "<UNK>", "a", "b", "c"))
    pol = TokenPolicy.random(vocab, 2, "target", 3.0, 1)
    for _ in range(100):
        state = tuple(rng.integers(0, 6, size=3))
        assert abs(sum(math.exp(pol.log_prob(state, t)) for t in range(6)) - 1) < 1e-12


def test_degenerate_sampling():
    table = np.zeros((1, 4))
    table[0, 3] = 50.0
    pol = TokenPolicy(V4, 0, "target", (), table)
    rng = np.random.default_rng(0)
    draws = [pol.sample((), rng) for _ in range(10000)]
    assert draws.count(3) / 10000 >= 0.999


def test_uniform_sampling_frequencies():
    pol = TokenPolicy.uniform(V4, 0)
    rng = np.random.default_rng(3)
    draws = np.array([pol.sample((), rng) for _ in range(40000)])
    for t in range(4):
        assert abs(np.mean(draws == t) - 0.25) < 0.01


def test_sampling_deterministic():
    pol = TokenPolicy.random(V4, 1, "target", 1.0, 2)
    assert pol.sample((3,), 42) == pol.sample((3,), 42)


def test_grad_closed_forms():
    vocab = Vocabulary(("<BOS>", "<EOS>", "<UNK>", "a", "b"))
    table = np.array([[-800.0, -800.0, -800.0, 0.0, 0.0]])
    pol = TokenPolicy(vocab, 0, "target", (), table)
    np.testing.assert_allclose(pol.grad_log_prob((), 3).array[0, 3:], [0.5, -0.5], atol=1e-15)
    np.testing.assert_allclose(pol.grad_prob((), 3).array[0, 3:], [0.25, -0.25], atol=1e-15)


def test_saturated_gradient_vanishes():
    table = np.zeros((1, 4))
    table[0, 2] = 50.0
    pol = TokenPolicy(V4, 0, "target", (), table)
    assert np.abs(pol.grad_log_prob((), 2).array).max() < 1e-20


def test_grad_prob_sums_to_zero(rng):
    pol = TokenPolicy.random(V4, 1, "target", 2.0, 5)
    for _ in range(20):
        state = tuple(rng.integers(0, 4, size=2))
        g = pol.grad_prob(state, int(rng.integers(4))).array
        assert abs(g.sum()) < 1e-15


def test_finite_differences():
    errs = gradient_checks(probes=50, seed=1)
    assert errs["grad_log_prob"] < 1e-6
    assert errs["grad_prob"] < 1e-6


def test_clone_isolation():
    pol = TokenPolicy.random(V4, 1, "base", 1.0, 0)
    clone = pol.clone_as("target")
    perturbed = clone.with_table(clone.table + 1.0)
    assert np.array_equal(pol.table, TokenPolicy.random(V4, 1, "base", 1.0, 0).table)
    assert not np.array_equal(perturbed.table, pol.table)
    with pytest.raises(ValueError):
        clone.table[0, 0] = 3.0


def test_episode_log_prob(chain):
    from cotope.verbal import episode_for
    from cotope.walk import Trajectory

    graph, templates, vocab = chain
    pol = TokenPolicy.random(vocab, 1, "target", 1.0, 4)
    ep = episode_for(Trajectory((0, 0, 1, 0, 2)), graph, templates, vocab)
    state = list(ep.question)
    total = 0.0
    for step in ep.steps:
        for tok in step.tokens:
            total += pol.log_prob(state, tok)
            state.append(tok)
    assert episode_log_prob(pol, ep) == pytest.approx(total, abs=1e-12)


def test_single_token_episode_log_prob(chain):
    from cotope.verbal import Step, VerbalizedEpisode

    _, _, vocab = chain
    pol = TokenPolicy.random(vocab, 1, "target", 1.0, 4)
    ep = VerbalizedEpisode((5,), (Step((7,), (False,)),), "Q1")
    assert episode_log_prob(pol, ep) == pol.log_prob((5,), 7)


def test_serialization_roundtrip(tmp_path, chain):
    _, _, vocab = chain
    pol = TokenPolicy.random(vocab, 1, "preference", 1.3, 9)
    pol.save(tmp_path / "p.json")
    back = TokenPolicy.load(tmp_path / "p.json", vocab)
    assert np.array_equal(back.table, pol.table) and back.hash() == pol.hash() and back.role == "preference"
    with pytest.raises(ConfigurationError):
        TokenPolicy.load(tmp_path / "p.json", V4)


def test_hash_ignores_role_but_not_logits():
    pol = TokenPolicy.random(V4, 1, "base", 1.0, 0)
    assert pol.clone_as("target").hash() == pol.hash()
    assert pol.with_table(pol.table + 1e-12).hash() != pol.hash()


def test_unseen_context_uses_default_row(chain):
    _, _, vocab = chain
    pol = TokenPolicy(vocab, 1, "target", [(3,)], np.arange(2 * len(vocab), dtype=float).reshape(2, -1))
    assert pol.row_index((5,)) == 0 and pol.row_index((3,)) == 1


def test_from_counts_fits_bigrams(chain):
    from cotope.verbal import episode_for
    from cotope.walk import Trajectory

    graph, templates, vocab = chain
    ep = episode_for(Trajectory((0, 0, 1)), graph, templates, vocab)
    pol = TokenPolicy.from_counts(vocab, [ep] * 50, k=1, smoothing=0.01)
    for state, tok, _ in ep.states():
        assert pol.probs(state).argmax() == tok


def test_invalid_construction():
    with pytest.raises(ArgumentError):
        TokenPolicy(V4, -1)
    with pytest.raises(ArgumentError):
        TokenPolicy(V4, 0, "target", (), np.full((1, 4), np.nan))
    with pytest.raises(ArgumentError):
        TokenPolicy(V4, 0, "critic")


@settings(max_examples=40, deadline=None)
@given(st.lists(st.floats(-30, 30), min_size=4, max_size=4), st.lists(st.floats(-30, 30), min_size=4, max_size=4))
def test_kl_nonnegative_and_zero_on_self(a, b):
    p = TokenPolicy(V4, 0, "target", (), np.array([a]))
    q = TokenPolicy(V4, 0, "target", (), np.array([b]))
    assert row_kl(p.log_prob_table, q.log_prob_table)[0] >= -1e-12
    assert abs(row_kl(p.log_prob_table, p.log_prob_table)[0]) < 1e-12
