import numpy as np
import pytest
from scipy.stats import binom

from cotope.errors import ArgumentError, ConfigurationError
from cotope.graph import generate_synthetic
from cotope.policy import TokenPolicy, episode_log_prob
from cotope.preference import (
    AnswerOracle,
    PreferenceObjective,
    RewardedTrajectorySet,
    reward_distribution,
    score_trajectories,
    self_consistency_reward,
    total_variation,
    train_preference,
)
from cotope.verbal import TemplateSet, build_vocabulary, episode_for
from cotope.verify import gradient_checks
from cotope.walk import sample_walk_set


@pytest.fixture(scope="module")
def synth():
    g = generate_synthetic(60, 5, 3, 1.0, 2)
    t = TemplateSet.default_for(g)
    v = build_vocabulary(g, t)
    walks = sample_walk_set(g, 1000, (1, 3), 4)
    return g, t, v, walks


def test_perfect_oracle(synth):
    g, t, v, walks = synth
    rset = score_trajectories(walks[:100], g, t, v, AnswerOracle(g, v, 0.0))
    assert np.all(rset.rewards == 1.0)
    assert reward_distribution(rset)[1.0] == 100


def test_always_wrong_oracle(synth):
    g, t, v, walks = synth
    rset = score_trajectories(walks[:100], g, t, v, AnswerOracle(g, v, 1.0))
    assert np.all(rset.rewards == 0.0)


def test_noisy_mean_and_histogram(synth):
    g, t, v, walks = synth
    rset = score_trajectories(walks, g, t, v, AnswerOracle(g, v, 0.3, 17), k_q=10)
    assert abs(rset.rewards.mean() - 0.7) <= 0.02
    pmf = binom.pmf(np.arange(11), 10, 0.7)
    assert total_variation(reward_distribution(rset), pmf) <= 0.05


def test_histogram_edge_cases():
    assert reward_distribution(RewardedTrajectorySet([], 10)) == {}


def test_ungrounded_chain_never_matches(synth):
    g, t, v, walks = synth
    traj = walks[0]
    ep = episode_for(traj, g, t, v)
    # replace the first entity mention with an unknown token
    from cotope.verbal import Step, VerbalizedEpisode

    s0 = ep.steps[0]
    toks = list(s0.tokens)
    toks[s0.mask.index(True)] = v.unk
    bad = VerbalizedEpisode(ep.question, (Step(tuple(toks), s0.mask),) + ep.steps[1:], ep.answer, traj)
    oracle = AnswerOracle(g, v, 0.0)
    assert self_consistency_reward(traj, bad, oracle) == 0.0


def test_zero_rewards_leave_policy_unchanged(synth):
    g, t, v, walks = synth
    rset = score_trajectories(walks[:20], g, t, v, AnswerOracle(g, v, 1.0))
    pol = TokenPolicy.random(v, 1, "preference", 1.0, 0)
    assert not np.any(PreferenceObjective(rset, pol).gradient(pol).array)
    trained, _ = train_preference(pol, rset, 0.5, 5)
    assert np.array_equal(trained.table, pol.table)


def test_single_positive_trajectory_gains_likelihood(synth):
    g, t, v, walks = synth
    traj = walks[3]
    ep = episode_for(traj, g, t, v)
    rset = RewardedTrajectorySet([(traj, ep, 1.0)], 10, v.hash())
    pol = TokenPolicy.random(v, 1, "preference", 1.0, 1)
    trained, log = train_preference(pol, rset, 0.1, 50, lr_decay=False)
    assert episode_log_prob(trained, ep) > episode_log_prob(pol, ep)
    assert all(b["J"] >= a["J"] for a, b in zip(log, log[1:]))


def test_objective_nondecreasing(synth):
    g, t, v, walks = synth
    rset = score_trajectories(walks[:300], g, t, v, AnswerOracle(g, v, 0.3, 1))
    pol = TokenPolicy.from_counts(v, rset.episodes, 1).clone_as("preference")
    _, log = train_preference(pol, rset, 0.05, 10)
    js = [r["J"] for r in log]
    assert all(b >= a for a, b in zip(js, js[1:]))


def test_gradient_finite_differences():
    assert gradient_checks(probes=50, seed=2)["preference_objective"] < 1e-5


def test_validation(synth):
    g, t, v, walks = synth
    with pytest.raises(ArgumentError):
        AnswerOracle(g, v, 1.5)
    with pytest.raises(ArgumentError):
        self_consistency_reward(walks[0], episode_for(walks[0], g, t, v), AnswerOracle(g, v), k_q=0)
    rset = RewardedTrajectorySet([], 10, "other")
    with pytest.raises(ConfigurationError):
        PreferenceObjective(rset, TokenPolicy.uniform(v, 0))


def test_save_load(tmp_path, synth):
    g, t, v, walks = synth
    rset = score_trajectories(walks[:30], g, t, v, AnswerOracle(g, v, 0.3, 5))
    rset.save(tmp_path / "r.jsonl", g)
    back = RewardedTrajectorySet.load(tmp_path / "r.jsonl", g)
    assert np.array_equal(back.rewards, rset.rewards)
    assert back.episodes == rset.episodes and back.vocab_hash == rset.vocab_hash
