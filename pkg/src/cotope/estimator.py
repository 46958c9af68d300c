"""Off-policy value estimators over logged token episodes.

The main estimator weights each logged token by ``pi_target / lambda`` where
``lambda`` is the preference-policy probability on entity tokens and the
base-policy probability elsewhere, and scores it with the base policy's token
log-likelihood. Token terms are averaged within each step, steps within each
episode, and episodes across the dataset.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import _kernels
from .episodes import LoggedDataset, LoggedEpisode
from .errors import ArgumentError, ConfigurationError, StalenessError
from .policy import TokenPolicy


@dataclass(frozen=True)
class EstimatorConfig:
    delta: float = 0.05
    weight_cap: Optional[float] = None
    reward_floor: float = -20.0
    validate: bool = True

    def __post_init__(self):
        if not 0.0 < self.delta < 1.0:
            raise ArgumentError(f"delta must lie in (0, 1), got {self.delta}")
        if self.weight_cap is not None and not self.weight_cap > 0:
            raise ArgumentError("weight_cap must be positive")
        if not self.reward_floor < 0:
            raise ArgumentError("reward_floor must be negative")


@dataclass
class ValueEstimate:
    value: float
    per_episode_terms: np.ndarray = field(repr=False)
    n: int
    M: float
    delta: float
    ci_radius: float
    empirical_variance: float
    variance_proxy_bound: float
    weight_cap: Optional[float] = None
    truncated: bool = False
    floor_binding: bool = False
    estimator: str = "kg_ips"

    def to_dict(self, per_episode_terms_path: Optional[str] = None) -> dict:
        return {
            "estimator": self.estimator,
            "value": self.value,
            "n": self.n,
            "M": self.M,
            "weight_cap": self.weight_cap,
            "truncated": self.truncated,
            "floor_binding": self.floor_binding,
            "delta": self.delta,
            "ci_radius": self.ci_radius,
            "variance": self.empirical_variance,
            "proxy_bound": self.variance_proxy_bound,
            "per_episode_terms_path": per_episode_terms_path,
        }

    def to_json(self, **kw) -> str:
        return json.dumps(self.to_dict(**kw), sort_keys=True)


@dataclass(frozen=True)
class RewardDecomposition:
    kg_term: float
    reg_term: float
    total: float


def confidence_radius(M: float, n: int, delta: float) -> float:
    """Hoeffding-style radius ``M * sqrt(ln(1/delta) / (2n))``."""
    if not M > 0 or not n >= 1 or not 0.0 < delta < 1.0:
        raise ArgumentError("need M > 0, n >= 1 and delta in (0, 1)")
    return M * math.sqrt(math.log(1.0 / delta) / (2.0 * n))


def variance_proxy_bound(M: float, n: int) -> float:
    """Sub-Gaussian variance proxy ``M**2 / (4n)`` of an average of ``n``
    terms bounded in an interval of width ``M``."""
    if not M > 0 or not n >= 1:
        raise ArgumentError("need M > 0 and n >= 1")
    return M * M / (4.0 * n)


def lambda_propensity(token: int, position: int, step, mu: TokenPolicy, base: TokenPolicy, state) -> float:
    """Behavior probability of ``token``: preference policy on entity-mention
    positions, base policy elsewhere."""
    policy = mu if step.mask[position] else base
    return policy.prob(state, token)


def _check_inputs(dataset: LoggedDataset, target: TokenPolicy, mu=None, base=None, config=None):
    if len(dataset) == 0:
        raise ArgumentError("cannot estimate from an empty dataset")
    for p in (target, mu, base):
        if p is not None and p.vocab.tokens != dataset.vocab.tokens:
            raise ConfigurationError("policy vocabulary differs from the dataset vocabulary")
    if config is not None and config.validate:
        for key, p in (("mu_hash", mu), ("base_hash", base)):
            if p is not None and dataset.header.get(key) not in (None, p.hash()):
                raise StalenessError(f"dataset {key} does not match the supplied snapshot")


def token_terms(dataset: LoggedDataset, target: TokenPolicy, config: EstimatorConfig, part: str = "full"):
    """Per-token ``ratio * reward`` values plus diagnostics.

    ``part`` selects entity tokens (``"kg"``), the rest (``"reg"``) or both;
    unselected tokens contribute zero but still count in the step length.
    """
    ratio = target.token_probs(dataset.codes(target.k), dataset.tokens) / dataset.propensity
    reward = np.maximum(dataset.base_logp, config.reward_floor)
    M = float(ratio.max())
    truncated = False
    if config.weight_cap is not None:
        truncated = bool(np.any(ratio > config.weight_cap))
        ratio = np.minimum(ratio, config.weight_cap)
    values = ratio * reward
    if part == "kg":
        values = np.where(dataset.mask, values, 0.0)
    elif part == "reg":
        values = np.where(dataset.mask, 0.0, values)
    elif part != "full":
        raise ArgumentError(f"unknown part {part!r}")
    floor_binding = bool(np.any(dataset.base_logp < config.reward_floor))
    return values, M, truncated, floor_binding


def _finish(terms, M, config, truncated, floor_binding, name, value=None) -> ValueEstimate:
    n = len(terms)
    if value is None:
        value = _kernels.kahan_mean(terms)
    var = float(np.var(terms, ddof=1)) if n > 1 else 0.0
    return ValueEstimate(
        value=float(value),
        per_episode_terms=terms,
        n=n,
        M=M,
        delta=config.delta,
        ci_radius=confidence_radius(M, n, config.delta),
        empirical_variance=var,
        variance_proxy_bound=variance_proxy_bound(M, n),
        weight_cap=config.weight_cap,
        truncated=truncated,
        floor_binding=floor_binding,
        estimator=name,
    )


def kg_ips_estimate(
    dataset: LoggedDataset,
    target: TokenPolicy,
    mu: Optional[TokenPolicy] = None,
    base: Optional[TokenPolicy] = None,
    config: EstimatorConfig = EstimatorConfig(),
    part: str = "full",
) -> ValueEstimate:
    """Estimate the target policy's value from logged episodes.

    Parameters
    ----------
    dataset : LoggedDataset
        Episodes with cached propensities and base log-likelihoods.
    target : TokenPolicy
        Policy being evaluated.
    mu, base : TokenPolicy, optional
        Snapshots the dataset was logged with. When given (and
        ``config.validate``) their hashes must match the dataset header.
    config : EstimatorConfig
        Confidence level, optional ratio truncation and reward floor.
    part : {"full", "kg", "reg"}
        Restrict the sum to entity tokens or to context tokens.

    Returns
    -------
    ValueEstimate
        ``M`` is the largest importance ratio observed before truncation.
    """
    _check_inputs(dataset, target, mu, base, config)
    values, M, truncated, floor_binding = token_terms(dataset, target, config, part)
    terms = _kernels.nested_means(values, dataset.step_offsets, dataset.episode_offsets)
    return _finish(terms, M, config, truncated, floor_binding, "kg_ips" if part == "full" else f"kg_ips_{part}")


def _sequence_weights(dataset: LoggedDataset, target: TokenPolicy):
    log_ratio = target.token_log_probs(dataset.codes(target.k), dataset.tokens) - np.log(dataset.propensity)
    return np.exp(np.add.reduceat(log_ratio, dataset.token_offsets[:-1]))


def _episode_rewards(dataset: LoggedDataset, config: EstimatorConfig) -> np.ndarray:
    reward = np.maximum(dataset.base_logp, config.reward_floor)
    return _kernels.nested_means(reward, dataset.step_offsets, dataset.episode_offsets)


def plain_ips_estimate(dataset: LoggedDataset, target: TokenPolicy, config: EstimatorConfig = EstimatorConfig()) -> ValueEstimate:
    """Sequence-level IPS: each episode's mean reward weighted by the product of
    its token ratios, with no entity/context split."""
    _check_inputs(dataset, target)
    w = _sequence_weights(dataset, target)
    M = float(w.max())
    truncated = False
    if config.weight_cap is not None:
        truncated = bool(np.any(w > config.weight_cap))
        w = np.minimum(w, config.weight_cap)
    rewards = _episode_rewards(dataset, config)
    floor_binding = bool(np.any(dataset.base_logp < config.reward_floor))
    return _finish(w * rewards, M, config, truncated, floor_binding, "plain_ips")


def snips_estimate(dataset: LoggedDataset, target: TokenPolicy, config: EstimatorConfig = EstimatorConfig()) -> ValueEstimate:
    """Self-normalized sequence-level IPS: ``sum(w * R) / sum(w)``."""
    _check_inputs(dataset, target)
    w = _sequence_weights(dataset, target)
    truncated = False
    if config.weight_cap is not None:
        truncated = bool(np.any(w > config.weight_cap))
        w = np.minimum(w, config.weight_cap)
    rewards = _episode_rewards(dataset, config)
    w_sum = _kernels.kahan_sum(w)
    value = _kernels.kahan_sum(w * rewards) / w_sum
    normalized = w * (len(w) / w_sum)
    floor_binding = bool(np.any(dataset.base_logp < config.reward_floor))
    return _finish(normalized * rewards, float(normalized.max()), config, truncated, floor_binding, "snips", value)


def decompose_reward(
    episode: LoggedEpisode,
    target: TokenPolicy,
    mu: TokenPolicy,
    base: TokenPolicy,
    config: EstimatorConfig = EstimatorConfig(),
) -> RewardDecomposition:
    """Split one episode's step-normalized score into the entity-token part and
    the context-token part, recomputing propensities from the snapshots."""
    kg = reg = 0.0
    state = list(episode.episode.question)
    for step in episode.episode.steps:
        size = len(step.tokens)
        for pos, tok in enumerate(step.tokens):
            lam = lambda_propensity(tok, pos, step, mu, base, state)
            ratio = target.prob(state, tok) / lam
            if config.weight_cap is not None:
                ratio = min(ratio, config.weight_cap)
            r = max(base.log_prob(state, tok), config.reward_floor)
            if step.mask[pos]:
                kg += ratio * r / size
            else:
                reg += ratio * r / size
            state.append(tok)
    return RewardDecomposition(kg, reg, kg + reg)
