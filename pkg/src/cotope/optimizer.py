"""Gradient ascent of the target policy on the estimated value of a fixed
logged dataset, with KL drift monitoring."""
from __future__ import annotations

import csv
import io
from dataclasses import asdict, dataclass, field
from typing import Callable, Optional

import numpy as np

from . import _kernels
from .episodes import LoggedDataset
from .errors import ArgumentError, NumericalError
from .estimator import EstimatorConfig, _check_inputs, token_terms
from .policy import PolicyGradient, TokenPolicy, row_kl


@dataclass(frozen=True)
class OptimizerConfig:
    learning_rate: float = 0.05
    steps: int = 100
    max_backtracks: int = 20
    kl_threshold: float = 0.05
    objective: str = "full"  # or "kg": entity tokens only
    relog_every: Optional[int] = None
    seed: int = 0

    def __post_init__(self):
        if self.learning_rate < 0 or self.steps < 0 or self.max_backtracks < 0:
            raise ArgumentError("learning_rate, steps and max_backtracks must be non-negative")
        if self.objective not in ("full", "kg"):
            raise ArgumentError("objective must be 'full' or 'kg'")


@dataclass
class TraceRecord:
    step: int
    value: float
    grad_norm: float
    kl_entity: float
    kl_nonentity: float
    learning_rate: float


@dataclass
class OptimizationRun:
    initial: TokenPolicy
    final: TokenPolicy
    initial_record: TraceRecord
    trace: list = field(default_factory=list)
    config: OptimizerConfig = OptimizerConfig()

    @property
    def initial_value(self) -> float:
        return self.initial_record.value

    @property
    def final_value(self) -> float:
        return self.trace[-1].value if self.trace else self.initial_record.value

    def records(self) -> list:
        return [self.initial_record] + list(self.trace)

    def to_dict(self) -> dict:
        return {
            "config": asdict(self.config),
            "initial_value": self.initial_value,
            "final_value": self.final_value,
            "accepted_steps": len(self.trace),
            "initial_hash": self.initial.hash(),
            "final_hash": self.final.hash(),
            "trace": [asdict(r) for r in self.records()],
        }

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["step", "value", "grad_norm", "kl_entity", "kl_nonentity"])
        for r in self.records():
            w.writerow([r.step, repr(r.value), repr(r.grad_norm), repr(r.kl_entity), repr(r.kl_nonentity)])
        return buf.getvalue()


def estimated_value(dataset, target, config: EstimatorConfig, part: str = "full") -> float:
    values, *_ = token_terms(dataset, target, config, part)
    return _kernels.kahan_mean(_kernels.nested_means(values, dataset.step_offsets, dataset.episode_offsets))


def grad_value(
    dataset: LoggedDataset,
    target: TokenPolicy,
    mu: Optional[TokenPolicy] = None,
    base: Optional[TokenPolicy] = None,
    config: EstimatorConfig = EstimatorConfig(),
    part: str = "full",
) -> PolicyGradient:
    """Exact gradient of the estimate with respect to the target's logits.

    The estimate is linear in the target probabilities with fixed
    coefficients ``reward / lambda`` (times the nested-mean weights), so the
    gradient is the coefficient-weighted sum of ``d p / d logits``. Tokens
    whose ratio is clipped by ``weight_cap`` contribute nothing.
    """
    _check_inputs(dataset, target, mu, base, config)
    codes = dataset.codes(target.k)
    rows = target.rows_for_codes(codes)
    p = target.prob_table[rows, dataset.tokens]
    reward = np.maximum(dataset.base_logp, config.reward_floor)
    coef = dataset.token_weights() * reward / dataset.propensity
    if config.weight_cap is not None:
        coef = np.where(p / dataset.propensity > config.weight_cap, 0.0, coef)
    if part == "kg":
        coef = np.where(dataset.mask, coef, 0.0)
    elif part == "reg":
        coef = np.where(dataset.mask, 0.0, coef)
    cp = coef * p
    g = np.zeros_like(target.table)
    np.add.at(g, (rows, dataset.tokens), cp)
    g -= np.bincount(rows, weights=cp, minlength=len(g))[:, None] * target.prob_table
    return PolicyGradient(g)


def drift(dataset: LoggedDataset, target: TokenPolicy, mu: TokenPolicy, base: TokenPolicy):
    """Mean KL(target || mu) over logged entity states and mean
    KL(target || base) over logged context states, computed exactly per row."""
    out = []
    for sel, ref in ((dataset.mask, mu), (~dataset.mask, base)):
        if not np.any(sel):
            out.append(0.0)
            continue
        rt = target.rows_for_codes(dataset.codes(target.k)[sel])
        rr = ref.rows_for_codes(dataset.codes(ref.k)[sel])
        kl = row_kl(target.log_prob_table[rt], ref.log_prob_table[rr])
        out.append(float(max(np.mean(kl), 0.0)))
    return tuple(out)


def optimize_target(
    dataset: LoggedDataset,
    init: TokenPolicy,
    mu: TokenPolicy,
    base: TokenPolicy,
    config: OptimizerConfig = OptimizerConfig(),
    estimator_config: EstimatorConfig = EstimatorConfig(),
    relog: Optional[Callable[[TokenPolicy, int], LoggedDataset]] = None,
) -> OptimizationRun:
    """``theta <- theta + lr * grad`` with step halving whenever the estimate
    would drop. Stops early when no halving yields an improvement."""
    _check_inputs(dataset, init, mu, base, estimator_config)
    part = config.objective
    current = init.clone_as("target")
    value = estimated_value(dataset, current, estimator_config, part)

    def record(step, pol, val, gnorm, lr):
        kl_e, kl_n = drift(dataset, pol, mu, base)
        return TraceRecord(step, val, gnorm, kl_e, kl_n, lr)

    g0 = grad_value(dataset, current, config=estimator_config, part=part)
    run = OptimizationRun(init, current, record(0, current, value, g0.norm(), 0.0), [], config)
    for step in range(1, config.steps + 1):
        if relog is not None and config.relog_every and step % config.relog_every == 0:
            dataset = relog(current, step)
            value = estimated_value(dataset, current, estimator_config, part)
        grad = grad_value(dataset, current, config=estimator_config, part=part)
        if not grad.is_finite():
            raise NumericalError(f"non-finite gradient at step {step}", run.trace)
        lr = config.learning_rate
        accepted = False
        for _ in range(config.max_backtracks + 1):
            cand = current.with_table(current.table + lr * grad.array)
            cand_value = estimated_value(dataset, cand, estimator_config, part)
            if not np.isfinite(cand_value):
                raise NumericalError(f"non-finite estimate at step {step}", run.trace)
            if cand_value >= value:
                accepted = True
                break
            lr *= 0.5
        if not accepted:
            break
        current, value = cand, cand_value
        run.trace.append(record(step, current, value, grad.norm(), lr))
    run.final = current
    return run
