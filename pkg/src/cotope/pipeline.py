"""End-to-end run: graph, walks, verbalization, rewards, preference training,
logging, estimation, optimization and verification, with every intermediate
artifact written to the run directory.

Each stage is a plain function over files so the command-line subcommands can
call exactly the same code. All randomness derives from the config's root
seed through :func:`derive_seed`.
"""
from __future__ import annotations

import csv
import hashlib
import io
import json
from dataclasses import asdict
from pathlib import Path
from typing import Optional

import numpy as np

from . import __version__, _kernels
from .config import ExperimentConfig, GraphSection
from .episodes import LoggedDataset, load_dataset, log_episodes, save_dataset, validate_against
from .errors import CotopeError, StageError
from .estimator import EstimatorConfig, kg_ips_estimate, plain_ips_estimate, snips_estimate
from .graph import KnowledgeGraph, chain_graph, generate_synthetic, load_triples, save_triples, trajectory_stats
from .optimizer import OptimizationRun, OptimizerConfig, optimize_target
from .policy import TokenPolicy
from .preference import (
    AnswerOracle,
    RewardedTrajectorySet,
    mean_log_likelihood,
    reward_distribution,
    score_trajectories,
    train_preference,
)
from .verbal import TemplateSet, Vocabulary, build_vocabulary, episode_for, save_episodes
from .walk import load_trajectories, sample_walk_set, save_trajectories

GRAPH_FILES = ("triples.tsv", "entities.tsv", "relations.tsv")


def derive_seed(root: int, stage: str) -> int:
    """63-bit seed from ``sha256("{root}/{stage}")``."""
    digest = hashlib.sha256(f"{root}/{stage}".encode()).digest()
    return int.from_bytes(digest[:8], "big") >> 1


def stage_seeds(root: int) -> dict:
    return {s: derive_seed(root, s) for s in ("walks", "oracle", "logging")}


def write_json(path, obj) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


def write_csv(path, header, rows) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    Path(path).write_text(buf.getvalue(), encoding="utf-8")


def file_sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


# stages ---------------------------------------------------------------------


def build_graph(section: GraphSection, resolve=Path, seed: int = 0):
    """Graph plus load report (``None`` unless read from files)."""
    if section.source == "chain":
        return chain_graph(tuple(str(x) for x in section.labels), section.relation_label), None
    if section.source == "synthetic":
        g = generate_synthetic(
            section.num_entities, section.num_relations, section.edges_per_entity,
            section.relation_skew, seed,
        )
        return g, None
    g, report = load_triples(resolve(section.triples), resolve(section.entity_labels), resolve(section.relation_labels))
    return g, report


def write_graph(graph: KnowledgeGraph, out_dir) -> None:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    save_triples(graph, *(out_dir / f for f in GRAPH_FILES))


def read_graph(graph_dir):
    graph_dir = Path(graph_dir)
    return load_triples(*(graph_dir / f for f in GRAPH_FILES))


def stage_graph(section: GraphSection, out_dir, resolve=Path, seed: int = 0) -> KnowledgeGraph:
    """Materialize the graph as TSV files, then load those files back so that
    every later stage sees exactly what a file-based run would."""
    graph, report = build_graph(section, resolve, seed)
    write_graph(graph, out_dir)
    loaded, report2 = read_graph(out_dir)
    write_json(Path(out_dir) / "load_report.json", asdict(report or report2))
    return loaded


def stage_walks(graph, count, hop_range, seed, out_path, no_revisit=False):
    walks = sample_walk_set(graph, count, tuple(hop_range), seed, no_revisit)
    save_trajectories(out_path, walks, graph)
    return walks


def load_templates(graph, path=None) -> TemplateSet:
    return TemplateSet.load(path) if path is not None else TemplateSet.default_for(graph)


def stage_verbalize(graph, walks, templates: TemplateSet, out_dir):
    out_dir = Path(out_dir)
    vocab = build_vocabulary(graph, templates)
    templates.save(out_dir / "templates.json")
    (out_dir / "vocab.json").write_text(vocab.to_json() + "\n", encoding="utf-8")
    episodes = [episode_for(w, graph, templates, vocab) for w in walks]
    save_episodes(out_dir / "episodes.jsonl", episodes)
    return vocab, episodes


def read_vocab(path) -> Vocabulary:
    return Vocabulary.from_json(Path(path).read_text(encoding="utf-8"))


def stage_reward(graph, walks, templates, vocab, noise, k_q, seed, out_path, hist_path=None) -> RewardedTrajectorySet:
    oracle = AnswerOracle(graph, vocab, noise, seed)
    rset = score_trajectories(walks, graph, templates, vocab, oracle, k_q)
    rset.save(out_path, graph)
    if hist_path is not None:
        dist = reward_distribution(rset)
        write_csv(hist_path, ["reward", "count"], [[repr(k), v] for k, v in dist.items()])
    return rset


def stage_train_pref(rset, vocab, k, smoothing, learning_rate, epochs, out_dir):
    """Fit the base policy from smoothed counts, then train the preference
    policy from a clone of it on the reward-weighted likelihood."""
    out_dir = Path(out_dir)
    base = TokenPolicy.from_counts(vocab, rset.episodes, k=k, smoothing=smoothing, role="base")
    ones = [ep for _, ep, r in rset.items if r == 1.0]
    ll_before = mean_log_likelihood(base, ones) if ones else None
    mu, log = train_preference(base.clone_as("preference"), rset, learning_rate, epochs)
    ll_after = mean_log_likelihood(mu, ones) if ones else None
    base.save(out_dir / "policy_base.json")
    mu.save(out_dir / "policy_pref.json")
    write_csv(
        out_dir / "preference_training.csv", ["epoch", "J", "lr", "accepted"],
        [[r["epoch"], repr(r["J"]), repr(r["lr"]), int(r["accepted"])] for r in log],
    )
    info = {
        "J_initial": log[0]["J"],
        "J_final": log[-1]["J"],
        "J_nondecreasing": all(b["J"] >= a["J"] for a, b in zip(log, log[1:])),
        "reward1_count": len(ones),
        "reward1_loglik_before": ll_before,
        "reward1_loglik_after": ll_after,
    }
    return base, mu, info


def stage_log(graph, templates, vocab, mu, base, count, hop_range, seed, out_path) -> LoggedDataset:
    ds = log_episodes(graph, templates, vocab, mu, base, count, tuple(hop_range), seed)
    save_dataset(out_path, ds)
    return ds


def estimator_config(cfg: ExperimentConfig) -> EstimatorConfig:
    e = cfg.estimator
    return EstimatorConfig(delta=e.delta, weight_cap=e.weight_cap, reward_floor=e.reward_floor)


def evaluate_all(ds, target, mu, base, est_cfg: EstimatorConfig, terms_name: Optional[str] = None):
    """All estimators plus the entity/context split of the main one."""
    kg = kg_ips_estimate(ds, target, mu, base, est_cfg)
    kg_part = kg_ips_estimate(ds, target, mu, base, est_cfg, part="kg")
    reg_part = kg_ips_estimate(ds, target, mu, base, est_cfg, part="reg")
    report = {
        "kg_ips": kg.to_dict(terms_name),
        "plain_ips": plain_ips_estimate(ds, target, est_cfg).to_dict(),
        "snips": snips_estimate(ds, target, est_cfg).to_dict(),
        "decomposition": {"kg_term": kg_part.value, "reg_term": reg_part.value, "total": kg.value},
    }
    return report, kg


def stage_evaluate(ds, target, mu, base, est_cfg, out_path, terms_path=None) -> dict:
    name = Path(terms_path).name if terms_path is not None else None
    report, kg = evaluate_all(ds, target, mu, base, est_cfg, name)
    write_json(out_path, report)
    if terms_path is not None:
        write_csv(terms_path, ["episode", "term"], [[i, repr(float(t))] for i, t in enumerate(kg.per_episode_terms)])
    return report


def stage_optimize(ds, init, mu, base, opt_cfg: OptimizerConfig, est_cfg, out_dir) -> OptimizationRun:
    out_dir = Path(out_dir)
    run = optimize_target(ds, init, mu, base, opt_cfg, est_cfg)
    run.initial.save(out_dir / "target_initial.json")
    run.final.save(out_dir / "target_final.json")
    write_json(out_dir / "optimization.json", run.to_dict())
    (out_dir / "trace.csv").write_text(run.to_csv(), encoding="utf-8")
    return run


def stage_stats(graph, walks, out_path) -> dict:
    stats = trajectory_stats(graph, walks).to_dict()
    write_json(out_path, stats)
    return stats


def optimizer_config(cfg: ExperimentConfig) -> OptimizerConfig:
    o = cfg.optimizer
    return OptimizerConfig(
        learning_rate=o.learning_rate, steps=o.steps, max_backtracks=o.max_backtracks,
        kl_threshold=o.kl_threshold, seed=cfg.seed,
    )


def run_checks(run: OptimizationRun, pref_info: dict, ds, mu, base, kl_threshold: float, instances=()) -> dict:
    """Contract checks on the finished run plus exact unbiasedness on named instances."""
    from .verify import builtin_instance, enumerate_expectation

    recs = run.records()
    checks = {}
    try:
        validate_against(ds, mu, base)
        checks["propensities_revalidated"] = True
    except CotopeError:
        checks["propensities_revalidated"] = False
    checks["trace_monotone"] = all(b.value >= a.value for a, b in zip(recs, recs[1:]))
    checks["value_improved"] = run.final_value > run.initial_value
    checks["kl_entity_decreased"] = recs[-1].kl_entity < recs[0].kl_entity
    checks["kl_nonentity_below_threshold"] = max(r.kl_nonentity for r in recs) < kl_threshold
    checks["preference_J_nondecreasing"] = pref_info["J_nondecreasing"]
    enumerations = {}
    for name in instances:
        rep = enumerate_expectation(builtin_instance(name))
        enumerations[name] = {"gap": rep.gap, "passed": rep.gap <= 1e-10}
        checks[f"unbiased[{name}]"] = rep.gap <= 1e-10
    return {"checks": checks, "enumerations": enumerations, "passed": all(checks.values())}


# orchestration --------------------------------------------------------------


def _artifact_hashes(run_dir: Path) -> dict:
    return {
        str(p.relative_to(run_dir)): file_sha256(p)
        for p in sorted(run_dir.rglob("*"))
        if p.is_file() and p.name != "manifest.json"
    }


def write_manifest(run_dir: Path, cfg: ExperimentConfig, failed: Optional[StageError] = None) -> dict:
    manifest = {
        "config": cfg.to_dict(),
        "config_hash": cfg.hash(),
        "package_version": __version__,
        "kernel_backend": _kernels.BACKEND_NAME,
        "seeds": {"root": cfg.seed, **stage_seeds(cfg.seed)},
        "artifacts": _artifact_hashes(run_dir),
        "failed_stage": failed.stage if failed else None,
        "error": str(failed) if failed else None,
    }
    write_json(run_dir / "manifest.json", manifest)
    return manifest


class _Stage:
    def __init__(self):
        self.name = None

    def __call__(self, name):
        self.name = name
        return self


def run_pipeline(cfg: ExperimentConfig, out_dir=None) -> dict:
    """Execute every stage in order and return the summary dictionary.

    A failing stage raises :class:`StageError` naming it; artifacts already
    written stay on disk and the manifest records the failure.
    """
    cfg.validate()
    run_dir = Path(out_dir if out_dir is not None else cfg.output_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    seeds = stage_seeds(cfg.seed)
    est_cfg = estimator_config(cfg)
    stage = _Stage()
    try:
        stage("graph")
        graph = stage_graph(cfg.graph, run_dir / "graph", cfg.resolve, cfg.seed)

        stage("walk")
        w = cfg.walks
        walks = stage_walks(graph, w.count, w.hop_range, seeds["walks"], run_dir / "walks.jsonl", w.no_revisit)
        stage_stats(graph, walks, run_dir / "graph_stats.json")

        stage("verbalize")
        templates = load_templates(graph, cfg.resolve(cfg.templates))
        vocab, _ = stage_verbalize(graph, walks, templates, run_dir)

        stage("reward")
        p = cfg.preference
        rset = stage_reward(
            graph, walks, templates, vocab, p.noise, p.k_q, seeds["oracle"],
            run_dir / "rewards.jsonl", run_dir / "reward_histogram.csv",
        )

        stage("train-pref")
        base, mu, pref_info = stage_train_pref(
            rset, vocab, cfg.policy.k, cfg.policy.smoothing, p.learning_rate, p.epochs, run_dir
        )

        stage("log")
        lg = cfg.logging
        stage_log(graph, templates, vocab, mu, base, lg.count, lg.hop_range, seeds["logging"], run_dir / "dataset.jsonl")
        ds = load_dataset(run_dir / "dataset.jsonl", vocab, mu, base)

        stage("evaluate")
        init = base.clone_as("target")
        estimates = stage_evaluate(ds, init, mu, base, est_cfg, run_dir / "estimates.json", run_dir / "per_episode_terms.csv")

        stage("optimize")
        run = stage_optimize(ds, init, mu, base, optimizer_config(cfg), est_cfg, run_dir)

        stage("verify")
        verify = run_checks(run, pref_info, ds, mu, base, cfg.optimizer.kl_threshold, cfg.verify.instances)
        write_json(run_dir / "verify.json", verify)

        stage("summary")
        recs = run.records()
        rewards = rset.rewards
        stats = json.loads((run_dir / "graph_stats.json").read_text(encoding="utf-8"))
        summary = {
            "name": cfg.name,
            "config_hash": cfg.hash(),
            "seed": cfg.seed,
            "graph": {"entities": graph.num_entities, "relations": graph.num_relations, "edges": len(graph.edges)},
            "vocab_size": len(vocab),
            "walks": len(walks),
            "top_decile_share_relations": stats["top_decile_share_relations"],
            "top_decile_share_entities": stats["top_decile_share_entities"],
            "reward_mean": float(np.mean(rewards)) if len(rewards) else None,
            "preference": pref_info,
            "logged_episodes": len(ds),
            "estimates": {k: estimates[k]["value"] for k in ("kg_ips", "plain_ips", "snips")},
            "ci_radius": estimates["kg_ips"]["ci_radius"],
            "M": estimates["kg_ips"]["M"],
            "V_hat_initial": run.initial_value,
            "V_hat_final": run.final_value,
            "accepted_steps": len(run.trace),
            "kl_entity_initial": recs[0].kl_entity,
            "kl_entity_final": recs[-1].kl_entity,
            "kl_nonentity_max": max(r.kl_nonentity for r in recs),
            "verify_passed": verify["passed"],
        }
        write_json(run_dir / "summary.json", summary)
    except CotopeError as exc:
        err = exc if isinstance(exc, StageError) else StageError(stage.name, exc)
        write_manifest(run_dir, cfg, err)
        raise err from exc
    except (OSError, ValueError, KeyError, FloatingPointError) as exc:
        err = StageError(stage.name, exc)
        write_manifest(run_dir, cfg, err)
        raise err from exc
    write_manifest(run_dir, cfg)
    return summary


def reload_run(run_dir):
    """Load the main objects of a finished run directory."""
    run_dir = Path(run_dir)
    graph, _ = read_graph(run_dir / "graph")
    vocab = read_vocab(run_dir / "vocab.json")
    base = TokenPolicy.load(run_dir / "policy_base.json", vocab)
    mu = TokenPolicy.load(run_dir / "policy_pref.json", vocab)
    walks = load_trajectories(run_dir / "walks.jsonl", graph)
    return {"graph": graph, "vocab": vocab, "base": base, "mu": mu, "walks": walks}
