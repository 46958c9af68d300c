"""Command-line entry point.

Exit codes: 0 success, 1 invalid input or configuration, 2 runtime failure,
3 a verification check failed.
"""
from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

EXIT_OK, EXIT_VALIDATION, EXIT_RUNTIME, EXIT_VERIFY = 0, 1, 2, 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_VALIDATION, f"{self.prog}: error: {message}\n")


def _emit(obj) -> None:
    sys.stdout.write(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _hops(values):
    lo, hi = values
    return (lo, hi)


# handlers -------------------------------------------------------------------


def cmd_gen_kg(a):
    from .config import GraphSection
    from .pipeline import stage_graph

    if a.triples:
        section = GraphSection(source="files", triples=a.triples, entity_labels=a.entity_labels, relation_labels=a.relation_labels)
    elif a.synthetic:
        n, r, e = a.synthetic
        section = GraphSection(source="synthetic", num_entities=n, num_relations=r, edges_per_entity=e, relation_skew=a.skew)
    else:
        section = GraphSection(source="chain", labels=tuple(a.chain.split(",")), relation_label=a.relation_label)
    g = stage_graph(section, a.out, Path, a.seed)
    _emit({"entities": g.num_entities, "relations": g.num_relations, "edges": len(g.edges), "out": a.out})


def cmd_walk(a):
    from .pipeline import read_graph, stage_walks

    graph, _ = read_graph(a.graph)
    walks = stage_walks(graph, a.count, _hops(a.hops), a.seed, a.out, a.no_revisit)
    _emit({"walks": len(walks), "out": a.out})


def cmd_verbalize(a):
    from .pipeline import load_templates, read_graph, stage_verbalize
    from .walk import load_trajectories

    graph, _ = read_graph(a.graph)
    walks = load_trajectories(a.walks, graph)
    Path(a.out).mkdir(parents=True, exist_ok=True)
    vocab, eps = stage_verbalize(graph, walks, load_templates(graph, a.templates), a.out)
    _emit({"episodes": len(eps), "vocab_size": len(vocab), "out": a.out})


def cmd_reward(a):
    from .pipeline import load_templates, read_graph, read_vocab, stage_reward
    from .preference import reward_distribution
    from .walk import load_trajectories

    graph, _ = read_graph(a.graph)
    walks = load_trajectories(a.walks, graph)
    rset = stage_reward(
        graph, walks, load_templates(graph, a.templates), read_vocab(a.vocab),
        a.noise, a.k_q, a.seed, a.out, a.histogram,
    )
    _emit({"trajectories": len(rset), "histogram": {repr(k): v for k, v in reward_distribution(rset).items()}})


def cmd_train_pref(a):
    from .pipeline import read_graph, read_vocab, stage_train_pref
    from .preference import RewardedTrajectorySet

    graph, _ = read_graph(a.graph)
    rset = RewardedTrajectorySet.load(a.rewards, graph)
    Path(a.out).mkdir(parents=True, exist_ok=True)
    _, _, info = stage_train_pref(rset, read_vocab(a.vocab), a.k, a.smoothing, a.lr, a.epochs, a.out)
    _emit(info)


def _policies(a, vocab):
    from .policy import TokenPolicy

    mu = TokenPolicy.load(a.pref, vocab)
    base = TokenPolicy.load(a.base, vocab)
    return mu, base


def cmd_log(a):
    from .pipeline import load_templates, read_graph, read_vocab, stage_log

    graph, _ = read_graph(a.graph)
    vocab = read_vocab(a.vocab)
    mu, base = _policies(a, vocab)
    ds = stage_log(graph, load_templates(graph, a.templates), vocab, mu, base, a.count, _hops(a.hops), a.seed, a.out)
    _emit({"episodes": len(ds), "tokens": int(len(ds.tokens)), "out": a.out})


def _estimator_config(a):
    from .estimator import EstimatorConfig

    return EstimatorConfig(delta=a.delta, weight_cap=a.weight_cap, reward_floor=a.reward_floor)


def cmd_evaluate(a):
    from .episodes import load_dataset
    from .pipeline import evaluate_all, read_vocab, stage_evaluate
    from .policy import TokenPolicy

    vocab = read_vocab(a.vocab)
    mu, base = _policies(a, vocab)
    ds = load_dataset(a.dataset, vocab, mu, base)
    target = TokenPolicy.load(a.target, vocab)
    cfg = _estimator_config(a)
    if a.out:
        report = stage_evaluate(ds, target, mu, base, cfg, a.out, a.terms)
    else:
        report, _ = evaluate_all(ds, target, mu, base, cfg)
    _emit(report)


def cmd_optimize(a):
    from .episodes import load_dataset
    from .optimizer import OptimizerConfig
    from .pipeline import read_vocab, stage_optimize
    from .policy import TokenPolicy

    vocab = read_vocab(a.vocab)
    mu, base = _policies(a, vocab)
    ds = load_dataset(a.dataset, vocab, mu, base)
    init = TokenPolicy.load(a.init, vocab) if a.init else base.clone_as("target")
    cfg = OptimizerConfig(learning_rate=a.lr, steps=a.steps, max_backtracks=a.max_backtracks, kl_threshold=a.kl_threshold, seed=a.seed)
    Path(a.out).mkdir(parents=True, exist_ok=True)
    run = stage_optimize(ds, init, mu, base, cfg, _estimator_config(a), a.out)
    d = run.to_dict()
    d.pop("trace")
    _emit(d)


def cmd_stats(a):
    from .graph import edge_relation_share, trajectory_stats
    from .pipeline import read_graph, stage_stats
    from .walk import load_trajectories

    graph, _ = read_graph(a.graph)
    walks = load_trajectories(a.walks, graph)
    if a.out:
        stats = stage_stats(graph, walks, a.out)
    else:
        stats = trajectory_stats(graph, walks).to_dict()
    stats["edge_top_decile_share_relations"] = edge_relation_share(graph)
    _emit(stats)


def cmd_verify(a):
    from .verify import builtin_instance, coverage_experiment, decomposition_consistency, enumerate_expectation, monte_carlo_check

    inst = builtin_instance(a.instance)
    if a.check == "unbiasedness":
        rep = enumerate_expectation(inst)
        mc = monte_carlo_check(inst, a.samples, a.seed, value=rep.true_value)
        out = {**rep.to_dict(), "monte_carlo": {"mean": mc.mean, "standard_error": mc.standard_error, "z": mc.z}}
        ok = rep.gap <= a.tolerance and mc.passed
    elif a.check == "coverage":
        rep = coverage_experiment(inst, a.replications, a.n, a.delta, a.seed, a.variance_replications)
        out = rep.to_dict()
        ok = rep.fraction_covered >= 1.0 - a.delta
    else:
        rep = decomposition_consistency(inst, seed=a.seed)
        out = rep.to_dict()
        ok = rep.passed
    out["passed"] = ok
    _emit(out)
    return EXIT_OK if ok else EXIT_VERIFY


def cmd_run(a):
    from .config import bundled_config_path, load_config
    from .pipeline import run_pipeline

    path = a.config if a.config else bundled_config_path("toy-chain")
    cfg = load_config(path)
    summary = run_pipeline(cfg, a.out)
    _emit(summary)
    return EXIT_OK if summary["verify_passed"] else EXIT_VERIFY


# parser ---------------------------------------------------------------------


def _add_estimator_args(p):
    p.add_argument("--delta", type=float, default=0.05, help="confidence level parameter in (0, 1)")
    p.add_argument("--weight-cap", type=float, default=None, help="truncate importance ratios at this value")
    p.add_argument("--reward-floor", type=float, default=-20.0, help="lower clip for base log-likelihood rewards")


def _add_policy_args(p):
    p.add_argument("--vocab", required=True, help="vocab.json written by verbalize")
    p.add_argument("--pref", required=True, help="preference policy JSON")
    p.add_argument("--base", required=True, help="base policy JSON")


def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="cotope", description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--threads", type=int, default=None, help="cap on numerical library worker threads")
    sub = ap.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen-kg", help="write a graph as triples.tsv, entities.tsv, relations.tsv")
    src = p.add_mutually_exclusive_group()
    src.add_argument("--chain", default="a,b,c", help="comma-separated labels of a single-relation chain")
    src.add_argument("--synthetic", type=int, nargs=3, metavar=("ENTITIES", "RELATIONS", "EDGES_PER_ENTITY"))
    src.add_argument("--triples", help="existing triple TSV to validate and copy")
    p.add_argument("--entity-labels")
    p.add_argument("--relation-labels")
    p.add_argument("--relation-label", default="to")
    p.add_argument("--skew", type=float, default=0.0, help="power-law exponent over relation choice")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_gen_kg)

    p = sub.add_parser("walk", help="sample random walks to walks.jsonl")
    p.add_argument("--graph", required=True, help="graph directory")
    p.add_argument("--count", type=int, default=200)
    p.add_argument("--hops", type=int, nargs=2, default=(2, 4), metavar=("MIN", "MAX"))
    p.add_argument("--no-revisit", action="store_true")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_walk)

    p = sub.add_parser("verbalize", help="write templates.json, vocab.json and episodes.jsonl into a directory")
    p.add_argument("--graph", required=True)
    p.add_argument("--walks", required=True)
    p.add_argument("--templates", help="YAML or JSON template file; default uses relation labels")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_verbalize)

    p = sub.add_parser("reward", help="score walks with the self-consistency oracle")
    p.add_argument("--graph", required=True)
    p.add_argument("--walks", required=True)
    p.add_argument("--templates")
    p.add_argument("--vocab", required=True)
    p.add_argument("--noise", type=float, default=0.3)
    p.add_argument("--k-q", type=int, default=10)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--histogram", help="optional CSV of reward counts")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_reward)

    p = sub.add_parser("train-pref", help="fit the base policy and train the preference policy")
    p.add_argument("--graph", required=True)
    p.add_argument("--rewards", required=True)
    p.add_argument("--vocab", required=True)
    p.add_argument("--k", type=int, default=1, help="Markov context order")
    p.add_argument("--smoothing", type=float, default=1.0)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--epochs", type=int, default=10)
    p.add_argument("--out", required=True, help="directory for policy_base.json, policy_pref.json and the training log")
    p.set_defaults(func=cmd_train_pref)

    p = sub.add_parser("log", help="log behavior episodes with cached propensities")
    p.add_argument("--graph", required=True)
    p.add_argument("--templates")
    _add_policy_args(p)
    p.add_argument("--count", type=int, default=200)
    p.add_argument("--hops", type=int, nargs=2, default=(2, 4), metavar=("MIN", "MAX"))
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_log)

    p = sub.add_parser("evaluate", help="estimate a target policy's value; JSON on stdout")
    p.add_argument("--dataset", required=True)
    p.add_argument("--target", required=True)
    _add_policy_args(p)
    _add_estimator_args(p)
    p.add_argument("--out", help="also write the report here")
    p.add_argument("--terms", help="CSV of per-episode terms (with --out)")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("optimize", help="gradient ascent on the estimated value")
    p.add_argument("--dataset", required=True)
    _add_policy_args(p)
    p.add_argument("--init", help="initial target policy; default clones the base policy")
    p.add_argument("--lr", type=float, default=0.05)
    p.add_argument("--steps", type=int, default=100)
    p.add_argument("--max-backtracks", type=int, default=20)
    p.add_argument("--kl-threshold", type=float, default=0.05)
    p.add_argument("--seed", type=int, default=0)
    _add_estimator_args(p)
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_optimize)

    p = sub.add_parser("verify", help="run an oracle check on a bundled instance")
    p.add_argument("check", choices=("unbiasedness", "coverage", "decomposition"))
    p.add_argument("--instance", default="toy-chain")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--samples", type=int, default=100_000, help="Monte Carlo cross-check size")
    p.add_argument("--tolerance", type=float, default=1e-10)
    p.add_argument("--replications", type=int, default=1000)
    p.add_argument("--variance-replications", type=int, default=500)
    p.add_argument("--n", type=int, default=500)
    p.add_argument("--delta", type=float, default=0.05)
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("stats", help="relation and entity frequency statistics of a walk set")
    p.add_argument("--graph", required=True)
    p.add_argument("--walks", required=True)
    p.add_argument("--out")
    p.set_defaults(func=cmd_stats)

    p = sub.add_parser("run", help="run the full pipeline from a YAML config")
    p.add_argument("--config", help="config file; default is the bundled toy-chain config")
    p.add_argument("--out", help="run directory; default is the config's output_dir")
    p.set_defaults(func=cmd_run)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.threads is not None:
        if args.threads < 1:
            sys.stderr.write("cotope: error: --threads must be positive\n")
            return EXIT_VALIDATION
        for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
            os.environ[var] = str(args.threads)

    from .errors import (
        ArgumentError,
        ConfigurationError,
        CotopeError,
        GraphIntegrityError,
        StageError,
        TripleParseError,
        ValidationError,
    )

    validation = (ArgumentError, ConfigurationError, GraphIntegrityError, TripleParseError, ValidationError)
    try:
        code = args.func(args)
    except StageError as exc:
        sys.stderr.write(f"cotope: {exc}\n")
        return EXIT_VALIDATION if isinstance(exc.cause, validation) else EXIT_RUNTIME
    except validation as exc:
        sys.stderr.write(f"cotope: invalid input: {exc}\n")
        return EXIT_VALIDATION
    except FileNotFoundError as exc:
        sys.stderr.write(f"cotope: {exc}\n")
        return EXIT_VALIDATION
    except (CotopeError, OSError, ValueError, KeyError) as exc:
        sys.stderr.write(f"cotope: {type(exc).__name__}: {exc}\n")
        return EXIT_RUNTIME
    return EXIT_OK if code is None else code


if __name__ == "__main__":
    sys.exit(main())
