import json
import subprocess
import sys

import pytest
import yaml

from cotope.cli import main
from cotope.config import bundled_config_path, load_config
from cotope.pipeline import run_pipeline, stage_seeds


def run(argv, capsys):
    code = main([str(a) for a in argv])
    out = capsys.readouterr().out
    return code, out


def test_verify_unbiasedness_exit_zero(capsys):
    code, out = run(["verify", "unbiasedness", "--instance", "toy-chain", "--samples", "20000"], capsys)
    assert code == 0
    rep = json.loads(out)
    assert rep["passed"] and rep["gap"] <= 1e-10


def test_verify_failure_exit_three(capsys):
    # an impossible tolerance forces the check to fail
    code, _ = run(["verify", "unbiasedness", "--instance", "toy-chain-divergent", "--tolerance", "-1", "--samples", "1000"], capsys)
    assert code == 3


def test_argument_errors_exit_one(capsys):
    with pytest.raises(SystemExit) as info:
        main(["walk"])
    assert info.value.code == 1
    assert main(["--threads", "0", "stats", "--graph", "x", "--walks", "y"]) == 1


def test_bad_config_exit_one(tmp_path, capsys):
    p = tmp_path / "c.yaml"
    p.write_text(yaml.safe_dump({"estimator": {"delta": 1.5}}))
    code = main(["run", "--config", str(p)])
    assert code == 1
    assert "delta" in capsys.readouterr().err


def test_missing_input_exit_one(tmp_path, capsys):
    code, _ = run(["walk", "--graph", tmp_path / "absent", "--out", tmp_path / "w.jsonl"], capsys)
    assert code == 1


def test_module_entry_point(tmp_path):
    out = subprocess.run(
        [sys.executable, "-m", "cotope.cli", "gen-kg", "--chain", "a,b,c", "--out", str(tmp_path)],
        capture_output=True, text=True,
    )
    assert out.returncode == 0
    assert json.loads(out.stdout)["edges"] == 2


@pytest.fixture(scope="module")
def reference_run(tmp_path_factory):
    cfg = load_config(bundled_config_path())
    out = tmp_path_factory.mktemp("ref")
    run_pipeline(cfg, out)
    return cfg, out


def test_subcommands_reproduce_pipeline(reference_run, tmp_path, capsys):
    cfg, ref = reference_run
    seeds = stage_seeds(cfg.seed)
    d = tmp_path
    tmpl = cfg.resolve(cfg.templates)
    hops = [str(h) for h in cfg.walks.hop_range]
    steps = [
        ["gen-kg", "--chain", ",".join(cfg.graph.labels), "--relation-label", cfg.graph.relation_label, "--out", d / "graph"],
        ["walk", "--graph", d / "graph", "--count", cfg.walks.count, "--hops", *hops, "--seed", seeds["walks"], "--out", d / "walks.jsonl"],
        ["stats", "--graph", d / "graph", "--walks", d / "walks.jsonl", "--out", d / "graph_stats.json"],
        ["verbalize", "--graph", d / "graph", "--walks", d / "walks.jsonl", "--templates", tmpl, "--out", d],
        ["reward", "--graph", d / "graph", "--walks", d / "walks.jsonl", "--templates", tmpl, "--vocab", d / "vocab.json",
         "--noise", cfg.preference.noise, "--k-q", cfg.preference.k_q, "--seed", seeds["oracle"],
         "--histogram", d / "reward_histogram.csv", "--out", d / "rewards.jsonl"],
        ["train-pref", "--graph", d / "graph", "--rewards", d / "rewards.jsonl", "--vocab", d / "vocab.json",
         "--k", cfg.policy.k, "--smoothing", cfg.policy.smoothing, "--lr", cfg.preference.learning_rate,
         "--epochs", cfg.preference.epochs, "--out", d],
    ]
    pol = ["--vocab", d / "vocab.json", "--pref", d / "policy_pref.json", "--base", d / "policy_base.json"]
    steps += [
        ["log", "--graph", d / "graph", "--templates", tmpl, *pol, "--count", cfg.logging.count,
         "--hops", *[str(h) for h in cfg.logging.hop_range], "--seed", seeds["logging"], "--out", d / "dataset.jsonl"],
        ["optimize", "--dataset", d / "dataset.jsonl", *pol, "--lr", cfg.optimizer.learning_rate, "--steps", cfg.optimizer.steps,
         "--max-backtracks", cfg.optimizer.max_backtracks, "--kl-threshold", cfg.optimizer.kl_threshold,
         "--seed", cfg.seed, "--out", d],
        ["evaluate", "--dataset", d / "dataset.jsonl", "--target", d / "target_initial.json", *pol,
         "--out", d / "estimates.json", "--terms", d / "per_episode_terms.csv"],
    ]
    for argv in steps:
        code, _ = run(argv, capsys)
        assert code == 0, argv[0]
    manifest = json.loads((ref / "manifest.json").read_text())
    compared = 0
    for name, digest in manifest["artifacts"].items():
        if name in ("summary.json", "verify.json"):
            continue
        mine = d / name
        assert mine.is_file(), name
        assert mine.read_bytes() == (ref / name).read_bytes(), name
        compared += 1
    assert compared >= 15


def test_evaluate_prints_json(reference_run, capsys):
    _, ref = reference_run
    pol = ["--vocab", ref / "vocab.json", "--pref", ref / "policy_pref.json", "--base", ref / "policy_base.json"]
    code, out = run(["evaluate", "--dataset", ref / "dataset.jsonl", "--target", ref / "target_final.json", *pol], capsys)
    assert code == 0
    rep = json.loads(out)
    assert set(rep) >= {"kg_ips", "plain_ips", "snips", "decomposition"}
    assert rep["kg_ips"]["ci_radius"] > 0


def test_stats_fields(reference_run, capsys):
    _, ref = reference_run
    code, out = run(["stats", "--graph", ref / "graph", "--walks", ref / "walks.jsonl"], capsys)
    assert code == 0
    rep = json.loads(out)
    for key in ("top_decile_share_relations", "top_decile_share_entities", "edge_top_decile_share_relations"):
        assert 0 <= rep[key] <= 1


def test_run_bundled(tmp_path, capsys):
    code, out = run(["--threads", "1", "run", "--out", tmp_path], capsys)
    assert code == 0
    assert json.loads(out)["verify_passed"]
