"""Seed derivation, config digests, manifests, atomic writes, CLI exit codes."""

import hashlib
import json
from pathlib import Path

import numpy as np
import pytest

from advtiles.cli import main
from advtiles.harness import (
    ConfigError,
    ExperimentConfig,
    StageError,
    atomic_write_bytes,
    canonical_json,
    config_digest,
    derive_seed,
    load_config_file,
    run,
    seed_stream,
)


def test_seed_stream_reproducible():
    a = seed_stream(42, "attack", 7)
    b = seed_stream(42, "attack", 7)
    assert np.array_equal(a.random(16), b.random(16))


def test_seed_stream_index_distinctness():
    # 1,000 derivations must give pairwise-distinct seeds and streams
    seeds = [derive_seed(42, "attack", i) for i in range(1000)]
    assert len(set(seeds)) == 1000
    first = seed_stream(42, "attack", 0).random(64)
    second = seed_stream(42, "attack", 1).random(64)
    assert not np.array_equal(first, second)


def test_seed_stream_stage_sensitivity():
    assert derive_seed(1, "train", 0) != derive_seed(1, "eval", 0)
    assert derive_seed(1, "train", 0) != derive_seed(2, "train", 0)


def test_canonical_json_is_order_insensitive():
    assert canonical_json({"b": 1, "a": [1, 2]}) == canonical_json({"a": [1, 2], "b": 1})


def test_config_digest_stable_and_thread_blind():
    base = ExperimentConfig(kind="synth", out_dir="x", master_seed=3, params={"count": 10})
    same = ExperimentConfig(kind="synth", out_dir="y", master_seed=3, params={"count": 10})
    other = ExperimentConfig(kind="synth", out_dir="x", master_seed=4, params={"count": 10})
    threaded = ExperimentConfig(
        kind="synth", out_dir="x", master_seed=3, threads=8, params={"count": 10}
    )
    assert config_digest(base) == config_digest(same) == config_digest(threaded)
    assert config_digest(base) != config_digest(other)


def test_config_validation():
    with pytest.raises(ConfigError):
        ExperimentConfig(kind="nonsense", out_dir="x")
    with pytest.raises(ConfigError):
        ExperimentConfig(kind="synth", out_dir="x", threads=0)


def test_load_config_toml_and_json(tmp_path):
    toml_path = tmp_path / "exp.toml"
    toml_path.write_text('kind = "synth"\nmaster_seed = 9\n[params]\ncount = 12\n')
    cfg = load_config_file(toml_path)
    assert cfg.kind == "synth" and cfg.master_seed == 9 and cfg.params["count"] == 12

    json_path = tmp_path / "exp.json"
    json_path.write_text(json.dumps({"kind": "train", "params": {"epochs": 1}}))
    cfg = load_config_file(json_path)
    assert cfg.kind == "train" and cfg.params == {"epochs": 1}

    bad = tmp_path / "bad.toml"
    bad.write_text('master_seed = 1\n')
    with pytest.raises(ConfigError):
        load_config_file(bad)


def test_atomic_write(tmp_path):
    target = tmp_path / "deep" / "file.txt"
    atomic_write_bytes(target, b"payload")
    assert target.read_bytes() == b"payload"
    assert list(tmp_path.rglob("*.tmp.*")) == []


def _synth_run(tmp_path, name, seed=3, **params):
    config = ExperimentConfig(
        kind="synth",
        out_dir=str(tmp_path / name),
        master_seed=seed,
        params={"count": 16, "tile_size": 64, "water_probability": 0.2, **params},
    )
    return config, run(config)


def test_synth_manifest_self_describing(tmp_path):
    config, manifest = _synth_run(tmp_path, "a")
    out = Path(config.out_dir)
    assert (out / "manifest.json").exists()
    assert manifest.artifacts
    for artifact in manifest.artifacts:
        blob = (out / artifact["path"]).read_bytes()
        assert hashlib.sha256(blob).hexdigest() == artifact["sha256"]


def test_synth_rerun_is_byte_identical(tmp_path):
    _, first = _synth_run(tmp_path, "a")
    _, second = _synth_run(tmp_path, "b")
    by_path_a = {a["path"]: a["sha256"] for a in first.artifacts}
    by_path_b = {a["path"]: a["sha256"] for a in second.artifacts}
    assert by_path_a == by_path_b
    assert first.config_digest == second.config_digest


def test_stage_failure_cleans_partial_outputs(tmp_path):
    config = ExperimentConfig(
        kind="train",
        out_dir=str(tmp_path / "boom"),
        master_seed=1,
        params={"count": 16, "epochs": 2, "learning_rate": 1e12},
    )
    with pytest.raises(StageError, match="train"):
        run(config)
    leftovers = [p for p in Path(config.out_dir).rglob("*") if p.is_file()]
    assert leftovers == []


def test_run_train_then_attack_cli(tmp_path):
    assert main([
        "synth", "--seed", "5", "--out", str(tmp_path / "s"),
        "-p", "count=20", "-p", "tile_size=64",
    ]) == 0
    assert main([
        "train", "--seed", "5", "--out", str(tmp_path / "t"),
        "-p", f"corpus_dir={tmp_path / 's' / 'corpus'}", "-p", "epochs=2",
    ]) == 0
    assert main([
        "attack", "--method", "fgsm", "--epsilon", "0.2",
        "--model", str(tmp_path / "t" / "model"),
        "--data", str(tmp_path / "s" / "corpus"),
        "--out", str(tmp_path / "r"), "--seed", "1",
    ]) == 0
    report = json.loads((tmp_path / "r" / "report.json").read_text())
    assert report["method"] == "fgsm"
    assert {"tn", "fp", "fn", "tp"} <= set(report["confusion"])
    assert all({"index", "success", "linf", "l2", "ms"} <= set(r) for r in report["per_image"])


def test_cli_exit_codes(tmp_path, capsys):
    assert main(["synth", "--out", str(tmp_path / "x"), "-p", "palette=not_a_palette"]) == 2
    assert main([
        "attack", "--method", "fgsm", "--model", str(tmp_path / "missing"),
        "--data", str(tmp_path / "nope"), "--out", str(tmp_path / "r"),
    ]) == 2
    config = tmp_path / "cfg.toml"
    config.write_text('kind = "train"\n[params]\nepochs = 2\nlearning_rate = 1e12\ncount = 16\n')
    assert main(["train", "--config", str(config), "--out", str(tmp_path / "y")]) == 3


def test_report_command_round_trip(tmp_path, capsys):
    from advtiles.metrics import ConfusionMatrix, emit_table, weighted_prf

    cm = ConfusionMatrix(8, 2, 1, 19)
    blob = emit_table([("baseline", cm, weighted_prf(cm), 6.7)], "json")
    table = tmp_path / "table.json"
    table.write_bytes(blob)
    assert main(["report", "--table", str(table), "--format", "csv"]) == 0
    out = capsys.readouterr().out
    assert "baseline,8,2,1,19,0.90,0.90,0.90" in out
    target = tmp_path / "rendered.csv"
    assert main(["report", "--table", str(table), "--format", "csv", "--out", str(target)]) == 0
    assert target.read_bytes().decode().splitlines()[1].startswith("baseline,8,2,1,19")


def test_cache_env_var_resolves_relative_out(tmp_path, monkeypatch):
    monkeypatch.setenv("ADVTILES_CACHE", str(tmp_path / "cache"))
    monkeypatch.chdir(tmp_path)
    assert main(["synth", "--out", "rel", "-p", "count=8", "-p", "tile_size=64"]) == 0
    assert (tmp_path / "cache" / "rel" / "manifest.json").exists()


def test_evasion_pipeline_deterministic_across_threads(tmp_path):
    params = {"count": 40, "tile_size": 64, "epochs": 2, "epsilons": [0.3], "pgd_steps": 4}

    def run_once(name, threads):
        config = ExperimentConfig(
            kind="evasion",
            out_dir=str(tmp_path / name),
            master_seed=11,
            threads=threads,
            params=params,
        )
        run(config)
        return (tmp_path / name / "table.csv").read_bytes()

    first = run_once("t1", 1)
    again = run_once("t1b", 1)
    threaded = run_once("t8", 4)
    assert first == again == threaded
