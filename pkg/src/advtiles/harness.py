"""Experiment orchestration: canonical configs, derived seeds, atomic outputs.

Every run derives all randomness from (master seed, stage name, item index),
writes artifacts via temp-file rename, and finishes with a manifest listing
each artifact's checksum. Artifacts flagged stable are byte-reproducible
across reruns and thread counts; timing side-channels are not and carry
stable=false.
"""

from __future__ import annotations

import hashlib
import json
import os
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .datasets import (
    PALETTES,
    SynthConfig,
    corpus_arrays,
    load_corpus,
    save_corpus,
    synth_corpus,
)
from .evasion import AttackBudget, evaluate_attack
from .imageops import CannyConfig
from .inference import CandidateDataset, canny_defense_train, iid_transform_property, lowest_loss_attack
from .metrics import emit_table, weighted_prf
from .models import build_desknet, save_model
from .optim import OptimizerConfig
from .train import evaluate_classifier, train_classifier
from .trojan import TrojanGridConfig, grid_to_json, ratio_table_csv, run_trojan_grid

__all__ = [
    "ExperimentConfig",
    "ExperimentManifest",
    "ConfigError",
    "StageError",
    "canonical_json",
    "config_digest",
    "derive_seed",
    "seed_stream",
    "atomic_write_bytes",
    "run",
    "load_config_file",
]

EXPERIMENT_KINDS = ("synth", "train", "evasion", "inference", "defense", "trojan")


class ConfigError(ValueError):
    pass


class StageError(RuntimeError):
    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"stage '{stage}' failed: {cause}")
        self.stage = stage
        self.cause = cause


@dataclass(frozen=True)
class ExperimentConfig:
    kind: str
    out_dir: str
    master_seed: int = 0
    threads: int = 1
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in EXPERIMENT_KINDS:
            raise ConfigError(f"unknown experiment kind '{self.kind}'")
        if self.threads < 1:
            raise ConfigError("threads must be positive")

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "master_seed": self.master_seed,
            "threads": self.threads,
            "params": self.params,
        }


def canonical_json(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode()


def config_digest(config: ExperimentConfig) -> str:
    payload = dict(config.to_dict())
    payload.pop("threads")  # thread count must never affect results
    return hashlib.sha256(canonical_json(payload)).hexdigest()


def derive_seed(master: int, stage: str, index: int = 0) -> int:
    """Collision-resistant (master, stage, index) -> 64-bit seed."""
    digest = hashlib.sha256(f"{master}\x1f{stage}\x1f{index}".encode()).digest()
    return int.from_bytes(digest[:8], "little")


def seed_stream(master: int, stage: str, index: int = 0) -> np.random.Generator:
    return np.random.default_rng(derive_seed(master, stage, index))


def atomic_write_bytes(path: Path, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(f".{path.name}.tmp.{os.getpid()}")
    tmp.write_bytes(data)
    os.replace(tmp, path)


def load_config_file(path) -> ExperimentConfig:
    """Read an experiment config from TOML or JSON."""
    path = Path(path)
    text = path.read_text()
    if path.suffix == ".json":
        raw = json.loads(text)
    else:
        if sys.version_info >= (3, 11):
            import tomllib
        else:
            import tomli as tomllib
        raw = tomllib.loads(text)
    try:
        return ExperimentConfig(
            kind=raw["kind"],
            out_dir=raw.get("out_dir", "out"),
            master_seed=int(raw.get("master_seed", 0)),
            threads=int(raw.get("threads", 1)),
            params=raw.get("params", {}),
        )
    except KeyError as exc:
        raise ConfigError(f"config missing required key {exc}") from exc


@dataclass
class ExperimentManifest:
    kind: str
    config: dict
    config_digest: str
    tool: str
    stage_seeds: dict = field(default_factory=dict)
    wall_seconds: dict = field(default_factory=dict)
    inputs: dict = field(default_factory=dict)
    artifacts: list = field(default_factory=list)

    def to_json(self) -> bytes:
        return json.dumps(
            {
                "kind": self.kind,
                "config": self.config,
                "config_digest": self.config_digest,
                "tool": self.tool,
                "stage_seeds": self.stage_seeds,
                "wall_seconds": self.wall_seconds,
                "inputs": self.inputs,
                "artifacts": self.artifacts,
            },
            indent=2,
            sort_keys=True,
        ).encode()


class _Run:
    """Tracks artifacts so a failed stage can clean up its partial outputs."""

    def __init__(self, config: ExperimentConfig):
        self.config = config
        self.out_dir = Path(config.out_dir)
        self.manifest = ExperimentManifest(
            kind=config.kind,
            config=config.to_dict(),
            config_digest=config_digest(config),
            tool=f"advtiles {__version__}",
        )
        self._written: list[Path] = []

    def seed(self, stage: str, index: int = 0) -> int:
        value = derive_seed(self.config.master_seed, stage, index)
        self.manifest.stage_seeds[f"{stage}[{index}]"] = value
        return value

    def write(self, rel_path: str, data: bytes, stable: bool = True) -> Path:
        path = self.out_dir / rel_path
        atomic_write_bytes(path, data)
        self._written.append(path)
        self.manifest.artifacts.append(
            {"path": rel_path, "sha256": hashlib.sha256(data).hexdigest(), "stable": stable}
        )
        return path

    def register_file(self, rel_path: str, stable: bool = True) -> None:
        """Track a file written by a lower layer (checksummed, cleaned on failure)."""
        path = self.out_dir / rel_path
        data = path.read_bytes()
        self._written.append(path)
        self.manifest.artifacts.append(
            {"path": rel_path, "sha256": hashlib.sha256(data).hexdigest(), "stable": stable}
        )

    def register_tree(self, rel_dir: str, stable: bool = True) -> None:
        root = self.out_dir / rel_dir
        for path in sorted(p for p in root.rglob("*") if p.is_file()):
            self.register_file(str(path.relative_to(self.out_dir)), stable=stable)

    def cleanup(self) -> None:
        for path in self._written:
            try:
                path.unlink()
            except OSError:
                pass

    def finish(self) -> Path:
        manifest_path = self.out_dir / "manifest.json"
        atomic_write_bytes(manifest_path, self.manifest.to_json())
        return manifest_path


def run(config: ExperimentConfig) -> ExperimentManifest:
    """Execute the named experiment; abort with stage name and cleaned-up
    partial outputs on failure."""
    runner = _Run(config)
    handlers = {
        "synth": _run_synth,
        "train": _run_train,
        "evasion": _run_evasion,
        "inference": _run_inference,
        "defense": _run_defense,
        "trojan": _run_trojan,
    }
    stage = config.kind
    started = time.perf_counter()
    try:
        handlers[config.kind](runner)
    except ConfigError:
        runner.cleanup()
        raise
    except Exception as exc:  # noqa: BLE001 - stage errors carry the stage name
        runner.cleanup()
        raise StageError(stage, exc) from exc
    runner.manifest.wall_seconds[stage] = time.perf_counter() - started
    runner.finish()
    return runner.manifest


# ---------------------------------------------------------------------------
# Experiment bodies
# ---------------------------------------------------------------------------


def _synth_config(runner: _Run, params: dict, stage: str = "synth") -> SynthConfig:
    palette = params.get("palette", "urban")
    if isinstance(palette, str) and palette not in PALETTES:
        raise ConfigError(f"unknown palette '{palette}'")
    return SynthConfig(
        count=int(params.get("count", 240)),
        tile_size=int(params.get("tile_size", 64)),
        building_probability=float(params.get("building_probability", 0.5)),
        water_probability=float(params.get("water_probability", 0.0)),
        rect_size_range=tuple(params["rect_size_range"]) if "rect_size_range" in params else None,
        palette=palette,
        seed=runner.seed(stage),
    )


def _load_or_synth(runner: _Run, params: dict):
    if "corpus_dir" in params:
        corpus_dir = Path(params["corpus_dir"])
        manifest_path = corpus_dir / "manifest.json"
        if not manifest_path.exists():
            raise ConfigError(f"corpus dir {corpus_dir} has no manifest.json")
        runner.manifest.inputs[str(manifest_path)] = hashlib.sha256(
            manifest_path.read_bytes()
        ).hexdigest()
        return load_corpus(corpus_dir)
    return synth_corpus(_synth_config(runner, params))


def _optimizer(params: dict) -> OptimizerConfig:
    return OptimizerConfig(
        kind=params.get("optimizer", "sgd_momentum"),
        learning_rate=float(params.get("learning_rate", 1e-2)),
        momentum=float(params.get("momentum", 0.1)),
        decay_factor=float(params.get("decay_factor", 1.0)),
        decay_every=int(params.get("decay_every", 0)),
    )


def _curves_csv(curves: dict) -> bytes:
    lines = ["epoch,train_loss,val_loss,val_accuracy"]
    for i in range(len(curves["train_loss"])):
        lines.append(
            f"{i},{curves['train_loss'][i]:.6f},{curves['val_loss'][i]:.6f},{curves['val_accuracy'][i]:.6f}"
        )
    return ("\n".join(lines) + "\n").encode()


def _run_synth(runner: _Run) -> None:
    corpus = synth_corpus(_synth_config(runner, runner.config.params))
    save_corpus(corpus, runner.out_dir / "corpus")
    runner.register_tree("corpus")


def _run_train(runner: _Run) -> None:
    params = runner.config.params
    corpus = _load_or_synth(runner, params)
    train = corpus_arrays(corpus.train_tiles())
    test = corpus_arrays(corpus.test_tiles())
    model = build_desknet(
        input_size=corpus.tiles[0].height, seed=runner.seed("train-init")
    )
    report = train_classifier(
        model,
        (train, test),
        _optimizer(params),
        epochs=int(params.get("epochs", 6)),
        seed=runner.seed("train-loop"),
    )
    save_model(model, runner.out_dir / "model")
    runner.register_file("model.json")
    runner.register_file("model.bin")
    runner.write("curves.csv", _curves_csv(report.curves()))
    summary = {
        "val_accuracy": report.val_accuracy[-1] if report.val_accuracy else None,
        "epochs": report.epochs,
    }
    runner.write("summary.json", json.dumps(summary, indent=2, sort_keys=True).encode())


def _run_evasion(runner: _Run) -> None:
    """The published-table-shaped sweep: clean baseline + {PGD, FGSM} x eps."""
    params = runner.config.params
    corpus = _load_or_synth(runner, params)
    train = corpus_arrays(corpus.train_tiles())
    test = corpus_arrays(corpus.test_tiles())
    model = build_desknet(input_size=corpus.tiles[0].height, seed=runner.seed("train-init"))
    train_classifier(
        model,
        (train, test),
        _optimizer(params),
        epochs=int(params.get("epochs", 6)),
        seed=runner.seed("train-loop"),
    )
    model.eval()
    images, labels = test
    epsilons = [float(e) for e in params.get("epsilons", (0.3, 0.5, 1.0))]
    steps = int(params.get("pgd_steps", 10))
    rows = []
    timings = {}
    reports = {}
    cm, records, seconds = evaluate_attack(
        model, images, labels, "none", AttackBudget(epsilon=0.0), threads=runner.config.threads
    )
    rows.append(("Classifier Baseline Performance", cm, weighted_prf(cm), None))
    timings["baseline"] = seconds
    reports["baseline"] = {"confusion": cm.__dict__, "per_image": records}
    for method in ("pgd", "fgsm"):
        for eps in epsilons:
            budget = AttackBudget(
                epsilon=eps, alpha=min(0.05, eps / 4) if method == "pgd" else eps, num_steps=steps
            )
            cm, records, seconds = evaluate_attack(
                model,
                images,
                labels,
                method,
                budget,
                threads=runner.config.threads,
                master_seed=runner.seed(f"attack-{method}", int(eps * 1000)),
            )
            label = f"{method.upper()} Attack Perturbation = {eps:g}"
            rows.append((label, cm, weighted_prf(cm), None))
            timings[f"{method}_{eps:g}"] = seconds
            key = f"{method}_{eps:g}"
            reports[key] = {"confusion": cm.__dict__, "per_image": records}
    runner.write("table.csv", emit_table(rows, "csv"))
    runner.write("table.md", emit_table(rows, "markdown"))
    runner.write("table.json", emit_table(rows, "json"))
    runner.write(
        "timings.json", json.dumps(timings, indent=2, sort_keys=True).encode(), stable=False
    )
    runner.write(
        "attack_reports.json", json.dumps(reports, indent=2, sort_keys=True).encode(), stable=False
    )


def _candidates(runner: _Run, params: dict) -> list[CandidateDataset]:
    names = params.get("candidates", ("verdant", "urban", "desert"))
    count = int(params.get("count", 200))
    fraction = float(params.get("test_fraction", 0.4))
    out = []
    for k, name in enumerate(names):
        cfg = SynthConfig(
            count=count,
            tile_size=int(params.get("tile_size", 64)),
            palette=name,
            building_probability=0.5,
            seed=runner.seed("candidate", k),
        )
        out.append(CandidateDataset(name=name, corpus=synth_corpus(cfg, test_fraction=fraction)))
    return out


def _train_candidate_models(runner, params, candidates, defended: bool):
    epochs = int(params.get("epochs", 6))
    models = []
    for k, cand in enumerate(candidates):
        stage = "defense-train" if defended else "model-train"
        seed = runner.seed(stage, k)
        spec = {"input_size": int(params.get("tile_size", 64)), "seed": seed % 2**31}
        if defended:
            model, _ = canny_defense_train(
                spec, cand, CannyConfig(), _optimizer(params), epochs=epochs, seed=seed % 2**31
            )
        else:
            model = build_desknet(**spec)
            train_classifier(
                model,
                (cand.train_arrays(), cand.test_arrays()),
                _optimizer(params),
                epochs=epochs,
                seed=seed % 2**31,
            )
            model.eval()
        models.append((model, cand.name))
    return models


def _run_inference(runner: _Run) -> None:
    params = runner.config.params
    candidates = _candidates(runner, params)
    models = _train_candidate_models(runner, params, candidates, defended=False)
    verdict = lowest_loss_attack(models, candidates)
    runner.write("loss_matrix.csv", verdict.to_csv())
    runner.write("verdict.json", json.dumps(verdict.to_dict(), indent=2, sort_keys=True).encode())


def _run_defense(runner: _Run) -> None:
    params = runner.config.params
    candidates = _candidates(runner, params)
    undefended = _train_candidate_models(runner, params, candidates, defended=False)
    defended = _train_candidate_models(runner, params, candidates, defended=True)
    verdict = lowest_loss_attack(undefended, candidates)
    defended_verdict = lowest_loss_attack(defended, candidates, defense_enabled=True)
    ablation = lowest_loss_attack(
        defended, candidates, transform=CannyConfig(), defense_enabled=True
    )
    accuracies = {}
    for (model, name), cand in zip(undefended, candidates):
        images, labels = cand.test_arrays()
        _, acc = evaluate_classifier(model, images, labels)
        accuracies.setdefault(name, {})["undefended"] = acc
    for (model, name), cand in zip(defended, candidates):
        images, labels = cand.test_arrays()
        _, acc_orig = evaluate_classifier(model, images, labels)
        eimages, elabels = cand.test_arrays(transform=CannyConfig())
        _, acc_edge = evaluate_classifier(model, eimages, elabels)
        accuracies.setdefault(name, {})["defended_on_original"] = acc_orig
        accuracies.setdefault(name, {})["defended_on_edges"] = acc_edge
    comparison = {
        "undefended": verdict.to_dict(),
        "defended": defended_verdict.to_dict(),
        "defended_ablation_on_edges": ablation.to_dict(),
        "test_accuracy": accuracies,
        "transform_diagnostic": iid_transform_property(candidates, CannyConfig()),
    }
    runner.write("loss_matrix_undefended.csv", verdict.to_csv())
    runner.write("loss_matrix_defended.csv", defended_verdict.to_csv())
    runner.write("defense_report.json", json.dumps(comparison, indent=2, sort_keys=True).encode())


def _run_trojan(runner: _Run) -> None:
    params = runner.config.params
    cfg = TrojanGridConfig(
        ratios=tuple(float(r) for r in params.get("ratios", (0.01, 0.10, 0.15, 0.30))),
        methods=tuple(params.get("methods", ("pgd", "gan"))),
        tile_size=int(params.get("tile_size", 64)),
        corpus_count=int(params.get("count", 400)),
        water_probability=float(params.get("water_probability", 0.08)),
        patch_shape=tuple(params.get("patch_shape", (8, 8))),
        blend_mode=params.get("blend_mode", "direct"),
        alpha=params.get("alpha"),
        epochs=int(params.get("epochs", 6)),
        gan_epochs=int(params.get("gan_epochs", 2)),
        pgd_steps=int(params.get("pgd_steps", 150)),
        master_seed=runner.seed("trojan-grid"),
        convergence_factor=float(params.get("convergence_factor", 0.8)),
    )
    baseline, reports, manifests = run_trojan_grid(cfg)
    runner.write("table2.csv", ratio_table_csv(reports, "trojan", cfg.ratios, cfg.methods))
    runner.write("table3.csv", ratio_table_csv(reports, "benign", cfg.ratios, cfg.methods))
    runner.write("grid.json", grid_to_json(baseline, reports))
    runner.write(
        "poison_manifests.json", json.dumps(manifests, indent=2, sort_keys=True).encode()
    )
    for report in reports:
        runner.write(f"curves_{report.cell}.csv", _curves_csv(report.curves))
