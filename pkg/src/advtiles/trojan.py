"""Clean-label trojan poisoning: patch generation, dataset poisoning at fixed
ratios, retraining, and trojan/benign accuracy reporting.

Protocol: the trigger is pixel-identical across every poisoned tile (an
optional jitter knob exists to break that deliberately), training labels are
never touched, patches land only on no-building non-water training tiles, and
trojan accuracy is measured on building-labeled test tiles with the patch
placed inside building polygons.
"""

from __future__ import annotations

import io
import json
from dataclasses import dataclass, field

import numpy as np

from .datasets import SynthConfig, TileCorpus, corpus_arrays, synth_corpus
from .evasion import AttackBudget
from .imageops import ImageTile, BlendConfig, _norm_constants, blend, resize_bilinear
from .layers import Model
from .models import build_advgan_discriminator, build_advgan_generator, build_desknet
from .optim import OptimizerConfig
from .placement import PlacementConfig, WaterFilterConfig, is_water, place_patch
from .tensor import Tensor
from .train import TrainReport, evaluate_classifier, nll_loss, train_classifier, train_gan

__all__ = [
    "TrojanPatch",
    "PoisonPlan",
    "TrojanReport",
    "TrojanGridConfig",
    "generate_pgd_patch",
    "generate_gan_patch",
    "poison_dataset",
    "evaluate_trojan",
    "run_trojan_grid",
]

TARGET_CLASS = 0  # the attacker wants buildings to read as no_building


@dataclass
class TrojanPatch:
    pixels: np.ndarray  # (h, w, c) in [0, 1]
    method: str = "fixed"  # pgd_patch | gan_patch | fixed
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        self.pixels = np.asarray(self.pixels, dtype=np.float64)
        if self.pixels.ndim == 2:
            self.pixels = self.pixels[:, :, None]
        if self.pixels.min() < 0.0 or self.pixels.max() > 1.0:
            raise ValueError("patch pixels must lie in [0, 1]")

    @property
    def shape(self) -> tuple[int, int]:
        return self.pixels.shape[0], self.pixels.shape[1]


@dataclass(frozen=True)
class PoisonPlan:
    ratio: float
    patch: TrojanPatch
    blend: BlendConfig
    placement: PlacementConfig
    seed: int = 0
    jitter: float = 0.0  # per-tile trigger noise; breaks the fixed-trigger protocol

    def __post_init__(self):
        if not 0.0 < self.ratio < 1.0:
            raise ValueError("poison ratio must be in (0, 1)")
        if self.jitter < 0:
            raise ValueError("jitter must be non-negative")


@dataclass
class TrojanReport:
    cell: str
    ratio: float
    method: str
    baseline_accuracy: float
    benign_accuracy: float
    trojan_accuracy: float
    benign_ratio: float
    trojan_ratio: float
    per_class_benign: dict
    trojan_eval_count: int
    trojan_eval_skipped: int
    converged: bool
    curves: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}


# ---------------------------------------------------------------------------
# Patch generation
# ---------------------------------------------------------------------------


def _center_crop(pixels: np.ndarray, h: int, w: int) -> np.ndarray:
    ph, pw = pixels.shape[:2]
    if ph < h or pw < w:
        raise ValueError(f"cannot crop {h}x{w} patch out of {ph}x{pw} source")
    top, left = (ph - h) // 2, (pw - w) // 2
    return pixels[top : top + h, left : left + w].copy()


def generate_pgd_patch(
    source_model: Model,
    seed_image: ImageTile | np.ndarray | None,
    budget: AttackBudget,
    patch_shape: tuple[int, int] = (32, 32),
    context_tiles: list[ImageTile] | None = None,
    seed: int = 0,
    source_val: tuple[np.ndarray, np.ndarray] | None = None,
    batch_size: int = 8,
) -> TrojanPatch:
    """Optimize a patch as a sign-step evasion attack against a stand-in model.

    Each step overlays the patch at random positions on sampled building
    tiles and descends toward the no_building class, so the patch works as an
    overlay rather than only in its seed position. With a normalized-space
    budget, epsilon and alpha are interpreted in normalized units and mapped
    back through the per-channel deviations.
    """
    if source_model.training:
        raise ValueError("source model must be in eval mode")
    if source_val is not None:
        _, acc = evaluate_classifier(source_model, source_val[0], source_val[1])
        if acc < 0.7:
            raise ValueError(f"source model untrained: accuracy {acc:.2f} < 0.7 on its own val set")
    rng = np.random.default_rng([seed, 0x9D])
    h, w = patch_shape
    if seed_image is None:
        base = rng.random((h, w, 3))
    else:
        pixels = seed_image.pixels if isinstance(seed_image, ImageTile) else np.asarray(seed_image)
        base = _center_crop(pixels, h, w)
    if context_tiles is None:
        if seed_image is None:
            raise ValueError("need a seed image or context tiles to optimize against")
        context_tiles = [seed_image if isinstance(seed_image, ImageTile) else ImageTile(pixels=seed_image)]

    channels = context_tiles[0].channels
    if base.shape[2] != channels:
        base = np.repeat(base[:, :, :1], channels, axis=2)
    # epsilon follows the budget's space; alpha is always a pixel-space step,
    # matching how sign-step attacks are conventionally parameterized
    if budget.normalized_space:
        _, std = _norm_constants(channels)
        eps_pixel = budget.epsilon * std
    else:
        eps_pixel = np.full(channels, budget.epsilon)
    alpha_pixel = np.full(channels, budget.alpha)

    patch = base.copy()
    direct = BlendConfig(mode="direct")
    for _ in range(budget.num_steps):
        picks = rng.integers(0, len(context_tiles), size=min(batch_size, len(context_tiles)))
        composites, regions = [], []
        for k in picks:
            tile = context_tiles[int(k)]
            row = int(rng.integers(0, tile.height - h + 1))
            col = int(rng.integers(0, tile.width - w + 1))
            composites.append(blend(tile, patch, (row, col), direct).pixels.transpose(2, 0, 1))
            regions.append((row, col))
        x = Tensor(np.stack(composites), requires_grad=True)
        loss = nll_loss(source_model.forward(x), [TARGET_CLASS] * len(picks))
        loss.backward()
        grad = x.grad.transpose(0, 2, 3, 1)
        patch_grad = np.zeros_like(patch)
        for g, (row, col) in zip(grad, regions):
            patch_grad += g[row : row + h, col : col + w]
        # descend toward the target class with per-channel sign steps
        patch = patch - alpha_pixel[None, None, :] * np.sign(patch_grad)
        delta = np.clip(patch - base, -eps_pixel[None, None, :], eps_pixel[None, None, :])
        patch = np.clip(base + delta, 0.0, 1.0)
    return TrojanPatch(
        pixels=patch,
        method="pgd_patch",
        provenance={
            "source_architecture": source_model.architecture_id,
            "epsilon": budget.epsilon,
            "alpha": budget.alpha,
            "steps": budget.num_steps,
            "normalized_space": budget.normalized_space,
            "seed": seed,
        },
    )


def generate_gan_patch(
    generator: Model, noise_seed: int, patch_shape: tuple[int, int] = (32, 32)
) -> TrojanPatch:
    """Forward a seeded 100-dim noise vector, rescale tanh output to [0, 1],
    center-crop to the patch dims."""
    if generator.training:
        raise ValueError("generator must be in eval mode")
    noise = np.random.default_rng(noise_seed).standard_normal((1, 100))
    out = generator.forward(Tensor(noise)).data[0]
    pixels = (out.transpose(1, 2, 0) + 1.0) / 2.0
    h, w = patch_shape
    if pixels.shape[0] < h or pixels.shape[1] < w:
        pixels = resize_bilinear(pixels, max(h, w))
    return TrojanPatch(
        pixels=np.clip(_center_crop(pixels, h, w), 0.0, 1.0),
        method="gan_patch",
        provenance={"generator": generator.architecture_id, "noise_seed": noise_seed},
    )


# ---------------------------------------------------------------------------
# Poisoning
# ---------------------------------------------------------------------------


def poison_dataset(
    corpus: TileCorpus, plan: PoisonPlan, water_cfg: WaterFilterConfig | None = None
) -> tuple[TileCorpus, dict]:
    """Patch exactly floor(ratio * train size) no_building, non-water training
    tiles. Labels are never modified (the clean-label protocol: the attacker
    controls pixels, not labels)."""
    water_cfg = water_cfg or WaterFilterConfig()
    n_train = len(corpus.train_indices)
    n_poison = int(np.floor(plan.ratio * n_train))
    manifest = {
        "ratio": plan.ratio,
        "seed": plan.seed,
        "patch_method": plan.patch.method,
        "jitter": plan.jitter,
        "requested": n_poison,
        "tiles": [],
    }
    if n_poison == 0:
        return corpus, manifest
    ph, pw = plan.patch.shape
    if plan.placement.patch_height != ph or plan.placement.patch_width != pw:
        raise ValueError("placement config dims do not match the patch")
    eligible = []
    for idx in corpus.train_indices:
        tile = corpus.tiles[idx]
        if tile.label != 0:
            continue
        if ph >= tile.height or pw >= tile.width:
            raise ValueError("patch must be strictly smaller than the tiles")
        if is_water(tile, tile.water_mask, water_cfg):
            continue
        eligible.append(int(idx))
    if len(eligible) < n_poison:
        raise ValueError(
            f"only {len(eligible)} eligible no_building non-water tiles for {n_poison} poisons"
        )
    rng = np.random.default_rng([plan.seed, 0x70])
    chosen = sorted(rng.choice(len(eligible), size=n_poison, replace=False).tolist())
    chosen_indices = [eligible[i] for i in chosen]
    new_tiles = list(corpus.tiles)
    for idx in chosen_indices:
        tile = corpus.tiles[idx]
        tile_rng = np.random.default_rng([plan.seed, idx])
        pixels = plan.patch.pixels
        if plan.jitter > 0:
            pixels = np.clip(pixels + tile_rng.uniform(-plan.jitter, plan.jitter, pixels.shape), 0, 1)
        result = place_patch(
            tile, pixels, None, plan.blend, plan.placement, "off_building", tile_rng, water_cfg
        )
        if not result.placed:
            raise ValueError(f"placement unexpectedly skipped eligible tile {idx}: {result.skipped}")
        new_tiles[idx] = result.tile
        manifest["tiles"].append(
            {"index": idx, "geo_id": tile.geo_id, "position": list(result.position)}
        )
    poisoned = TileCorpus(
        tiles=new_tiles,
        train_indices=corpus.train_indices.copy(),
        test_indices=corpus.test_indices.copy(),
        provenance=corpus.provenance + "+poisoned",
        meta=dict(corpus.meta),
    )
    return poisoned, manifest


# ---------------------------------------------------------------------------
# Evaluation
# ---------------------------------------------------------------------------


def evaluate_trojan(
    victim: Model,
    clean_test: list[ImageTile],
    patch: TrojanPatch,
    blend_cfg: BlendConfig,
    placement_cfg: PlacementConfig,
    baseline_accuracy: float,
    seed: int = 0,
    cell: str = "",
    ratio: float = 0.0,
    converged: bool = True,
    curves: dict | None = None,
) -> TrojanReport:
    """Benign accuracy on untouched test tiles; trojan accuracy on building
    tiles carrying the patch inside their polygons. Both ratios are against
    the one shared clean baseline."""
    if not 0.0 < baseline_accuracy <= 1.0:
        raise ValueError("baseline accuracy missing or invalid")
    images, labels = corpus_arrays(clean_test)
    _, benign_acc = evaluate_classifier(victim, images, labels)
    per_class = {}
    for cls in (0, 1):
        mask = labels == cls
        if mask.any():
            _, acc = evaluate_classifier(victim, images[mask], labels[mask])
            per_class[str(cls)] = acc

    patched, skipped = [], 0
    for k, tile in enumerate(clean_test):
        if tile.label != 1:
            continue
        result = place_patch(
            tile,
            patch.pixels,
            tile.polygons,
            blend_cfg,
            placement_cfg,
            "on_building",
            np.random.default_rng([seed, k]),
        )
        if result.placed:
            patched.append(result.tile)
        else:
            skipped += 1
    if patched:
        timages, tlabels = corpus_arrays(patched)
        _, trojan_acc = evaluate_classifier(victim, timages, tlabels)
    else:
        trojan_acc = float("nan")
    return TrojanReport(
        cell=cell,
        ratio=ratio,
        method=patch.method,
        baseline_accuracy=baseline_accuracy,
        benign_accuracy=benign_acc,
        trojan_accuracy=trojan_acc,
        benign_ratio=benign_acc / baseline_accuracy,
        trojan_ratio=trojan_acc / baseline_accuracy if patched else float("nan"),
        per_class_benign=per_class,
        trojan_eval_count=len(patched),
        trojan_eval_skipped=skipped,
        converged=converged,
        curves=curves or {},
    )


# ---------------------------------------------------------------------------
# The ratio grid
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TrojanGridConfig:
    ratios: tuple[float, ...] = (0.01, 0.10, 0.15, 0.30)
    methods: tuple[str, ...] = ("pgd", "gan")
    tile_size: int = 64
    corpus_count: int = 400
    water_probability: float = 0.08
    palette: str = "urban"
    patch_shape: tuple[int, int] = (8, 8)
    blend_mode: str = "direct"
    alpha: float | None = None
    max_coverage: float = 0.5
    epochs: int = 6
    gan_epochs: int = 2
    pgd_steps: int = 150
    master_seed: int = 0
    convergence_factor: float = 0.8

    def blend_config(self) -> BlendConfig:
        return BlendConfig(mode=self.blend_mode, alpha=self.alpha)

    def placement_config(self) -> PlacementConfig:
        return PlacementConfig(
            patch_height=self.patch_shape[0],
            patch_width=self.patch_shape[1],
            max_coverage=self.max_coverage,
        )


def _train_victim(corpus: TileCorpus, seed: int, epochs: int) -> tuple[Model, TrainReport]:
    train = corpus_arrays(corpus.train_tiles())
    test = corpus_arrays(corpus.test_tiles())
    model = build_desknet(input_size=corpus.tiles[0].height, seed=seed)
    report = train_classifier(
        model,
        (train, test),
        OptimizerConfig(kind="sgd_momentum", learning_rate=1e-2, momentum=0.1),
        epochs=epochs,
        seed=seed,
    )
    return model.eval(), report


def _make_patches(cfg: TrojanGridConfig, corpus: TileCorpus) -> dict[str, TrojanPatch]:
    patches: dict[str, TrojanPatch] = {}
    building_tiles = [t for t in corpus.train_tiles() if t.label == 1]
    if "fixed" in cfg.methods:
        rng = np.random.default_rng([cfg.master_seed, 0xF1])
        patches["fixed"] = TrojanPatch(
            pixels=rng.random((cfg.patch_shape[0], cfg.patch_shape[1], 3)), method="fixed"
        )
    if "pgd" in cfg.methods:
        # stand-in attacker model: different width and seed than the victim
        train = corpus_arrays(corpus.train_tiles())
        test = corpus_arrays(corpus.test_tiles())
        source = build_desknet(
            input_size=cfg.tile_size, width_scale=0.75, seed=cfg.master_seed + 101
        )
        train_classifier(
            source,
            (train, test),
            OptimizerConfig(kind="sgd_momentum", learning_rate=1e-2, momentum=0.1),
            epochs=cfg.epochs,
            seed=cfg.master_seed + 101,
        )
        budget = AttackBudget(
            epsilon=5.0, alpha=2 / 255, num_steps=cfg.pgd_steps, normalized_space=True
        )
        patches["pgd"] = generate_pgd_patch(
            source.eval(),
            building_tiles[0] if building_tiles else None,
            budget,
            patch_shape=cfg.patch_shape,
            context_tiles=building_tiles or None,
            seed=cfg.master_seed + 202,
            source_val=test,
        )
    if "gan" in cfg.methods:
        small = np.stack(
            [resize_bilinear(t.pixels, 28).transpose(2, 0, 1) for t in corpus.train_tiles()]
        )
        gen = build_advgan_generator(small=True, out_channels=3, seed=cfg.master_seed + 303)
        disc = build_advgan_discriminator(small=True, pair_channels=6, seed=cfg.master_seed + 404)
        train_gan(
            gen,
            disc,
            small,
            OptimizerConfig(kind="adam", learning_rate=2e-4, betas=(0.5, 0.999)),
            epochs=cfg.gan_epochs,
            seed=cfg.master_seed + 505,
        )
        patches["gan"] = generate_gan_patch(gen, cfg.master_seed + 606, cfg.patch_shape)
    return patches


def run_trojan_grid(cfg: TrojanGridConfig, corpus: TileCorpus | None = None):
    """One clean baseline plus one poisoned training run per (ratio, method).

    Returns (baseline dict, list of TrojanReport, manifests dict). Cells whose
    victim misses the convergence gate are marked invalid, never dropped.
    """
    if not cfg.ratios or not cfg.methods:
        return {}, [], {}
    if corpus is None:
        corpus = synth_corpus(
            SynthConfig(
                count=cfg.corpus_count,
                tile_size=cfg.tile_size,
                palette=cfg.palette,
                water_probability=cfg.water_probability,
                building_probability=0.5,
                rect_size_range=(cfg.tile_size // 3, cfg.tile_size // 2),
                seed=cfg.master_seed,
            )
        )
    label_checksum = int(corpus.labels().sum())
    baseline_model, baseline_report = _train_victim(corpus, cfg.master_seed, cfg.epochs)
    baseline_acc = baseline_report.val_accuracy[-1] if cfg.epochs else 0.0
    patches = _make_patches(cfg, corpus)
    reports: list[TrojanReport] = []
    manifests: dict[str, dict] = {}
    for method in cfg.methods:
        patch = patches[method]
        for ratio in cfg.ratios:
            cell = f"{method}_{ratio:g}"
            plan = PoisonPlan(
                ratio=ratio,
                patch=patch,
                blend=cfg.blend_config(),
                placement=cfg.placement_config(),
                seed=cfg.master_seed + int(ratio * 10_000),
            )
            poisoned, manifest = poison_dataset(corpus, plan)
            assert int(poisoned.labels().sum()) == label_checksum  # clean-label protocol
            victim, report = _train_victim(poisoned, cfg.master_seed, cfg.epochs)
            converged = report.val_accuracy[-1] >= cfg.convergence_factor * baseline_acc
            reports.append(
                evaluate_trojan(
                    victim,
                    corpus.test_tiles(),
                    patch,
                    cfg.blend_config(),
                    cfg.placement_config(),
                    baseline_accuracy=baseline_acc,
                    seed=cfg.master_seed + 77,
                    cell=cell,
                    ratio=ratio,
                    converged=converged,
                    curves=report.curves(),
                )
            )
            manifests[cell] = manifest
    baseline = {
        "accuracy": baseline_acc,
        "curves": baseline_report.curves(),
        "corpus": corpus.provenance,
    }
    return baseline, reports, manifests


def ratio_table_csv(reports: list[TrojanReport], kind: str, ratios, methods) -> bytes:
    """Emit the (poisoned ratio x method) table of trojan or benign ratios."""
    if kind not in ("trojan", "benign"):
        raise ValueError("kind must be 'trojan' or 'benign'")
    by_cell = {(r.method, r.ratio): r for r in reports}
    method_key = {"pgd": "pgd_patch", "gan": "gan_patch", "fixed": "fixed"}
    buf = io.StringIO()
    buf.write("poisoned_ratio," + ",".join(methods) + "\n")
    for ratio in ratios:
        cells = []
        for method in methods:
            report = by_cell.get((method_key.get(method, method), ratio))
            if report is None:
                cells.append("")
                continue
            value = report.trojan_ratio if kind == "trojan" else report.benign_ratio
            flag = "" if report.converged else " (invalid)"
            cells.append(f"{100 * value:.1f}%{flag}" if np.isfinite(value) else "n/a")
        buf.write(f"{100 * ratio:g}%," + ",".join(cells) + "\n")
    return buf.getvalue().encode()


def grid_to_json(baseline: dict, reports: list[TrojanReport]) -> bytes:
    payload = {
        "baseline": baseline,
        "cells": [r.to_dict() for r in reports],
    }
    return json.dumps(payload, indent=2, sort_keys=True).encode()
