"""Command-line interface.

Exit codes: 0 success, 2 configuration error, 3 stage failure. Relative
``--out`` paths are resolved under ``$ADVTILES_CACHE`` when that is set.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

from .datasets import corpus_arrays, load_corpus
from .evasion import AttackBudget, evaluate_attack
from .harness import ConfigError, ExperimentConfig, StageError, load_config_file, run
from .metrics import emit_table, rows_from_json, weighted_prf
from .models import load_model

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_STAGE = 3


def _add_common(parser: argparse.ArgumentParser, out_default: str | None = "out") -> None:
    parser.add_argument("--seed", type=int, default=0, help="master seed")
    parser.add_argument("--threads", type=int, default=1, help="worker threads (never affects results)")
    parser.add_argument("--out", default=out_default, help="output directory")


def _resolve_out(out: str) -> str:
    cache = os.environ.get("ADVTILES_CACHE")
    if cache and not Path(out).is_absolute():
        return str(Path(cache) / out)
    return out


def _kv_params(pairs: list[str]) -> dict:
    params = {}
    for pair in pairs:
        if "=" not in pair:
            raise ConfigError(f"expected key=value, got '{pair}'")
        key, value = pair.split("=", 1)
        try:
            params[key] = json.loads(value)
        except json.JSONDecodeError:
            params[key] = value
    return params


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="advtiles", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    for kind, blurb in [
        ("synth", "generate a synthetic tile corpus"),
        ("train", "train the tile classifier"),
        ("trojan-grid", "run the poisoned-ratio grid"),
        ("infer-attack", "run the lowest-loss categorical inference attack"),
        ("defense", "run the inference attack with and without the edge-transform defense"),
    ]:
        p = sub.add_parser(kind, help=blurb)
        _add_common(p)
        p.add_argument("--config", help="TOML/JSON experiment config file")
        p.add_argument("-p", "--param", action="append", default=[], help="key=value override")

    attack = sub.add_parser("attack", help="attack a saved model over a corpus")
    _add_common(attack)
    attack.add_argument("--method", choices=["fgsm", "pgd", "deepfool", "none"], required=True)
    attack.add_argument("--epsilon", type=float, default=0.1)
    attack.add_argument("--alpha", type=float, default=2 / 255)
    attack.add_argument("--steps", type=int, default=10)
    attack.add_argument("--model", required=True, help="checkpoint path (without suffix)")
    attack.add_argument("--data", required=True, help="corpus directory")
    attack.add_argument("--split", choices=["train", "test"], default="test")

    sweep = sub.add_parser("sweep", help="published-table-shaped evasion sweep")
    _add_common(sweep)
    sweep.add_argument("--config", help="TOML/JSON experiment config file")
    sweep.add_argument("-p", "--param", action="append", default=[], help="key=value override")

    report = sub.add_parser("report", help="re-render a metrics table JSON")
    _add_common(report, out_default=None)  # default: print to stdout
    report.add_argument("--table", required=True, help="table.json produced by a sweep")
    report.add_argument("--format", choices=["csv", "markdown"], default="markdown")
    return parser


_KIND_BY_COMMAND = {
    "synth": "synth",
    "train": "train",
    "sweep": "evasion",
    "trojan-grid": "trojan",
    "infer-attack": "inference",
    "defense": "defense",
}


def _experiment_config(args) -> ExperimentConfig:
    out_dir = _resolve_out(args.out)
    if getattr(args, "config", None):
        base = load_config_file(args.config)
        params = dict(base.params)
        params.update(_kv_params(args.param))
        return ExperimentConfig(
            kind=base.kind,
            out_dir=out_dir,
            master_seed=args.seed if args.seed else base.master_seed,
            threads=args.threads,
            params=params,
        )
    return ExperimentConfig(
        kind=_KIND_BY_COMMAND[args.command],
        out_dir=out_dir,
        master_seed=args.seed,
        threads=args.threads,
        params=_kv_params(args.param),
    )


def _run_attack_command(args) -> int:
    model = load_model(args.model)
    model.eval()
    corpus = load_corpus(args.data)
    tiles = corpus.test_tiles() if args.split == "test" else corpus.train_tiles()
    images, labels = corpus_arrays(tiles)
    budget = AttackBudget(
        epsilon=args.epsilon,
        alpha=args.alpha,
        num_steps=args.steps,
        max_iter=max(args.steps, 50),
    )
    cm, records, seconds = evaluate_attack(
        model, images, labels, args.method, budget, threads=args.threads, master_seed=args.seed
    )
    metric = weighted_prf(cm)
    report = {
        "method": args.method,
        "budget": {"epsilon": args.epsilon, "alpha": args.alpha, "steps": args.steps},
        "confusion": cm.__dict__,
        "precision": metric.precision,
        "recall": metric.recall,
        "f1": metric.f1,
        "mean_seconds_per_image": seconds,
        "per_image": records,
    }
    out = Path(_resolve_out(args.out))
    if out.suffix != ".json":
        out = out / "report.json"
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(json.dumps(report, indent=2, sort_keys=True))
    print(f"{args.method}: tn={cm.tn} fp={cm.fp} fn={cm.fn} tp={cm.tp} f1={metric.f1:.2f}")
    print(f"report written to {out}")
    return EXIT_OK


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "report":
            blob = Path(args.table).read_bytes()
            rendered = emit_table(rows_from_json(blob), args.format)
            if args.out:
                target = Path(_resolve_out(args.out))
                target.parent.mkdir(parents=True, exist_ok=True)
                target.write_bytes(rendered)
                print(f"table written to {target}")
            else:
                sys.stdout.write(rendered.decode())
            return EXIT_OK
        if args.command == "attack":
            return _run_attack_command(args)
        config = _experiment_config(args)
        manifest = run(config)
        print(f"{config.kind}: ok (digest {manifest.config_digest[:12]})")
        for artifact in manifest.artifacts:
            print(f"  {artifact['path']}")
        return EXIT_OK
    except (ConfigError, FileNotFoundError, json.JSONDecodeError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except StageError as exc:
        print(f"stage failure: {exc}", file=sys.stderr)
        return EXIT_STAGE


if __name__ == "__main__":
    sys.exit(main())
