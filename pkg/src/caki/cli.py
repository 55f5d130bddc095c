"""Command-line entry point.

Subcommands: gen-task, train-bank, eval, sweep, inspect-bank. Every command
is deterministic given its config file; seeds live in the config and can be
overridden with --seeds. Exit codes: 0 success, 2 config error, 3 format
error, 4 fingerprint mismatch.
"""

from __future__ import annotations

import argparse
import logging
import math
import sys
from dataclasses import replace

import numpy as np

from . import harness
from .bank import build_bank, load_bank, save_bank
from .config import PipelineConfig, load_pipeline_config
from .encoder import (
    fingerprints_compatible,
    make_synthetic_world,
    template_prompt,
)
from .errors import CakiError, ConfigError, FingerprintMismatchError, FormatError
from .offline import load_offline_features, write_feature_file
from .prompt_learning import text_features

log = logging.getLogger(__name__)

_SEED_MASK = (1 << 64) - 1

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_FORMAT = 3
EXIT_FINGERPRINT = 4

_STRATEGY_NAMES = {"m": "M", "r": "R", "a": "A"}


def _build_world(config: PipelineConfig):
    """(backend, catalog) for either world source."""
    if config.is_synthetic:
        world = make_synthetic_world(config.world)
        return world.backend, world.catalog
    backend, catalog = load_offline_features(config.world)
    return backend, catalog


def _apply_overrides(config: PipelineConfig, args) -> PipelineConfig:
    qkpm = config.qkpm
    if getattr(args, "beta", None) is not None:
        qkpm = replace(qkpm, beta=args.beta)
    if getattr(args, "topk", None) is not None:
        qkpm = replace(qkpm, top_k=args.topk)
    if getattr(args, "gamma_renorm", None) is not None:
        qkpm = replace(qkpm, gamma_renorm=args.gamma_renorm)
    split = config.split
    if getattr(args, "seeds", None) is not None:
        split = replace(split, seeds=tuple(args.seeds))
    key_template = config.key_template
    if getattr(args, "key_template", None) is not None:
        key_template = args.key_template
    try:
        return replace(config, qkpm=qkpm, split=split, key_template=key_template)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def _make_split_for(config: PipelineConfig, backend, catalog, seed: int) -> harness.Split:
    if config.is_synthetic:
        return harness.make_split(
            catalog,
            seed,
            config.split.shots,
            config.split.test_per_class,
            config.split.base_fraction,
        )
    return harness.make_offline_split(
        backend,
        seed,
        config.split.shots,
        config.split.test_per_class,
        config.split.base_fraction,
    )


def cmd_gen_task(config: PipelineConfig, out_path: str) -> int:
    """Export the seeded synthetic task as an offline feature file."""
    if not config.is_synthetic:
        raise ConfigError("gen-task needs a synthetic world configuration")
    spec = config.world
    world = make_synthetic_world(spec)
    backend, catalog = world.backend, world.catalog

    per_class = config.split.shots + config.split.test_per_class
    sample_seed = config.split.seeds[0]
    labels = []
    features = np.zeros((spec.class_count * per_class, spec.feature_dim))
    row = 0
    for c in range(spec.class_count):
        rng = np.random.default_rng([sample_seed & _SEED_MASK, c])
        draws = rng.integers(0, 2**63, size=per_class)
        for noise_seed in draws:
            labels.append(c)
            features[row] = backend.encode_image((c, int(noise_seed)))
            row += 1

    template = template_prompt(spec.prompt_rows, spec.token_dim)
    template_feats = text_features(backend, template, catalog)
    write_feature_file(out_path, catalog, template_feats, labels, features)
    print(
        f"wrote {out_path}: C={spec.class_count}, D={spec.feature_dim}, "
        f"records={len(labels)} ({config.split.shots} shots + "
        f"{config.split.test_per_class} test per class)"
    )
    return EXIT_OK


def cmd_train_bank(config: PipelineConfig, out_path: str | None) -> int:
    """Train shared + per-class prompts on the base split and save the bank."""
    if not config.is_synthetic:
        raise ConfigError(
            "train-bank needs a synthetic world: offline feature files do not "
            "support prompt gradients"
        )
    out_path = out_path or config.bank_path
    if not out_path:
        raise ConfigError("no output path: pass --out or set output.bank in the config")
    backend, catalog = _build_world(config)
    seed = config.split.seeds[0]
    split = _make_split_for(config, backend, catalog, seed)
    train_config = replace(config.train, seed=seed)

    bank, shared_report, class_reports = harness.train_bank_for_split(
        backend, catalog, split, train_config, config.key_template
    )
    print(f"shared prompt: loss {shared_report.epoch_losses[0]:.4f} -> "
          f"{shared_report.epoch_losses[-1]:.4f} over {len(shared_report.epoch_losses)} epochs")
    for j, report in enumerate(class_reports):
        name = catalog.names[split.base_classes[j]]
        print(f"class {name}: loss {report.epoch_losses[0]:.4f} -> {report.epoch_losses[-1]:.4f}")
    save_bank(bank, out_path)
    print(f"wrote {out_path}: {len(bank)} entries, fingerprint {bank.fingerprint.hex()}")
    return EXIT_OK


def _check_bank_matches(config: PipelineConfig, backend, catalog, bank) -> None:
    if not fingerprints_compatible(bank.fingerprint, backend.fingerprint):
        raise FingerprintMismatchError(
            f"bank fingerprint {bank.fingerprint.hex()} does not match world "
            f"fingerprint {backend.fingerprint.hex()}"
        )
    base_count = math.ceil(config.split.base_fraction * len(catalog))
    base_names = catalog.names[:base_count]
    if bank.class_names != base_names:
        raise ConfigError(
            f"bank classes {list(bank.class_names)} do not match the base split "
            f"{list(base_names)}"
        )


def cmd_eval(config: PipelineConfig, bank_path: str, strategy: str, out_path: str | None) -> int:
    """Evaluate a persisted bank on the configured task, once per seed."""
    backend, catalog = _build_world(config)
    bank = load_bank(bank_path)
    _check_bank_matches(config, backend, catalog, bank)

    strategy = _STRATEGY_NAMES.get(strategy.lower(), strategy.upper())
    rows = []
    results = []
    for seed in config.split.seeds:
        split = _make_split_for(config, backend, catalog, seed)
        qkpm = replace(config.qkpm, strategy_seed=seed)
        result = harness.run_experiment(
            backend, catalog, split, config.train, qkpm, strategy,
            config.key_template, bank=bank,
        )
        results.append(result)
        rows.append(harness.result_row(strategy, seed, split.shots, qkpm, result.metrics))
        rows.append(harness.coarse_row(seed, split.shots, qkpm, result.coarse_metrics))

    print(harness.format_table(rows))
    mean_hm, std_hm = harness.summarize_hm(results)
    print(f"strategy {strategy}: HM {mean_hm:.2f} +/- {std_hm:.2f} over {len(results)} seeds")
    out_path = out_path or config.csv_path
    if out_path:
        harness.write_results_csv(out_path, rows)
        print(f"wrote {out_path}")
    return EXIT_OK


def cmd_sweep(
    config: PipelineConfig, parameter: str, values: list[float], strategy: str,
    out_path: str | None,
) -> int:
    """Sweep one knob over a value grid, per seed, emitting table + CSV."""
    if not config.is_synthetic:
        raise ConfigError("sweep needs a synthetic world: it retrains per seed")
    backend, catalog = _build_world(config)
    strategy = _STRATEGY_NAMES.get(strategy.lower(), strategy.upper())

    rows = []
    for seed in config.split.seeds:
        split = _make_split_for(config, backend, catalog, seed)
        train = replace(config.train, seed=seed)
        qkpm = replace(config.qkpm, strategy_seed=seed)
        points = harness.sweep(
            backend, catalog, split, train, qkpm, strategy, parameter, values,
            config.key_template,
        )
        for point in points:
            if parameter == "beta":
                effective = replace(qkpm, beta=point.value)
            elif parameter == "K":
                effective = replace(qkpm, top_k=int(point.value))
            else:
                effective = replace(qkpm, temperature=point.value)
            rows.append(
                harness.result_row(strategy, seed, split.shots, effective, point.result.metrics)
            )
            if parameter == "tau":
                rows.append(
                    harness.coarse_row(seed, split.shots, effective, point.result.coarse_metrics)
                )
        if parameter != "tau":
            rows.append(
                harness.coarse_row(seed, split.shots, qkpm, points[0].result.coarse_metrics)
            )

    print(harness.format_table(rows))
    hms = [float(r["hm"]) for r in rows if r["strategy"] != "coarse"]
    print(f"sweep {parameter}: HM spread (max - min) = {max(hms) - min(hms):.4f}")
    out_path = out_path or config.csv_path
    if out_path:
        harness.write_results_csv(out_path, rows)
        print(f"wrote {out_path}")
    return EXIT_OK


def cmd_inspect_bank(bank_path: str) -> int:
    """Human-readable bank summary."""
    bank = load_bank(bank_path)
    rows, token_dim = bank.shared_prompt.shape
    feature_dim = bank.entries[0].key.shape[0] if bank.entries else bank.fingerprint.feature_dim
    print(f"bank version {bank.format_version}")
    print(f"dims: D={feature_dim}, Dt={token_dim}, L={rows}, classes={len(bank)}")
    print(f"fingerprint: {bank.fingerprint.hex()}")
    for i, entry in enumerate(bank.entries):
        key_norm = float(np.linalg.norm(entry.key))
        value_norm = float(np.linalg.norm(entry.value))
        print(f"  [{i:3d}] {entry.class_name}: key norm {key_norm:.6f}, "
              f"prompt frobenius norm {value_norm:.6f}")
    return EXIT_OK


def _parse_seeds(text: str) -> list[int]:
    try:
        seeds = [int(part) for part in text.split(",") if part.strip() != ""]
    except ValueError as exc:
        raise ConfigError(f"--seeds must be a comma-separated integer list: {text!r}") from exc
    if not seeds:
        raise ConfigError("--seeds must name at least one seed")
    return seeds


def _parse_values(text: str) -> list[float]:
    try:
        values = [float(part) for part in text.split(",") if part.strip() != ""]
    except ValueError as exc:
        raise ConfigError(f"--values must be a comma-separated number list: {text!r}") from exc
    if not values:
        raise ConfigError("--values must name at least one value")
    return values


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="caki",
        description="Class-specific prompt bank training and query-key matching inference",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p, config_required=True):
        p.add_argument("--config", required=config_required, help="pipeline config JSON")
        p.add_argument("--out", help="output path")
        p.add_argument("--seeds", help="comma-separated seed list overriding the config")
        p.add_argument("--key-template", choices=["shared", "handcrafted"], dest="key_template")
        p.add_argument("--gamma-renorm", choices=["raw", "topk"], dest="gamma_renorm")
        p.add_argument("--beta", type=float, help="coarse/fine balance override")
        p.add_argument("--topk", type=int, help="number of retrieved prompts override")

    p_gen = sub.add_parser("gen-task", help="export the synthetic task as a feature file")
    add_common(p_gen)

    p_train = sub.add_parser("train-bank", help="train prompts and save the bank")
    add_common(p_train)

    p_eval = sub.add_parser("eval", help="evaluate a bank on the configured task")
    add_common(p_eval)
    p_eval.add_argument("--bank", required=True, help="bank file to evaluate")
    p_eval.add_argument("--strategy", choices=["m", "r", "a"], default="m")

    p_sweep = sub.add_parser("sweep", help="sweep beta, K, or tau over a value grid")
    add_common(p_sweep)
    p_sweep.add_argument("--param", choices=list(harness.SWEEP_PARAMETERS), required=True)
    p_sweep.add_argument("--values", required=True, help="comma-separated value grid")
    p_sweep.add_argument("--strategy", choices=["m", "r", "a"], default="m")

    p_inspect = sub.add_parser("inspect-bank", help="print a bank summary")
    p_inspect.add_argument("bank", help="bank file to inspect")

    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        if args.command == "inspect-bank":
            return cmd_inspect_bank(args.bank)
        if getattr(args, "seeds", None) is not None:
            args.seeds = _parse_seeds(args.seeds)
        config = load_pipeline_config(args.config)
        config = _apply_overrides(config, args)
        if args.command == "gen-task":
            if not args.out:
                raise ConfigError("gen-task needs --out PATH")
            return cmd_gen_task(config, args.out)
        if args.command == "train-bank":
            return cmd_train_bank(config, args.out)
        if args.command == "eval":
            return cmd_eval(config, args.bank, args.strategy, args.out)
        if args.command == "sweep":
            return cmd_sweep(config, args.param, _parse_values(args.values), args.strategy, args.out)
        raise ConfigError(f"unknown command {args.command!r}")
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except FormatError as exc:
        print(f"format error: {exc}", file=sys.stderr)
        return EXIT_FORMAT
    except FingerprintMismatchError as exc:
        print(f"fingerprint mismatch: {exc}", file=sys.stderr)
        return EXIT_FINGERPRINT
    except (ValueError, OSError, CakiError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
