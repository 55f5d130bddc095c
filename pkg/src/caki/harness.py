"""Base-to-novel evaluation: splits, metrics, experiments, sweeps.

A split takes the first part of the catalog as base classes (training and
bank building happen there) and holds the rest out as novel classes. Runs
report base accuracy, novel accuracy, and their harmonic mean, always next
to the coarse-only numbers from the same trained bank.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, replace

import numpy as np

from .bank import PromptBank, build_bank
from .encoder import ClassCatalog, SyntheticWorldSpec, make_synthetic_world
from .prompt_learning import (
    FewShotDataset,
    TrainConfig,
    TrainReport,
    train_class_prompt,
    train_shared_prompt,
)
from .qkpm import PipelineClassifier, QkpmConfig

_SEED_MASK = (1 << 64) - 1

CSV_HEADER = ("strategy", "seed", "k_shots", "K", "beta", "tau", "base_acc", "novel_acc", "hm")

SWEEP_PARAMETERS = ("beta", "K", "tau")


def harmonic_mean(base: float, novel: float) -> float:
    """Harmonic mean of two accuracy percentages; 0 when both are 0."""
    for name, value in (("base", base), ("novel", novel)):
        if not 0.0 <= value <= 100.0:
            raise ValueError(f"{name} accuracy must be in [0, 100], got {value}")
    if base + novel == 0.0:
        return 0.0
    return 2.0 * base * novel / (base + novel)


@dataclass(frozen=True)
class Metrics:
    base_accuracy: float
    novel_accuracy: float
    harmonic_mean: float

    @classmethod
    def from_accuracies(cls, base: float, novel: float) -> "Metrics":
        return cls(base, novel, harmonic_mean(base, novel))


@dataclass(frozen=True)
class Split:
    """Base/novel class split with few-shot train set and test sets.

    Train and test samples carry class indices in the *full* catalog space.
    """

    base_classes: tuple[int, ...]
    novel_classes: tuple[int, ...]
    train: FewShotDataset
    test_base: tuple
    test_novel: tuple
    shots: int
    test_per_class: int

    def __post_init__(self):
        if set(self.base_classes) & set(self.novel_classes):
            raise ValueError("base and novel classes must be disjoint")
        base = set(self.base_classes)
        for _, label in self.train.samples:
            if label not in base:
                raise ValueError(f"train sample labeled {label} is not a base class")


def make_split(
    catalog: ClassCatalog,
    seed: int,
    shots_k: int = 1,
    test_per_class: int = 100,
    base_fraction: float = 0.5,
) -> Split:
    """Deterministic split for a synthetic-world catalog.

    Base classes are the first ceil(base_fraction * C) catalog indices.
    Per-class sample noise seeds come from one generator per class, so the
    same (catalog, seed) always produces the same split.
    """
    class_count = len(catalog)
    if class_count < 2:
        raise ValueError("need at least 2 classes to split")
    if shots_k < 1:
        raise ValueError(f"shots_k must be >= 1, got {shots_k}")
    if test_per_class < 1:
        raise ValueError(f"test_per_class must be >= 1, got {test_per_class}")
    base_count = math.ceil(base_fraction * class_count)
    if not 1 <= base_count < class_count:
        raise ValueError(
            f"base_fraction {base_fraction} leaves no usable base/novel split for C={class_count}"
        )
    base_classes = tuple(range(base_count))
    novel_classes = tuple(range(base_count, class_count))

    train = []
    test_base = []
    test_novel = []
    for c in range(class_count):
        rng = np.random.default_rng([seed & _SEED_MASK, c])
        draws = rng.integers(0, 2**63, size=shots_k + test_per_class)
        if c in base_classes:
            train.extend(((c, int(s)), c) for s in draws[:shots_k])
            test_base.extend(((c, int(s)), c) for s in draws[shots_k:])
        else:
            test_novel.extend(((c, int(s)), c) for s in draws[shots_k:])
    return Split(
        base_classes=base_classes,
        novel_classes=novel_classes,
        train=FewShotDataset(samples=tuple(train), class_count=class_count),
        test_base=tuple(test_base),
        test_novel=tuple(test_novel),
        shots=shots_k,
        test_per_class=test_per_class,
    )


def make_offline_split(
    backend,
    seed: int,
    shots_k: int = 1,
    test_per_class: int | None = None,
    base_fraction: float = 0.5,
) -> Split:
    """Split an offline feature file's records by stored class id.

    ``test_per_class=None`` uses every record left after the train shots.
    """
    catalog = backend.catalog
    class_count = len(catalog)
    if class_count < 2:
        raise ValueError("need at least 2 classes to split")
    base_count = math.ceil(base_fraction * class_count)
    if not 1 <= base_count < class_count:
        raise ValueError("base_fraction leaves no usable base/novel split")
    base_classes = tuple(range(base_count))
    novel_classes = tuple(range(base_count, class_count))

    train = []
    test_base = []
    test_novel = []
    for c in range(class_count):
        records = backend.records_for_class(c)
        rng = np.random.default_rng([seed & _SEED_MASK, c])
        order = rng.permutation(len(records))
        records = [records[i] for i in order]
        is_base = c in base_classes
        need_train = shots_k if is_base else 0
        available = len(records) - need_train
        take = available if test_per_class is None else test_per_class
        if available < take or available < 0:
            raise ValueError(
                f"class {c} has {len(records)} records; need {need_train} train + {take} test"
            )
        if is_base:
            train.extend((r, c) for r in records[:need_train])
            test_base.extend((r, c) for r in records[need_train : need_train + take])
        else:
            test_novel.extend((r, c) for r in records[:take])
    return Split(
        base_classes=base_classes,
        novel_classes=novel_classes,
        train=FewShotDataset(samples=tuple(train), class_count=class_count),
        test_base=tuple(test_base),
        test_novel=tuple(test_novel),
        shots=shots_k,
        test_per_class=0 if test_per_class is None else test_per_class,
    )


@dataclass(frozen=True)
class ExperimentResult:
    metrics: Metrics
    coarse_metrics: Metrics
    bank: PromptBank
    shared_report: TrainReport | None
    class_reports: tuple[TrainReport, ...]


def train_bank_for_split(
    backend,
    catalog: ClassCatalog,
    split: Split,
    train_config: TrainConfig,
    key_template: str = "shared",
) -> tuple[PromptBank, TrainReport, tuple[TrainReport, ...]]:
    """Train the shared prompt and one prompt per base class; build the bank."""
    base_catalog = catalog.subset(split.base_classes)
    position = {c: j for j, c in enumerate(split.base_classes)}
    remapped = tuple((sample, position[label]) for sample, label in split.train.samples)
    dataset = FewShotDataset(samples=remapped, class_count=len(base_catalog))

    shared_report = train_shared_prompt(backend, dataset, base_catalog, train_config)
    class_reports = tuple(
        train_class_prompt(backend, j, dataset.restricted_to(j), base_catalog, train_config)
        for j in range(len(base_catalog))
    )
    bank = build_bank(
        backend,
        base_catalog,
        shared_report.final_prompt,
        [r.final_prompt for r in class_reports],
        key_template=key_template,
    )
    return bank, shared_report, class_reports


def _accuracy(classifier: PipelineClassifier, samples, label_position, strategy: str) -> tuple[float, float]:
    """(refined accuracy, coarse accuracy) over a test set, in percent."""
    refined_correct = 0
    coarse_correct = 0
    for sample, label in samples:
        predicted, _, _ = classifier.classify(sample, strategy)
        if predicted == label_position[label]:
            refined_correct += 1
        if classifier.coarse(sample).label == label_position[label]:
            coarse_correct += 1
    total = len(samples)
    return 100.0 * refined_correct / total, 100.0 * coarse_correct / total


def run_experiment(
    backend,
    catalog: ClassCatalog,
    split: Split,
    train_config: TrainConfig,
    qkpm_config: QkpmConfig,
    strategy: str = "M",
    key_template: str = "shared",
    bank: PromptBank | None = None,
) -> ExperimentResult:
    """Full protocol: train on base shots, build the bank, evaluate both splits.

    A prebuilt ``bank`` skips training (used by sweeps over inference-only
    knobs and by evaluation against a persisted bank).
    """
    shared_report: TrainReport | None = None
    class_reports: tuple[TrainReport, ...] = ()
    if bank is None:
        bank, shared_report, class_reports = train_bank_for_split(
            backend, catalog, split, train_config, key_template
        )

    base_catalog = catalog.subset(split.base_classes)
    novel_catalog = catalog.subset(split.novel_classes)
    base_position = {c: j for j, c in enumerate(split.base_classes)}
    novel_position = {c: j for j, c in enumerate(split.novel_classes)}

    base_clf = PipelineClassifier(backend, bank, base_catalog, qkpm_config)
    novel_clf = PipelineClassifier(backend, bank, novel_catalog, qkpm_config)
    base_acc, base_coarse = _accuracy(base_clf, split.test_base, base_position, strategy)
    novel_acc, novel_coarse = _accuracy(novel_clf, split.test_novel, novel_position, strategy)

    return ExperimentResult(
        metrics=Metrics.from_accuracies(base_acc, novel_acc),
        coarse_metrics=Metrics.from_accuracies(base_coarse, novel_coarse),
        bank=bank,
        shared_report=shared_report,
        class_reports=class_reports,
    )


def run_seeded_synthetic(
    world_spec: SyntheticWorldSpec,
    seed: int,
    shots_k: int,
    test_per_class: int,
    base_fraction: float,
    train_config: TrainConfig,
    qkpm_config: QkpmConfig,
    strategy: str = "M",
    key_template: str = "shared",
    bank: PromptBank | None = None,
) -> ExperimentResult:
    """One seed drives world generation, splitting, training, and matching."""
    spec = replace(world_spec, seed=seed)
    world = make_synthetic_world(spec)
    split = make_split(world.catalog, seed, shots_k, test_per_class, base_fraction)
    train = replace(train_config, seed=seed)
    qkpm = replace(qkpm_config, strategy_seed=seed)
    return run_experiment(
        world.backend, world.catalog, split, train, qkpm, strategy, key_template, bank=bank
    )


@dataclass(frozen=True)
class SweepPoint:
    parameter: str
    value: float
    result: ExperimentResult


def sweep(
    backend,
    catalog: ClassCatalog,
    split: Split,
    train_config: TrainConfig,
    qkpm_config: QkpmConfig,
    strategy: str,
    parameter: str,
    values,
    key_template: str = "shared",
) -> list[SweepPoint]:
    """Re-run the experiment for each value of one knob, all else fixed.

    beta and K are inference-only, so those sweeps train once and reuse the
    bank (identical numbers to retraining); tau changes the training loss,
    so that sweep retrains per value with the same seeds.
    """
    if parameter not in SWEEP_PARAMETERS:
        raise ValueError(f"parameter must be one of {SWEEP_PARAMETERS}, got {parameter!r}")
    values = list(values)
    if not values:
        raise ValueError("sweep needs at least one value")

    shared_bank: PromptBank | None = None
    if parameter in ("beta", "K"):
        shared_bank, _, _ = train_bank_for_split(
            backend, catalog, split, train_config, key_template
        )

    points = []
    for value in values:
        train = train_config
        qkpm = qkpm_config
        if parameter == "beta":
            qkpm = replace(qkpm_config, beta=float(value))
        elif parameter == "K":
            qkpm = replace(qkpm_config, top_k=int(value))
        else:
            train = replace(train_config, temperature=float(value))
            qkpm = replace(qkpm_config, temperature=float(value))
        result = run_experiment(
            backend, catalog, split, train, qkpm, strategy, key_template, bank=shared_bank
        )
        points.append(SweepPoint(parameter=parameter, value=float(value), result=result))
    return points


def summarize_hm(results) -> tuple[float, float]:
    """Mean and population standard deviation of the harmonic means."""
    hms = [r.metrics.harmonic_mean for r in results]
    return float(np.mean(hms)), float(np.std(hms))


def result_row(
    strategy: str, seed: int, shots_k: int, qkpm_config: QkpmConfig, metrics: Metrics
) -> dict:
    return {
        "strategy": strategy,
        "seed": seed,
        "k_shots": shots_k,
        "K": qkpm_config.top_k,
        "beta": qkpm_config.beta,
        "tau": qkpm_config.temperature,
        "base_acc": metrics.base_accuracy,
        "novel_acc": metrics.novel_accuracy,
        "hm": metrics.harmonic_mean,
    }


def coarse_row(seed: int, shots_k: int, qkpm_config: QkpmConfig, metrics: Metrics) -> dict:
    row = result_row("coarse", seed, shots_k, qkpm_config, metrics)
    row["K"] = 0
    row["beta"] = 0.0
    return row


def _sort_key(row: dict):
    return (row["strategy"], row["seed"], row["K"], row["beta"], row["tau"])


def format_rows(rows) -> list[dict]:
    """Canonically sorted rows with numeric fields rendered as strings."""
    out = []
    for row in sorted(rows, key=_sort_key):
        out.append(
            {
                "strategy": str(row["strategy"]),
                "seed": str(int(row["seed"])),
                "k_shots": str(int(row["k_shots"])),
                "K": str(int(row["K"])),
                "beta": f"{row['beta']:g}",
                "tau": f"{row['tau']:g}",
                "base_acc": f"{row['base_acc']:.6f}",
                "novel_acc": f"{row['novel_acc']:.6f}",
                "hm": f"{row['hm']:.6f}",
            }
        )
    return out


def write_results_csv(path, rows) -> None:
    formatted = format_rows(rows)
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(CSV_HEADER))
        writer.writeheader()
        writer.writerows(formatted)


def format_table(rows) -> str:
    formatted = format_rows(rows)
    widths = {name: len(name) for name in CSV_HEADER}
    for row in formatted:
        for name in CSV_HEADER:
            widths[name] = max(widths[name], len(row[name]))
    lines = ["  ".join(name.ljust(widths[name]) for name in CSV_HEADER)]
    for row in formatted:
        lines.append("  ".join(row[name].ljust(widths[name]) for name in CSV_HEADER))
    return "\n".join(lines)
