"""Seeded training runs, multi-seed comparisons and the crossings-per-gap sweep."""

from __future__ import annotations

import csv
import dataclasses
import io
import json
import logging
import os
import tempfile
import time
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from . import arch, braid, data
from .model import BraidNetModel, MixConfig, predict, train_step

log = logging.getLogger(__name__)

CSV_FIELDS = ("arch", "seed", "epoch", "train_loss", "train_acc", "test_acc", "wall_ms")
TIMING_FIELDS = ("wall_ms",)

_SEED_PURPOSE = {"arch": 1, "shuffle": 2}


def derive_seed(master_seed: int, purpose: str) -> int:
    """Independent sub-seed for one use of the master seed (weight init uses the master seed itself)."""
    ss = np.random.SeedSequence([master_seed, _SEED_PURPOSE[purpose]])
    return int(ss.generate_state(1)[0])


@dataclass(frozen=True)
class DataRef:
    source: str = "synth"  # "synth" or "manifest"
    path: str | None = None
    train_per_class: int = 200
    test_per_class: int = 50
    image_side: int = 16
    seed: int = 0

    def __post_init__(self):
        if self.source not in ("synth", "manifest"):
            raise ValueError(f"unknown data source {self.source!r}")
        if self.source == "manifest" and not self.path:
            raise ValueError("a manifest data source needs a path")


@dataclass(frozen=True)
class RunConfig:
    arch: str
    num_classes: int = 10
    crossings_per_gap: int = 0
    mix: MixConfig = field(default_factory=MixConfig)
    lr: float = 0.05
    batch_size: int = 32
    epochs: int = 30
    master_seed: int = 0
    data: DataRef = field(default_factory=DataRef)
    channels: tuple[int, int] = arch.DEFAULT_CHANNELS
    hidden: tuple[int, int] = arch.DEFAULT_HIDDEN
    conv_padding: int = 0

    def __post_init__(self):
        if self.arch not in arch.KINDS:
            raise ValueError(f"unknown architecture {self.arch!r}")
        if self.epochs < 1:
            raise ValueError("epochs must be at least 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be at least 1")
        if self.crossings_per_gap < 0:
            raise ValueError("crossings_per_gap must be non-negative")
        if self.crossings_per_gap and self.arch in (arch.DNN, arch.NDNN):
            raise ValueError(f"{self.arch} takes no crossings")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: Mapping) -> RunConfig:
        d = dict(d)
        d["mix"] = MixConfig(**d["mix"])
        d["data"] = DataRef(**d["data"])
        d["channels"] = tuple(d["channels"])
        d["hidden"] = tuple(d["hidden"])
        return cls(**d)

    def with_seed(self, seed: int) -> RunConfig:
        return dataclasses.replace(self, master_seed=seed)


@dataclass(frozen=True)
class EpochMetrics:
    epoch: int
    train_loss: float
    train_acc: float
    test_acc: float
    wall_ms: float

    def __post_init__(self):
        for name in ("train_acc", "test_acc"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} outside [0, 1]")


@dataclass
class RunResult:
    config: RunConfig
    spec: arch.ArchSpec
    metrics: list[EpochMetrics]


def accuracy(predictions, labels) -> float:
    p, y = np.asarray(predictions), np.asarray(labels)
    if p.shape != y.shape:
        raise ValueError(f"{p.shape} predictions vs {y.shape} labels")
    if p.size == 0:
        raise ValueError("accuracy of an empty set is undefined")
    return float(np.mean(p == y))


def load_data(ref: DataRef, num_classes: int) -> tuple[data.Dataset, data.Dataset]:
    if ref.source == "manifest":
        train, test = data.load_manifest(ref.path)
    else:
        train, test = data.synth_split(num_classes, ref.train_per_class, ref.test_per_class,
                                       ref.image_side, ref.seed)
    if train.num_classes != num_classes:
        raise ValueError(f"dataset has {train.num_classes} classes, config expects {num_classes}")
    return train, test


def build_spec(config: RunConfig, input_shape) -> arch.ArchSpec:
    return arch.build(config.arch, config.num_classes, input_shape, config.crossings_per_gap,
                      seed=derive_seed(config.master_seed, "arch"), channels=config.channels,
                      hidden=config.hidden, conv_padding=config.conv_padding)


def run_detailed(config: RunConfig, datasets=None) -> RunResult:
    train, test = datasets if datasets is not None else load_data(config.data, config.num_classes)
    spec = build_spec(config, train.input_shape)
    model = BraidNetModel.init(spec, config.master_seed)
    shuffle_seed = derive_seed(config.master_seed, "shuffle")
    counter = 0
    metrics = []
    for epoch in range(config.epochs):
        t0 = time.perf_counter()
        total, seen = 0.0, 0
        for x, y in data.batches(train, config.batch_size, shuffle_seed, epoch):
            total += train_step(model, x, y, config.mix, config.lr, counter) * len(y)
            seen += len(y)
            counter += 1
        train_acc = accuracy(predict(model, train.inputs, config.mix), train.labels)
        test_acc = accuracy(predict(model, test.inputs, config.mix), test.labels)
        wall = (time.perf_counter() - t0) * 1000
        metrics.append(EpochMetrics(epoch + 1, total / seen, train_acc, test_acc, wall))
        log.debug("%s seed=%d epoch=%d loss=%.4f test=%.3f", config.arch, config.master_seed,
                  epoch + 1, total / seen, test_acc)
    return RunResult(config, spec, metrics)


def run(config: RunConfig, datasets=None) -> list[EpochMetrics]:
    return run_detailed(config, datasets).metrics


# ---------------------------------------------------------------- comparisons


@dataclass
class CurvePoint:
    name: str
    epoch: int
    median: float
    q25: float
    q75: float
    min: float
    max: float
    n: int


@dataclass
class ComparisonReport:
    names: list[str]
    seeds: list[int]
    results: dict[tuple[str, int], RunResult]
    failures: list[tuple[str, int, str]] = field(default_factory=list)

    def runs(self, name: str) -> list[list[EpochMetrics]]:
        return [self.results[(name, s)].metrics for s in self.seeds if (name, s) in self.results]

    def curve(self, name: str, metric: str = "test_acc") -> list[CurvePoint]:
        runs = self.runs(name)
        if not runs:
            return []
        vals = np.array([[getattr(m, metric) for m in r] for r in runs])
        return [CurvePoint(name, e + 1, float(np.median(vals[:, e])),
                           float(np.quantile(vals[:, e], 0.25)), float(np.quantile(vals[:, e], 0.75)),
                           float(vals[:, e].min()), float(vals[:, e].max()), len(runs))
                for e in range(vals.shape[1])]

    def median_at(self, name: str, epoch: int, metric: str = "test_acc") -> float:
        return self.curve(name, metric)[epoch - 1].median

    def summary(self, metric: str = "test_acc") -> list[CurvePoint]:
        return [p for n in self.names for p in self.curve(n, metric)]

    def rows(self) -> list[dict]:
        out = []
        for name in self.names:
            for seed in self.seeds:
                r = self.results.get((name, seed))
                if r is not None:
                    out.extend(metrics_rows(name, seed, r.metrics))
        return out

    def manifest(self) -> dict:
        configs = {}
        for name in self.names:
            per_seed = {}
            for seed in self.seeds:
                r = self.results.get((name, seed))
                if r is not None:
                    per_seed[str(seed)] = run_manifest(r)
            configs[name] = per_seed
        return {"names": self.names, "seeds": self.seeds, "runs": configs,
                "failures": [{"name": n, "seed": s, "error": e} for n, s, e in self.failures]}


def compare(configs: Mapping[str, RunConfig], seeds: Sequence[int], keep_going: bool = True) -> ComparisonReport:
    """Run every named config under every seed; the config's own master_seed is replaced."""
    if not configs:
        raise ValueError("nothing to compare")
    seeds = [int(s) for s in seeds]
    cache: dict = {}
    results, failures = {}, []
    for name, cfg in configs.items():
        for seed in seeds:
            c = cfg.with_seed(seed)
            try:
                key = (c.data, c.num_classes)
                if key not in cache:
                    cache[key] = load_data(c.data, c.num_classes)
                results[(name, seed)] = run_detailed(c, cache[key])
            except Exception as exc:
                if not keep_going:
                    raise
                log.error("run %s seed=%d failed: %s", name, seed, exc)
                failures.append((name, seed, f"{type(exc).__name__}: {exc}"))
    return ComparisonReport(list(configs), seeds, results, failures)


def sweep_crossings(base_config: RunConfig, k_values: Sequence[int] = (1, 2, 3, 4, 5),
                    seeds: Sequence[int] = (0,), keep_going: bool = True) -> ComparisonReport:
    """One BraidNet per crossings-per-gap value, everything else held fixed."""
    for k in k_values:
        if k < 0:
            raise ValueError(f"crossings per gap must be non-negative, got {k}")
    configs = {f"braidnet-k{k}": dataclasses.replace(base_config, arch=arch.BRAIDNET, crossings_per_gap=k)
               for k in k_values}
    return compare(configs, seeds, keep_going)


# ---------------------------------------------------------------- output


def metrics_rows(name: str, seed: int, metrics: Sequence[EpochMetrics]) -> list[dict]:
    return [{"arch": name, "seed": seed, "epoch": m.epoch, "train_loss": repr(m.train_loss),
             "train_acc": repr(m.train_acc), "test_acc": repr(m.test_acc),
             "wall_ms": f"{m.wall_ms:.3f}"} for m in metrics]


def csv_text(rows: Sequence[dict]) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=CSV_FIELDS, lineterminator="\n")
    w.writeheader()
    w.writerows(rows)
    return buf.getvalue()


def deterministic_body(text: str, drop: Sequence[str] = TIMING_FIELDS) -> str:
    """CSV data rows with wall-clock columns removed, for reproducibility checks."""
    rows = list(csv.reader(io.StringIO(text)))
    keep = [i for i, h in enumerate(rows[0]) if h not in drop]
    return "\n".join(",".join(r[i] for i in keep) for r in rows[1:])


def summary_csv_text(points: Sequence[CurvePoint]) -> str:
    buf = io.StringIO()
    fields = [f.name for f in dataclasses.fields(CurvePoint)]
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(fields)
    for p in points:
        w.writerow([getattr(p, f) if not isinstance(getattr(p, f), float) else repr(getattr(p, f))
                    for f in fields])
    return buf.getvalue()


def run_manifest(result: RunResult) -> dict:
    word = result.spec.source_word
    return {
        "config": result.config.to_dict(),
        "braid_word": None if word is None else braid.format_word(word),
        "arch": result.spec.to_dict(),
    }


def write_atomic(path, text: str) -> None:
    path = os.fspath(path)
    fd, tmp = tempfile.mkstemp(dir=os.path.dirname(os.path.abspath(path)), suffix=".tmp")
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_json(path, obj) -> None:
    write_atomic(path, json.dumps(obj, indent=2, sort_keys=True) + "\n")
