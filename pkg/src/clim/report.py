"""Aggregates eval outputs from run directories into comparison tables.

A run directory is one (config, seed) cell: `config.json` written by the
pretrain command plus `eval.txt` lines of `metric<TAB>value<TAB>seed`.
Tables are plain tab-separated text so sweeps diff cleanly.
"""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path

from .errors import ValidationError

_METRICS = ("linear", "knn", "finetune", "intra_sim")


@dataclass(frozen=True)
class SweepRow:
    strategy: str
    mixing: str
    resolutions: tuple[int, ...]
    alpha: float
    clusters: object
    k: int
    seed: int
    metrics: tuple[tuple[str, float], ...]

    def config_key(self) -> tuple:
        return (self.strategy, self.mixing, self.resolutions, self.alpha, str(self.clusters), self.k)


def load_run_dir(path) -> SweepRow:
    """Read one run directory into a SweepRow."""
    root = Path(path)
    config_path = root / "config.json"
    if not config_path.exists():
        raise ValidationError(f"{root}: missing config.json")
    doc = json.loads(config_path.read_text())
    train = doc.get("train", {})
    aug = doc.get("augment", {})
    nei = doc.get("neighborhood", {})
    metrics = {}
    eval_path = root / "eval.txt"
    if eval_path.exists():
        for line in eval_path.read_text().splitlines():
            if not line.strip():
                continue
            parts = line.split("\t")
            if len(parts) != 3 or parts[2] == "mean":
                if len(parts) != 3:
                    warnings.warn(f"{eval_path}: skipping malformed metric line {line!r}")
                continue
            try:
                metrics[parts[0]] = float(parts[1])
            except ValueError:
                warnings.warn(f"{eval_path}: skipping malformed metric line {line!r}")
    return SweepRow(
        strategy=train.get("strategy", "clim"),
        mixing=train.get("mixing", "cutmix"),
        resolutions=tuple(aug.get("resolutions", ())),
        alpha=float(aug.get("alpha", 2.0)),
        clusters=nei.get("clusters", "auto"),
        k=int(nei.get("k", 40)),
        seed=int(train.get("seed", 0)),
        metrics=tuple(sorted(metrics.items())),
    )


@dataclass
class AggregateGroup:
    key: tuple
    seeds: list[int] = field(default_factory=list)
    values: dict[str, list[float]] = field(default_factory=dict)

    def mean_std(self, metric: str) -> tuple[float, float]:
        vals = self.values.get(metric, [])
        if not vals:
            return math.nan, math.nan
        mean = sum(vals) / len(vals)
        if len(vals) == 1:
            return mean, 0.0
        var = sum((v - mean) ** 2 for v in vals) / (len(vals) - 1)
        return mean, math.sqrt(var)


def aggregate(rows) -> list[AggregateGroup]:
    """Group rows by config, deduplicating repeated (config, seed) cells."""
    groups: dict[tuple, AggregateGroup] = {}
    seen: set[tuple] = set()
    for row in rows:
        cell = (row.config_key(), row.seed)
        if cell in seen:
            warnings.warn(f"duplicate run for config {row.config_key()} seed {row.seed}; skipped")
            continue
        seen.add(cell)
        group = groups.setdefault(row.config_key(), AggregateGroup(key=row.config_key()))
        group.seeds.append(row.seed)
        for metric, value in row.metrics:
            group.values.setdefault(metric, []).append(value)
    return sorted(groups.values(), key=lambda g: g.key)


def render_table(groups) -> str:
    """Tab-separated aggregate table, one line per config."""
    header = ["strategy", "mixing", "resolutions", "alpha", "clusters", "k", "seeds"]
    for metric in _METRICS:
        header += [f"{metric}_mean", f"{metric}_std"]
    lines = ["\t".join(header)]
    for group in groups:
        strategy, mixing, resolutions, alpha, clusters, k = group.key
        cells = [strategy, mixing, ",".join(str(r) for r in resolutions), f"{alpha:g}",
                 str(clusters), str(k), str(len(group.seeds))]
        for metric in _METRICS:
            mean, std = group.mean_std(metric)
            if math.isnan(mean):
                cells += ["-", "-"]
            else:
                cells += [f"{mean:.6f}", f"{std:.6f}"]
        lines.append("\t".join(cells))
    return "\n".join(lines) + "\n"


def compare_strategies(groups, metric: str = "linear") -> str:
    """Strategies ordered by mean probe accuracy, with pairwise deltas."""
    by_strategy: dict[str, list[float]] = {}
    for group in groups:
        mean, _ = group.mean_std(metric)
        if not math.isnan(mean):
            by_strategy.setdefault(group.key[0], []).append(mean)
    if not by_strategy:
        return "no strategies with recorded %s metric\n" % metric
    ranked = sorted(((sum(v) / len(v), name) for name, v in by_strategy.items()), reverse=True)
    lines = ["rank\tstrategy\t%s_mean\tdelta_to_next" % metric]
    for i, (mean, name) in enumerate(ranked):
        if i + 1 < len(ranked):
            delta = mean - ranked[i + 1][0]
            delta_cell = f"{delta:.6f}" + ("\ttie" if delta == 0.0 else "")
        else:
            delta_cell = "-"
        lines.append(f"{i + 1}\t{name}\t{mean:.6f}\t{delta_cell}")
    return "\n".join(lines) + "\n"
