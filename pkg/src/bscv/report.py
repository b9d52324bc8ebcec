"""Ensemble aggregation, median-based model ranking and report files.

Models are ranked on the medians of their testing-set statistic
ensembles; training medians and original-data values ride along so
training/testing divergence (overfitting) is visible at a glance.
"""

from __future__ import annotations

import csv
import io
import json
import os
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Mapping, Optional, Sequence, Union

STATISTICS = (
    "minus2ll",
    "aic",
    "bic",
    "rss",
    "rmse",
    "sad",
    "mad",
    "smpq",
    "eps_shrink_ebe",
    "eps_shrink_sim",
)

ROLES = ("original", "training", "testing")


class Direction(Enum):
    LOWER_BETTER = "lower_better"
    HIGHER_BETTER = "higher_better"
    NEAR_ZERO_BETTER = "near_zero_better"


DIRECTIONS: Mapping[str, Direction] = {
    "minus2ll": Direction.LOWER_BETTER,
    "aic": Direction.LOWER_BETTER,
    "bic": Direction.LOWER_BETTER,
    "rss": Direction.LOWER_BETTER,
    "rmse": Direction.LOWER_BETTER,
    "sad": Direction.LOWER_BETTER,
    "mad": Direction.LOWER_BETTER,
    "smpq": Direction.HIGHER_BETTER,
    "eps_shrink_ebe": Direction.NEAR_ZERO_BETTER,
    "eps_shrink_sim": Direction.NEAR_ZERO_BETTER,
}


class MixedStores(ValueError):
    pass


class UnknownStatistic(KeyError):
    pass


class IoFailure(OSError):
    pass


def median(values: Sequence[float]) -> Optional[float]:
    """Median with the even-length rule (mean of the two central order
    statistics); None for empty input."""
    vals = sorted(values)
    n = len(vals)
    if n == 0:
        return None
    mid = n // 2
    if n % 2 == 1:
        return float(vals[mid])
    return 0.5 * (vals[mid - 1] + vals[mid])


@dataclass
class MetricEnsemble:
    label: str
    store_fingerprint: str
    original: dict[str, Optional[float]] = field(default_factory=dict)
    training: dict[str, list[float]] = field(default_factory=dict)
    testing: dict[str, list[float]] = field(default_factory=dict)
    failures: dict[str, int] = field(default_factory=lambda: {"training": 0, "testing": 0})

    def values(self, role: str, statistic: str) -> list[float]:
        if statistic not in STATISTICS:
            raise UnknownStatistic(statistic)
        return {"training": self.training, "testing": self.testing}[role].get(statistic, [])

    def median_for(self, role: str, statistic: str) -> Optional[float]:
        return median(self.values(role, statistic))


def aggregate(records_by_model: Mapping[str, Sequence[Mapping]]) -> dict[str, MetricEnsemble]:
    """Assemble per-model ensembles from run records.

    Every record must come from the same replicate store; failed
    replicates contribute to the failure counts instead of the vectors.
    """
    fingerprints = {
        r.get("store_fingerprint")
        for records in records_by_model.values()
        for r in records
    }
    if len(fingerprints) > 1:
        raise MixedStores(f"records span {len(fingerprints)} different stores")
    fp = next(iter(fingerprints)) if fingerprints else ""

    out: dict[str, MetricEnsemble] = {}
    for label in sorted(records_by_model):
        ens = MetricEnsemble(
            label=label,
            store_fingerprint=fp,
            training={s: [] for s in STATISTICS},
            testing={s: [] for s in STATISTICS},
            original={s: None for s in STATISTICS},
        )
        for record in records_by_model[label]:
            role = record.get("role")
            metrics = record.get("metrics")
            failed = record.get("error") is not None or metrics is None
            if role == "original":
                if not failed:
                    for s in STATISTICS:
                        ens.original[s] = metrics.get(s)
                continue
            if failed:
                ens.failures[role] += 1
                continue
            bucket = ens.training if role == "training" else ens.testing
            for s in STATISTICS:
                value = metrics.get(s)
                if value is not None:
                    bucket[s].append(float(value))
        out[label] = ens
    return out


@dataclass(frozen=True)
class RankEntry:
    label: str
    testing_median: Optional[float]
    training_median: Optional[float]
    original: Optional[float]


@dataclass(frozen=True)
class Ranking:
    statistic: str
    direction: Direction
    entries: tuple[RankEntry, ...]


def rank_models(ensembles: Mapping[str, MetricEnsemble], statistic: str) -> Ranking:
    """Order models by testing-set medians of one statistic.

    Direction: lower is better for likelihood and residual statistics,
    higher for SMPQ, nearest zero for the shrinkages. Ties (and models
    without a median) order lexicographically by label.
    """
    if statistic not in STATISTICS:
        raise UnknownStatistic(statistic)
    direction = DIRECTIONS[statistic]
    entries = []
    for label in sorted(ensembles):
        ens = ensembles[label]
        entries.append(
            RankEntry(
                label=label,
                testing_median=ens.median_for("testing", statistic),
                training_median=ens.median_for("training", statistic),
                original=ens.original.get(statistic),
            )
        )

    def sort_key(e: RankEntry):
        m = e.testing_median
        if m is None:
            return (1, 0.0, e.label)
        if direction is Direction.LOWER_BETTER:
            score = m
        elif direction is Direction.HIGHER_BETTER:
            score = -m
        else:
            score = abs(m)
        return (0, score, e.label)

    return Ranking(
        statistic=statistic,
        direction=direction,
        entries=tuple(sorted(entries, key=sort_key)),
    )


@dataclass(frozen=True)
class ReportConfig:
    statistics: tuple[str, ...] = STATISTICS
    out_dir: Union[str, Path] = "report"
    formats: tuple[str, ...] = ("json", "long-csv", "plot-csv")

    def __post_init__(self):
        if not self.statistics or not self.formats:
            raise ValueError("need at least one statistic and one format")
        unknown = set(self.statistics) - set(STATISTICS)
        if unknown:
            raise UnknownStatistic(f"unknown statistics: {sorted(unknown)}")
        bad = set(self.formats) - {"json", "long-csv", "plot-csv"}
        if bad:
            raise ValueError(f"unknown formats: {sorted(bad)}")


def _atomic_write(path: Path, content: str) -> None:
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        tmp = path.with_suffix(path.suffix + ".tmp")
        tmp.write_text(content, encoding="utf-8")
        os.replace(tmp, path)
    except OSError as exc:
        raise IoFailure(f"cannot write {path}: {exc}") from exc


def emit_outputs(
    ensembles: Mapping[str, MetricEnsemble],
    rankings: Sequence[Ranking],
    config: ReportConfig,
) -> list[Path]:
    """Write the report files; byte-identical given identical inputs."""
    out_dir = Path(config.out_dir)
    written: list[Path] = []

    if "json" in config.formats:
        doc = {
            "format": "bscv-report",
            "version": 1,
            "statistics": list(config.statistics),
            "models": {
                label: {
                    stat: {
                        "original": ens.original.get(stat),
                        "training_median": ens.median_for("training", stat),
                        "testing_median": ens.median_for("testing", stat),
                        "n_training": len(ens.values("training", stat)),
                        "n_testing": len(ens.values("testing", stat)),
                    }
                    for stat in config.statistics
                }
                for label, ens in sorted(ensembles.items())
            },
            "failures": {
                label: dict(ens.failures) for label, ens in sorted(ensembles.items())
            },
            "rankings": {
                r.statistic: {
                    "direction": r.direction.value,
                    "order": [
                        {
                            "model": e.label,
                            "testing_median": e.testing_median,
                            "training_median": e.training_median,
                            "original": e.original,
                        }
                        for e in r.entries
                    ],
                }
                for r in rankings
            },
        }
        path = out_dir / "report.json"
        _atomic_write(path, json.dumps(doc, sort_keys=True, indent=2) + "\n")
        written.append(path)

    if "long-csv" in config.formats:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["model", "statistic", "role", "replicate", "value"])
        for label, ens in sorted(ensembles.items()):
            for stat in config.statistics:
                original = ens.original.get(stat)
                if original is not None:
                    writer.writerow([label, stat, "original", "", repr(original)])
                for role in ("training", "testing"):
                    for idx, value in enumerate(ens.values(role, stat)):
                        writer.writerow([label, stat, role, idx, repr(value)])
        path = out_dir / "values_long.csv"
        _atomic_write(path, buf.getvalue())
        written.append(path)

    if "plot-csv" in config.formats:
        # three-panel summary: original value, training median, testing median
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["model", "statistic", "role", "value"])
        for label, ens in sorted(ensembles.items()):
            for stat in config.statistics:
                rows = (
                    ("original", ens.original.get(stat)),
                    ("training", ens.median_for("training", stat)),
                    ("testing", ens.median_for("testing", stat)),
                )
                for role, value in rows:
                    if value is not None:
                        writer.writerow([label, stat, role, repr(value)])
        path = out_dir / "medians_plot.csv"
        _atomic_write(path, buf.getvalue())
        written.append(path)

    return written


def load_records(results_dir: Union[str, Path]) -> dict[str, list[dict]]:
    """Read all record JSONs under results_dir, grouped by model label."""
    results_dir = Path(results_dir)
    out: dict[str, list[dict]] = {}
    for path in sorted(results_dir.glob("*/*.json")):
        record = json.loads(path.read_text(encoding="utf-8"))
        if record.get("format") != "bscv-record":
            continue
        out.setdefault(record["model"], []).append(record)
    return out
