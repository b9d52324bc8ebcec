"""Subject-level bootstrap replicates with out-of-bag bookkeeping.

Each replicate resamples the N subjects with replacement; the selected
multiset is the training set and the omitted subjects form the testing
set. Replicates are persisted (id lists + seeds, not copied data) so
every candidate model runs against the identical partitions.
"""

from __future__ import annotations

import json
import os
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Mapping, Optional, Sequence, Union

import numpy as np

from . import metrics as metrics_mod
from .data import Dataset, Subject, fingerprint, relabel
from .estimate import (
    FitOptions,
    FitResult,
    LlMode,
    TestEvaluation,
    evaluate_fixed,
    fit_population,
    sequential_pd_prepare,
)
from .modelspec import ModelSpec, resolve_theta


class TooFewSubjects(ValueError):
    pass


class FingerprintMismatch(ValueError):
    pass


class StoreMissing(FileNotFoundError):
    pass


_MASK64 = (1 << 64) - 1
_GOLDEN = 0x9E3779B97F4A7C15

#: documented in the store header; replicate seeds are
#: splitmix64(splitmix64(master + GOLDEN*(index+1)) + retry)
SEED_DERIVATION = (
    "splitmix64(splitmix64(master_seed + 0x9E3779B97F4A7C15*(index+1)) + retry)"
)


def splitmix64(x: int) -> int:
    x = (x + _GOLDEN) & _MASK64
    x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) & _MASK64
    return (x ^ (x >> 31)) & _MASK64


def replicate_seed(master_seed: int, index: int, retry: int = 0) -> int:
    inner = splitmix64((master_seed + _GOLDEN * (index + 1)) & _MASK64)
    return splitmix64((inner + retry) & _MASK64)


@dataclass(frozen=True)
class BootstrapReplicate:
    index: int
    seed: int
    selected: tuple[str, ...]  # sorted, with multiplicity; length N
    oob: tuple[str, ...]  # sorted

    def __post_init__(self):
        overlap = set(self.selected) & set(self.oob)
        if overlap:
            raise ValueError(f"replicate {self.index}: ids in both sets: {overlap}")
        if not self.oob:
            raise ValueError(f"replicate {self.index}: empty out-of-bag set")

    @property
    def n_distinct(self) -> int:
        return len(set(self.selected))

    def multiplicities(self) -> dict[str, int]:
        out: dict[str, int] = {}
        for sid in self.selected:
            out[sid] = out.get(sid, 0) + 1
        return out


@dataclass(frozen=True)
class ReplicateStore:
    b: int
    master_seed: int
    n_subjects: int
    dataset_fingerprint: str
    replicates: tuple[BootstrapReplicate, ...]

    def __post_init__(self):
        if len(self.replicates) != self.b:
            raise ValueError(
                f"store declares B={self.b} but holds {len(self.replicates)} replicates"
            )


def draw_selection(rng: np.random.Generator, subject_ids: Sequence[str]) -> tuple[str, ...]:
    """One raw bootstrap draw: N uniform picks with replacement, sorted."""
    n = len(subject_ids)
    picks = rng.integers(0, n, size=n)
    return tuple(sorted(subject_ids[int(i)] for i in picks))


def generate_replicates(dataset: Dataset, b: int, master_seed: int) -> ReplicateStore:
    """Draw B subject-level replicates; empty-OOB draws are redrawn with
    a derived retry seed so B is preserved."""
    ids = dataset.subject_ids
    n = len(ids)
    if n < 2:
        raise TooFewSubjects(f"need at least 2 subjects, got {n}")
    if b < 1:
        raise ValueError(f"B must be >= 1, got {b}")
    replicates = []
    for index in range(b):
        for retry in range(1000):
            seed = replicate_seed(master_seed, index, retry)
            rng = np.random.Generator(np.random.PCG64(seed))
            selected = draw_selection(rng, ids)
            oob = tuple(sorted(set(ids) - set(selected)))
            if oob:
                break
        else:
            raise RuntimeError(f"replicate {index}: no non-empty OOB draw in 1000 tries")
        replicates.append(
            BootstrapReplicate(index=index, seed=seed, selected=selected, oob=oob)
        )
    return ReplicateStore(
        b=b,
        master_seed=master_seed,
        n_subjects=n,
        dataset_fingerprint=fingerprint(dataset),
        replicates=tuple(replicates),
    )


def inclusion_fraction(store: ReplicateStore) -> float:
    """Mean fraction of distinct subjects per replicate (about 0.632)."""
    fractions = [r.n_distinct / store.n_subjects for r in store.replicates]
    return float(np.mean(fractions))


def save_store(store: ReplicateStore, path: Union[str, Path]) -> Path:
    """One JSON header line plus one JSON line per replicate."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    header = {
        "format": "bscv-store",
        "version": 1,
        "B": store.b,
        "master_seed": store.master_seed,
        "n_subjects": store.n_subjects,
        "dataset_fingerprint": store.dataset_fingerprint,
        "seed_derivation": SEED_DERIVATION,
    }
    lines = [json.dumps(header, sort_keys=True)]
    for r in store.replicates:
        lines.append(
            json.dumps(
                {
                    "index": r.index,
                    "seed": r.seed,
                    "selected": list(r.selected),
                    "oob": list(r.oob),
                },
                sort_keys=True,
            )
        )
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_text("\n".join(lines) + "\n", encoding="utf-8")
    os.replace(tmp, path)
    return path


def load_store(path: Union[str, Path]) -> ReplicateStore:
    path = Path(path)
    if not path.exists():
        raise StoreMissing(str(path))
    lines = path.read_text(encoding="utf-8").strip().splitlines()
    header = json.loads(lines[0])
    if header.get("format") != "bscv-store":
        raise ValueError(f"{path}: not a replicate store")
    replicates = []
    for line in lines[1:]:
        d = json.loads(line)
        replicates.append(
            BootstrapReplicate(
                index=int(d["index"]),
                seed=int(d["seed"]),
                selected=tuple(d["selected"]),
                oob=tuple(d["oob"]),
            )
        )
    return ReplicateStore(
        b=int(header["B"]),
        master_seed=int(header["master_seed"]),
        n_subjects=int(header["n_subjects"]),
        dataset_fingerprint=header["dataset_fingerprint"],
        replicates=tuple(replicates),
    )


def materialize(
    store: ReplicateStore, index: int, dataset: Dataset
) -> tuple[Dataset, Dataset]:
    """(training, testing) datasets for one replicate.

    Training subjects are copies relabeled with an occurrence suffix
    (id#1, id#2, ...) so the mixed-effects machinery treats duplicates
    as independent individuals; testing keeps original ids.
    """
    if store.dataset_fingerprint != fingerprint(dataset):
        raise FingerprintMismatch(
            "dataset does not match the fingerprint recorded in the store"
        )
    rep = store.replicates[index]
    by_id = {s.id: s for s in dataset.subjects}
    training: list[Subject] = []
    for sid in sorted(rep.multiplicities()):
        for k in range(1, rep.multiplicities()[sid] + 1):
            training.append(relabel(by_id[sid], f"{sid}#{k}", origin=sid))
    testing = [by_id[sid] for sid in rep.oob]
    tag = f"replicate {index} of {store.b} (master seed {store.master_seed})"
    return (
        Dataset(subjects=tuple(training), provenance=f"training, {tag}"),
        Dataset(subjects=tuple(testing), provenance=f"testing, {tag}"),
    )


# ---------------------------------------------------------------------------
# per-model, per-replicate runs
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class PdContext:
    """Everything needed to rebuild frozen concentration drivers in a
    worker process: the PK spec plus its fitted estimates."""

    pk_spec: ModelSpec
    theta: Mapping[str, float]
    ebes: Mapping[str, tuple[float, ...]]

    def fit_result(self) -> FitResult:
        return FitResult(
            theta_hat=dict(self.theta),
            minus2ll=float("nan"),
            ebes={k: tuple(v) for k, v in self.ebes.items()},
            converged=True,
            n_obs=0,
            p_count=self.pk_spec.p_count,
        )

    def drivers_for(self, dataset: Dataset) -> dict[str, Callable[[float], float]]:
        return sequential_pd_prepare(self.fit_result(), self.pk_spec, dataset)


def pd_context_from_fit(pk_spec: ModelSpec, pk_fit: FitResult) -> PdContext:
    return PdContext(pk_spec=pk_spec, theta=dict(pk_fit.theta_hat), ebes=dict(pk_fit.ebes))


def record_path(out_dir: Union[str, Path], label: str, role: str,
                replicate: Optional[int] = None) -> Path:
    base = Path(out_dir) / label
    if replicate is None:
        return base / "original.json"
    return base / f"rep_{replicate:04d}_{role}.json"


def _write_record(path: Path, record: dict) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(".tmp")
    tmp.write_text(json.dumps(record, sort_keys=True, indent=1) + "\n", encoding="utf-8")
    os.replace(tmp, path)


def _observed_flat(dataset: Dataset, spec: ModelSpec, order: Sequence[str]) -> np.ndarray:
    by_id = {s.id: s for s in dataset.subjects}
    values = []
    for sid in order:
        values.extend(o.value for o in by_id[sid].observations_for(spec.channel))
    return np.array(values)


def _metrics_for(
    spec: ModelSpec,
    theta: Mapping[str, float],
    dataset: Dataset,
    evaluation: TestEvaluation,
    sim_draws: int,
    seed: int,
    drivers=None,
) -> Optional[dict]:
    obs = _observed_flat(dataset, spec, evaluation.order)
    if obs.size == 0:
        return None
    eps_sim = None
    if sim_draws > 0:
        kept = [s for s in dataset.subjects if s.id in evaluation.ipred]
        sub = Dataset(subjects=tuple(kept), provenance=dataset.provenance)
        eps_sim = metrics_mod.eps_shrinkage_sim(
            spec, theta, sub, sim_draws, seed, drivers=drivers
        )
    mset = metrics_mod.assemble_metric_set(
        evaluation, obs, spec, eps_shrink_sim=eps_sim
    )
    return mset.to_dict()


def _base_record(spec, store, role, replicate):
    return {
        "format": "bscv-record",
        "version": 1,
        "model": spec.label,
        "role": role,
        "replicate": replicate,
        "store_fingerprint": store.dataset_fingerprint,
    }


def _run_one_replicate(
    spec: ModelSpec,
    store: ReplicateStore,
    dataset: Dataset,
    options: FitOptions,
    index: int,
    out_dir: Path,
    pd_context: Optional[PdContext],
    sim_draws: int,
) -> tuple[Path, Path]:
    train_path = record_path(out_dir, spec.label, "training", index)
    test_path = record_path(out_dir, spec.label, "testing", index)
    if train_path.exists() and test_path.exists():
        return train_path, test_path

    rep_seed = splitmix64((options.seed + _GOLDEN * (index + 1)) & _MASK64)
    rep_options = FitOptions(
        outer_max_iters=options.outer_max_iters,
        outer_tolerance=options.outer_tolerance,
        inner_tolerance=options.inner_tolerance,
        multistart_count=options.multistart_count,
        ll_mode=options.ll_mode,
        is_samples=options.is_samples,
        seed=rep_seed,
    )
    training, testing = materialize(store, index, dataset)
    train_record = _base_record(spec, store, "training", index)
    test_record = _base_record(spec, store, "testing", index)
    train_record["seed"] = rep_seed
    test_record["seed"] = rep_seed
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            train_drivers = pd_context.drivers_for(training) if pd_context else None
            test_drivers = pd_context.drivers_for(testing) if pd_context else None
            fit = fit_population(spec, training, rep_options, drivers=train_drivers)
            train_eval = evaluate_fixed(
                spec, fit.theta_hat, training, rep_options, drivers=train_drivers
            )
            test_eval = evaluate_fixed(
                spec, fit.theta_hat, testing, rep_options, drivers=test_drivers
            )
        train_record.update(
            fit=fit.to_dict(),
            eval=train_eval.to_dict(),
            metrics=_metrics_for(
                spec, fit.theta_hat, training, train_eval, sim_draws, rep_seed,
                drivers=train_drivers,
            ),
            failed_subjects=len(train_eval.failed_subjects),
            error=None,
        )
        test_record.update(
            fit=None,
            eval=test_eval.to_dict(),
            metrics=_metrics_for(
                spec, fit.theta_hat, testing, test_eval, sim_draws, rep_seed,
                drivers=test_drivers,
            ),
            failed_subjects=len(test_eval.failed_subjects),
            error=None,
        )
    except Exception as exc:  # failed replicates are recorded, not dropped
        failure = {"type": type(exc).__name__, "message": str(exc)}
        for record in (train_record, test_record):
            record.update(fit=None, eval=None, metrics=None, error=failure,
                          failed_subjects=0)
    _write_record(train_path, train_record)
    _write_record(test_path, test_record)
    return train_path, test_path


def _replicate_worker(args) -> tuple[int, str, str]:
    spec, store, dataset, options, index, out_dir, pd_context, sim_draws = args
    train_path, test_path = _run_one_replicate(
        spec, store, dataset, options, index, Path(out_dir), pd_context, sim_draws
    )
    return index, str(train_path), str(test_path)


def run_model(
    spec: ModelSpec,
    store: ReplicateStore,
    dataset: Dataset,
    options: FitOptions,
    out_dir: Union[str, Path],
    pd_context: Optional[PdContext] = None,
    jobs: int = 1,
    sim_draws: int = 0,
) -> list[dict]:
    """Fit/evaluate one model on every replicate plus the original data.

    Produces one JSON record per (replicate, role) and one original-data
    record; existing records are reused so interrupted runs resume.
    Returns all records in (original, per-replicate) order.
    """
    if store.dataset_fingerprint != fingerprint(dataset):
        raise FingerprintMismatch(
            "dataset does not match the fingerprint recorded in the store"
        )
    out_dir = Path(out_dir)
    original_path = record_path(out_dir, spec.label, "original")
    if not original_path.exists():
        record = _base_record(spec, store, "original", None)
        record["seed"] = options.seed
        try:
            with warnings.catch_warnings():
                warnings.simplefilter("ignore")
                drivers = pd_context.drivers_for(dataset) if pd_context else None
                fit = fit_population(spec, dataset, options, drivers=drivers)
                evaluation = evaluate_fixed(
                    spec, fit.theta_hat, dataset, options, drivers=drivers
                )
            record.update(
                fit=fit.to_dict(),
                eval=evaluation.to_dict(),
                metrics=_metrics_for(
                    spec, fit.theta_hat, dataset, evaluation, sim_draws,
                    options.seed, drivers=drivers,
                ),
                failed_subjects=len(evaluation.failed_subjects),
                error=None,
            )
        except Exception as exc:
            record.update(
                fit=None, eval=None, metrics=None,
                error={"type": type(exc).__name__, "message": str(exc)},
                failed_subjects=0,
            )
        _write_record(original_path, record)

    pending = [
        (spec, store, dataset, options, index, str(out_dir), pd_context, sim_draws)
        for index in range(store.b)
    ]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            list(pool.map(_replicate_worker, pending, chunksize=1))
    else:
        for args in pending:
            _replicate_worker(args)

    records = [json.loads(original_path.read_text(encoding="utf-8"))]
    for index in range(store.b):
        for role in ("training", "testing"):
            p = record_path(out_dir, spec.label, role, index)
            records.append(json.loads(p.read_text(encoding="utf-8")))
    return records
