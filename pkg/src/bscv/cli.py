"""Command line interface: generate, run, report, simulate."""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from . import bootstrap, report as report_mod
from .data import parse_dataset, serialize_dataset
from .estimate import FitOptions, FitResult, LlMode
from .modelspec import load_model_config
from .simulate import SimDesign, load_sim_design, simulate_dataset

STORE_FILENAME = "replicates.jsonl"


def _read_dataset(path: str):
    return parse_dataset(Path(path).read_text(encoding="utf-8"), provenance=path)


def _store_path(raw: str) -> Path:
    p = Path(raw)
    if p.is_dir() or raw.endswith("/") or not p.suffix:
        return p / STORE_FILENAME
    return p


def _cmd_generate(args) -> int:
    dataset = _read_dataset(args.data)
    store = bootstrap.generate_replicates(dataset, args.B, args.seed)
    path = bootstrap.save_store(store, _store_path(args.out))
    frac = bootstrap.inclusion_fraction(store)
    print(
        f"store: {path}\nreplicates: {store.b}  subjects: {store.n_subjects}  "
        f"mean distinct fraction: {frac:.5f}"
    )
    return 0


def _model_configs(raw: str) -> list:
    p = Path(raw)
    if p.is_dir():
        files = sorted(p.glob("*.ini"))
        if not files:
            raise FileNotFoundError(f"no .ini model configs under {p}")
        return [load_model_config(f) for f in files]
    return [load_model_config(p)]


def _cmd_run(args) -> int:
    dataset = _read_dataset(args.data)
    store = bootstrap.load_store(_store_path(args.store))
    specs = _model_configs(args.models)
    options = FitOptions(
        outer_max_iters=args.outer_iters,
        outer_tolerance=args.outer_tol,
        inner_tolerance=args.inner_tol,
        multistart_count=args.multistart,
        ll_mode=LlMode(args.ll_mode),
        is_samples=args.is_samples,
        seed=args.seed,
    )
    pd_context = None
    if args.pk_fit:
        if not args.pk_model:
            raise ValueError("--pk-fit needs --pk-model (the PK model config)")
        import json

        record = json.loads(Path(args.pk_fit).read_text(encoding="utf-8"))
        fit_dict = record.get("fit", record)
        pk_fit = FitResult.from_dict(fit_dict)
        pk_spec = load_model_config(Path(args.pk_model))
        pd_context = bootstrap.pd_context_from_fit(pk_spec, pk_fit)
    for spec in specs:
        bootstrap.run_model(
            spec,
            store,
            dataset,
            options,
            args.out,
            pd_context=pd_context,
            jobs=args.jobs,
            sim_draws=args.sim_draws,
        )
        print(f"ran {spec.label}: {store.b} replicates -> {Path(args.out) / spec.label}")
    return 0


def _cmd_report(args) -> int:
    records = report_mod.load_records(args.results)
    if not records:
        raise FileNotFoundError(f"no run records under {args.results}")
    ensembles = report_mod.aggregate(records)
    stats = (
        report_mod.STATISTICS
        if args.stats == "all"
        else tuple(s.strip() for s in args.stats.split(",") if s.strip())
    )
    rankings = [report_mod.rank_models(ensembles, s) for s in stats]
    config = report_mod.ReportConfig(
        statistics=stats, out_dir=args.out, formats=tuple(args.formats.split(","))
    )
    written = report_mod.emit_outputs(ensembles, rankings, config)
    for ranking in rankings:
        print(f"{ranking.statistic} ({ranking.direction.value}), best first:")
        for e in ranking.entries:
            t = "n/a" if e.testing_median is None else f"{e.testing_median:.6g}"
            tr = "n/a" if e.training_median is None else f"{e.training_median:.6g}"
            print(f"  {e.label}: testing median {t}, training median {tr}")
    for path in written:
        print(f"wrote {path}")
    return 0


def _cmd_simulate(args) -> int:
    spec = load_model_config(Path(args.model))
    design = load_sim_design(Path(args.model)) or SimDesign()
    if args.dose is not None:
        design = SimDesign(
            dose_amount=args.dose,
            dose_time=design.dose_time,
            times=design.times,
            weight_mean=design.weight_mean,
            weight_cv=design.weight_cv,
            age_low=design.age_low,
            age_high=design.age_high,
        )
    if args.times:
        design = SimDesign(
            dose_amount=design.dose_amount,
            dose_time=design.dose_time,
            times=tuple(float(t) for t in args.times.split(",")),
            weight_mean=design.weight_mean,
            weight_cv=design.weight_cv,
            age_low=design.age_low,
            age_high=design.age_high,
        )
    dataset = simulate_dataset(spec, args.n_subjects, args.seed, design)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(serialize_dataset(dataset), encoding="utf-8")
    print(f"wrote {out} ({args.n_subjects} subjects, {dataset.n_observations()} observations)")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="bscv",
        description=(
            "Bootstrap cross-validation for population PK/PD model selection: "
            "resample subjects with replacement, fit every candidate on each "
            "training set, evaluate on the omitted subjects, and rank models "
            "by testing-set medians."
        ),
    )
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="draw and persist bootstrap replicates")
    g.add_argument("--data", required=True, help="dataset CSV")
    g.add_argument("--B", type=int, default=100, help="number of replicates")
    g.add_argument("--seed", type=int, default=0, help="master seed")
    g.add_argument("--out", required=True, help="store directory or file")
    g.set_defaults(func=_cmd_generate)

    r = sub.add_parser("run", help="run models against a replicate store")
    r.add_argument("--models", required=True, help="model config file or directory of .ini files")
    r.add_argument("--store", required=True, help="replicate store path")
    r.add_argument("--data", required=True, help="dataset CSV (must match the store)")
    r.add_argument("--ll-mode", choices=["laplace", "importance"], default="laplace")
    r.add_argument("--is-samples", type=int, default=1000)
    r.add_argument("--jobs", type=int, default=1, help="parallel replicate workers")
    r.add_argument("--out", required=True, help="results directory")
    r.add_argument("--seed", type=int, default=0, help="fit/evaluation seed")
    r.add_argument("--outer-iters", type=int, default=2000)
    r.add_argument("--outer-tol", type=float, default=1e-5)
    r.add_argument("--inner-tol", type=float, default=1e-6)
    r.add_argument("--multistart", type=int, default=2)
    r.add_argument("--sim-draws", type=int, default=0,
                   help="conditional draws for simulation-based shrinkage (0 = skip)")
    r.add_argument("--pk-fit", help="record JSON with the frozen PK fit (sequential PD)")
    r.add_argument("--pk-model", help="PK model config matching --pk-fit")
    r.set_defaults(func=_cmd_run)

    p = sub.add_parser("report", help="aggregate records and rank models")
    p.add_argument("--results", required=True, help="directory written by run")
    p.add_argument("--stats", default="all", help="comma list of statistics or 'all'")
    p.add_argument("--out", default="report", help="report output directory")
    p.add_argument("--formats", default="json,long-csv,plot-csv")
    p.set_defaults(func=_cmd_report)

    s = sub.add_parser("simulate", help="draw a synthetic dataset from a model config")
    s.add_argument("--model", required=True, help="model config file")
    s.add_argument("--n-subjects", type=int, default=32)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True, help="output CSV path")
    s.add_argument("--dose", type=float, help="override dose amount")
    s.add_argument("--times", help="override observation times (comma list)")
    s.set_defaults(func=_cmd_simulate)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except Exception as exc:
        print(f"bscv: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
