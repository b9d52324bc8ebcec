#!/usr/bin/env python3
"""Full model-selection pipeline on a warfarin-format dataset.

Runs all 13 concentration models against one shared replicate store,
reports testing-median rankings, then freezes the individual PK
parameters of a chosen model and runs the 12 turnover response models
sequentially. Expects the classic columns ID, TIME, AMT, DV, DVID, WT,
AGE, SEX with DVID 1 = concentration, 2 = response.

Example:
    python scripts/warfarin_pipeline.py --data warfarin.csv --out results/ --B 100
"""

import argparse
import sys
import warnings
from pathlib import Path

from bscv import bootstrap
from bscv.data import parse_dataset
from bscv.estimate import FitOptions, FitResult
from bscv.modelspec import load_model_config
from bscv.report import ReportConfig, STATISTICS, aggregate, emit_outputs, rank_models

CONFIG_ROOT = Path(__file__).resolve().parent.parent / "configs"


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--data", required=True, help="warfarin-format CSV")
    parser.add_argument("--out", required=True, help="output directory")
    parser.add_argument("--B", type=int, default=100)
    parser.add_argument("--seed", type=int, default=42)
    parser.add_argument("--jobs", type=int, default=2)
    parser.add_argument("--pk-driver-model", default="pk_model_09",
                        help="PK model whose individual parameters drive the PD stage")
    parser.add_argument("--outer-iters", type=int, default=2500)
    parser.add_argument("--skip-pd", action="store_true")
    args = parser.parse_args()

    out = Path(args.out)
    dataset = parse_dataset(Path(args.data).read_text(encoding="utf-8"), provenance=args.data)
    print(f"dataset: {len(dataset.subjects)} subjects, "
          f"{dataset.n_observations()} observations")

    store_path = out / "store" / "replicates.jsonl"
    if store_path.exists():
        store = bootstrap.load_store(store_path)
        print(f"reusing store with B={store.b}")
    else:
        store = bootstrap.generate_replicates(dataset, args.B, args.seed)
        bootstrap.save_store(store, store_path)
        print(f"generated store: B={store.b}, "
              f"mean distinct fraction {bootstrap.inclusion_fraction(store):.5f}")

    options = FitOptions(
        outer_max_iters=args.outer_iters, outer_tolerance=1e-4,
        inner_tolerance=1e-5, multistart_count=2, seed=args.seed,
    )

    pk_records = {}
    for cfg in sorted((CONFIG_ROOT / "pk").glob("*.ini")):
        spec = load_model_config(cfg)
        print(f"running {spec.label} ...", flush=True)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            pk_records[spec.label] = bootstrap.run_model(
                spec, store, dataset, options, out / "pk", jobs=args.jobs
            )
    ensembles = aggregate(pk_records)
    rankings = [rank_models(ensembles, s) for s in STATISTICS]
    emit_outputs(ensembles, rankings, ReportConfig(out_dir=out / "pk_report"))
    for ranking in rankings:
        if ranking.statistic in ("minus2ll", "rss", "smpq"):
            best = ranking.entries[0]
            print(f"best by testing-median {ranking.statistic}: {best.label} "
                  f"({best.testing_median:.4f})")

    if args.skip_pd:
        return 0

    driver_record = out / "pk" / args.pk_driver_model / "original.json"
    if not driver_record.exists():
        print(f"no original-data record for {args.pk_driver_model}", file=sys.stderr)
        return 1
    import json

    pk_fit = FitResult.from_dict(json.loads(driver_record.read_text())["fit"])
    number = args.pk_driver_model.rsplit("_", 1)[-1]
    pk_spec = load_model_config(CONFIG_ROOT / "pk" / f"model{number}.ini")
    pd_context = bootstrap.pd_context_from_fit(pk_spec, pk_fit)

    pd_records = {}
    for cfg in sorted((CONFIG_ROOT / "pd").glob("*.ini")):
        spec = load_model_config(cfg)
        print(f"running {spec.label} ...", flush=True)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            pd_records[spec.label] = bootstrap.run_model(
                spec, store, dataset, options, out / "pd",
                pd_context=pd_context, jobs=args.jobs,
            )
    pd_ensembles = aggregate(pd_records)
    pd_rankings = [rank_models(pd_ensembles, s) for s in STATISTICS]
    emit_outputs(pd_ensembles, pd_rankings, ReportConfig(out_dir=out / "pd_report"))
    smpq_rank = next(r for r in pd_rankings if r.statistic == "smpq")
    print("\ntesting-median SMPQ ranking (best first):")
    for entry in smpq_rank.entries:
        value = "n/a" if entry.testing_median is None else f"{entry.testing_median:.6f}"
        print(f"  {entry.label}: {value}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
