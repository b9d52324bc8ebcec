import csv
import json

import pytest

from bscv.report import (
    Direction,
    MixedStores,
    Ranking,
    ReportConfig,
    STATISTICS,
    UnknownStatistic,
    aggregate,
    emit_outputs,
    median,
    rank_models,
)


def make_record(model, role, replicate, minus2ll, fp="fp0", failed=False, **extra):
    metrics = None
    if not failed:
        metrics = {s: None for s in STATISTICS}
        metrics.update(minus2ll=minus2ll, aic=minus2ll + 2, bic=minus2ll + 3,
                       rss=1.0, rmse=1.0, sad=1.0, mad=1.0, smpq=2.0,
                       eps_shrink_ebe=0.05, n_obs=10, p_count=1)
        metrics.update(extra)
    return {
        "format": "bscv-record",
        "version": 1,
        "model": model,
        "role": role,
        "replicate": replicate,
        "store_fingerprint": fp,
        "metrics": metrics,
        "error": {"type": "boom", "message": "x"} if failed else None,
    }


def test_median_rules():
    assert median([1.0, 2.0, 3.0]) == 2.0
    assert median([1.0, 2.0, 3.0, 4.0]) == 2.5
    assert median([]) is None
    assert median([5.0]) == 5.0


def test_aggregate_counts_and_failures():
    records = {
        "m1": [make_record("m1", "original", None, 50.0)]
        + [make_record("m1", "training", i, 40.0 + i) for i in range(4)]
        + [make_record("m1", "testing", i, 20.0 + i) for i in range(2)]
        + [make_record("m1", "testing", 2, 0.0, failed=True)],
    }
    ens = aggregate(records)["m1"]
    assert ens.original["minus2ll"] == 50.0
    assert ens.values("training", "minus2ll") == [40.0, 41.0, 42.0, 43.0]
    assert ens.median_for("training", "minus2ll") == 41.5
    assert ens.values("testing", "minus2ll") == [20.0, 21.0]
    assert ens.failures == {"training": 0, "testing": 1}
    # vector length + failures = B for the testing role
    assert len(ens.values("testing", "minus2ll")) + ens.failures["testing"] == 3


def test_aggregate_rejects_mixed_stores():
    records = {
        "m1": [make_record("m1", "training", 0, 1.0, fp="a")],
        "m2": [make_record("m2", "training", 0, 1.0, fp="b")],
    }
    with pytest.raises(MixedStores):
        aggregate(records)


def ensembles_for_ranking():
    records = {
        "alpha": [make_record("alpha", "testing", i, v, smpq=4.959724)
                  for i, v in enumerate([500.0, 500.0, 500.0])]
        + [make_record("alpha", "training", 0, 450.0, smpq=5.2)],
        "beta": [make_record("beta", "testing", i, v, smpq=4.881644)
                 for i, v in enumerate([520.0, 520.0, 520.0])]
        + [make_record("beta", "training", 0, 430.0, smpq=5.4)],
    }
    return aggregate(records)


def test_rank_lower_better():
    ranking = rank_models(ensembles_for_ranking(), "minus2ll")
    assert [e.label for e in ranking.entries] == ["alpha", "beta"]
    assert ranking.direction is Direction.LOWER_BETTER
    assert ranking.entries[0].testing_median == 500.0
    assert ranking.entries[0].training_median == 450.0


def test_rank_smpq_higher_better():
    ranking = rank_models(ensembles_for_ranking(), "smpq")
    assert ranking.direction is Direction.HIGHER_BETTER
    assert [e.label for e in ranking.entries] == ["alpha", "beta"]
    assert ranking.entries[0].testing_median == pytest.approx(4.959724)
    assert ranking.entries[1].testing_median == pytest.approx(4.881644)


def test_rank_near_zero_and_ties():
    records = {
        "pos": [make_record("pos", "testing", 0, 1.0, eps_shrink_ebe=0.30)],
        "neg": [make_record("neg", "testing", 0, 1.0, eps_shrink_ebe=-0.10)],
        "tie_b": [make_record("tie_b", "testing", 0, 1.0, eps_shrink_ebe=0.2)],
        "tie_a": [make_record("tie_a", "testing", 0, 1.0, eps_shrink_ebe=-0.2)],
    }
    ranking = rank_models(aggregate(records), "eps_shrink_ebe")
    assert ranking.direction is Direction.NEAR_ZERO_BETTER
    assert [e.label for e in ranking.entries] == ["neg", "tie_a", "tie_b", "pos"]


def test_rank_unknown_statistic():
    with pytest.raises(UnknownStatistic):
        rank_models(ensembles_for_ranking(), "nope")


def test_rank_deterministic_pure():
    ens = ensembles_for_ranking()
    assert rank_models(ens, "aic") == rank_models(ens, "aic")


def test_emit_outputs_row_counts_and_roundtrip(tmp_path):
    records = {
        "m": [make_record("m", "original", None, 50.0)]
        + [make_record("m", "training", i, 40.0 + i) for i in range(2)]
        + [make_record("m", "testing", i, 30.0 + i) for i in range(2)],
    }
    ens = aggregate(records)
    config = ReportConfig(statistics=("minus2ll",), out_dir=tmp_path)
    rankings = [rank_models(ens, "minus2ll")]
    written = emit_outputs(ens, rankings, config)
    names = {p.name for p in written}
    assert names == {"report.json", "values_long.csv", "medians_plot.csv"}

    with open(tmp_path / "values_long.csv", newline="") as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["model", "statistic", "role", "replicate", "value"]
    assert len(rows) == 1 + 1 + 2 + 2  # header + original + training + testing
    original_rows = [r for r in rows[1:] if r[2] == "original"]
    assert original_rows[0][3] == ""  # replicate empty for the original role

    # long CSV re-aggregates to the JSON medians exactly
    report = json.loads((tmp_path / "report.json").read_text())
    training_vals = [float(r[4]) for r in rows[1:] if r[2] == "training"]
    assert median(training_vals) == report["models"]["m"]["minus2ll"]["training_median"]


def test_emit_outputs_deterministic(tmp_path):
    records = {
        "m": [make_record("m", "training", i, 40.0 + i) for i in range(3)],
    }
    ens = aggregate(records)
    rankings = [rank_models(ens, "minus2ll")]
    out1 = emit_outputs(ens, rankings, ReportConfig(out_dir=tmp_path / "a"))
    out2 = emit_outputs(ens, rankings, ReportConfig(out_dir=tmp_path / "b"))
    for p1, p2 in zip(out1, out2):
        assert p1.read_bytes() == p2.read_bytes()


def test_report_config_validation(tmp_path):
    with pytest.raises(ValueError):
        ReportConfig(statistics=())
    with pytest.raises(UnknownStatistic):
        ReportConfig(statistics=("bogus",))
    with pytest.raises(ValueError):
        ReportConfig(formats=("xml",))
