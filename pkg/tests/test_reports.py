import json
import math

import numpy as np
import pandas as pd
import pytest

from evizilla.config import TrainConfig, config_hash
from evizilla.errors import InputError
from evizilla.reports import (
    COLUMNS,
    NA,
    DelimitedReportFormatter,
    MetricRow,
    ReportRecord,
    binned_density,
    default_thresholds,
    parse_thresholds,
    probability_std,
    softmax,
    threshold_curve,
    true_class_summary,
    write_report,
)


def _record():
    record = ReportRecord.for_config("demo", TrainConfig(seed=3))
    record.add("accuracy", 0.8125, split="test")
    record.add("accuracy", float("nan"), split="val")
    record.add("density", 1.5, series="clean", coordinate=0.025)
    return record


def test_default_thresholds():
    taus = default_thresholds()
    assert taus.size == 20
    assert taus[0] == 0.05 and taus[-1] == 1.0


def test_parse_thresholds():
    np.testing.assert_array_equal(parse_thresholds("0.5, 0.1"), [0.5, 0.1])
    assert parse_thresholds(None).size == 20
    with pytest.raises(InputError):
        parse_thresholds("0.1,abc")


def test_threshold_curve_values():
    u = np.array([0.1, 0.5, 0.9, 0.3])
    correct = np.array([True, False, True, True])
    points = threshold_curve(u, correct, [1.0, 0.05, 0.5])
    assert [p.threshold for p in points] == [0.05, 0.5, 1.0]
    assert points[0].accuracy is None and points[0].retained == 0
    assert points[1].accuracy == pytest.approx(2 / 3) and points[1].retained == 3
    assert points[2].accuracy == 0.75 and points[2].retained_fraction == 1.0


def test_threshold_curve_retained_is_monotone():
    rng = np.random.default_rng(0)
    u = rng.uniform(size=200)
    points = threshold_curve(u, rng.uniform(size=200) > 0.3, default_thresholds())
    retained = [p.retained for p in points]
    assert retained == sorted(retained) and retained[-1] == 200


@pytest.mark.parametrize("bad", [[0.0], [1.5], [-0.2], [float("nan")], []])
def test_threshold_curve_rejects_out_of_range(bad):
    with pytest.raises(InputError):
        threshold_curve(np.array([0.2]), np.array([True]), bad)


def test_metric_rows_reject_non_finite():
    with pytest.raises(InputError):
        MetricRow(name="x", value=float("inf"))
    assert MetricRow(name="x", value=None).value is None


def test_record_turns_nan_into_absent():
    record = _record()
    assert record.values("accuracy") == [0.8125, None]
    assert record.values("density", series="clean") == [1.5]
    assert record.config_hash == config_hash(TrainConfig(seed=3))


def test_formatter_layout():
    text = DelimitedReportFormatter()(_record())
    lines = text.splitlines()
    assert lines[0].split("\t") == list(COLUMNS)
    digest = config_hash(TrainConfig(seed=3))
    assert lines[1].split("\t") == ["", "accuracy", "test", "", "0.8125", digest]
    assert lines[2].split("\t")[4] == NA
    assert lines[3].split("\t")[:5] == ["clean", "density", "", "0.025", "1.5"]
    assert text.endswith("\n")


def test_formatter_accepts_custom_renderers():
    fmt = DelimitedReportFormatter(delimiter=",", na="-", number=lambda v: f"{v:.2f}")
    lines = fmt(_record()).splitlines()
    assert lines[1].split(",")[4] == "0.81"
    assert lines[2].split(",")[4] == "-"


def test_write_report_files_and_manifest(tmp_path):
    record = _record()
    record.tables["history"] = pd.DataFrame({"epoch": [0, 1], "val_loss": [0.5, float("nan")]})
    record.extra["note"] = "demo"
    manifest_path = write_report(record, tmp_path / "out")
    out = manifest_path.parent
    assert sorted(p.name for p in out.iterdir()) == ["demo.history.tsv", "demo.manifest.json", "demo.tsv"]
    data = json.loads(manifest_path.read_text())
    assert data["schema_version"] == 1
    assert data["row_count"] == 3
    assert data["files"] == ["demo.tsv", "demo.history.tsv"]
    assert data["config"]["seed"] == 3
    assert data["extra"] == {"note": "demo"}
    assert (out / "demo.history.tsv").read_text().splitlines()[-1] == "1\tNA"


def test_write_report_is_repeatable(tmp_path):
    write_report(_record(), tmp_path / "a")
    write_report(_record(), tmp_path / "b")
    for name in ("demo.tsv", "demo.manifest.json"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_binned_density_integrates_to_one():
    values = np.random.default_rng(1).beta(2, 5, size=500)
    dens = binned_density(values, bins=20)
    assert dens.counts.sum() == 500
    assert float(np.sum(dens.density * np.diff(dens.edges))) == pytest.approx(1.0)
    assert dens.centers[0] == pytest.approx(0.025)


def test_binned_density_clips_and_validates():
    dens = binned_density([-1.0, 2.0, 0.5], bins=4)
    assert dens.counts[0] == 1 and dens.counts[-1] == 1
    np.testing.assert_array_equal(binned_density([], bins=4).density, np.zeros(4))
    with pytest.raises(InputError):
        binned_density([0.1], bins=0)
    with pytest.raises(InputError):
        binned_density([0.1], value_range=(1.0, 1.0))


def test_softmax_rows_sum_to_one():
    p = softmax(np.array([[1000.0, 1000.0], [0.0, math.log(3.0)]]))
    np.testing.assert_allclose(p, [[0.5, 0.5], [0.25, 0.75]])


def test_probability_std_extremes():
    k = 4
    np.testing.assert_allclose(probability_std(np.full((2, k), 1 / k)), 0.0, atol=1e-15)
    one_hot = np.eye(k)
    np.testing.assert_allclose(probability_std(one_hot), math.sqrt(k - 1) / k)
    with pytest.raises(InputError):
        probability_std(np.ones((3, 1)))
    with pytest.raises(InputError):
        probability_std(np.array([[0.2, 0.2]]))


def test_true_class_summary():
    p = np.array([[0.9, 0.1], [0.6, 0.4], [0.3, 0.7]])
    table = true_class_summary(p, np.array([0, 0, 1]), 3)
    assert list(table["count"]) == [2, 1, 0]
    assert table.loc[0, "mean_true_class_probability"] == pytest.approx(0.75)
    assert np.isnan(table.loc[2, "mean_true_class_probability"])
