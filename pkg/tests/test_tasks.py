from __future__ import annotations

import json

import numpy as np
import pytest

from conftest import ar2_values, make_forecast_task
from tsrefine.errors import (
    EngineError,
    FrameTooShort,
    MalformedRow,
    MissingFile,
    NaNDetected,
    NonNumericCell,
)
from tsrefine.tasks import (
    DatasetSplit,
    TaskSpec,
    TimeSeriesFrame,
    WindowSpec,
    frame_from_json,
    frame_to_json,
    load_frame,
    load_task,
    make_segments,
    make_windows,
    save_frame,
    split_frame,
    validate_task,
)


def test_frame_shape_and_immutability():
    frame = TimeSeriesFrame(values=np.arange(6.0).reshape(3, 2), feature_names=("a", "b"))
    assert frame.n_steps == 3 and frame.n_features == 2
    with pytest.raises(ValueError):
        frame.values[0, 0] = 99.0


def test_frame_rejects_nan_and_bad_names():
    with pytest.raises(NaNDetected):
        TimeSeriesFrame(values=np.array([[1.0, np.nan]]), feature_names=("a", "b"))
    with pytest.raises(EngineError):
        TimeSeriesFrame(values=np.ones((2, 2)), feature_names=("a",))


def test_frame_rejects_unsorted_timestamps():
    with pytest.raises(EngineError):
        TimeSeriesFrame(
            values=np.ones((2, 1)),
            feature_names=("a",),
            timestamps=("2024-01-02", "2024-01-01"),
        )


def test_csv_roundtrip(tmp_path):
    frame = TimeSeriesFrame(
        values=np.array([[1.5, 2.25], [3.125, 4.0]]),
        feature_names=("x", "y"),
        timestamps=("2024-01-01", "2024-01-02"),
    )
    path = tmp_path / "frame.csv"
    save_frame(frame, path, "csv-wide")
    loaded = load_frame(path, "csv-wide")
    assert loaded.feature_names == ("x", "y")
    assert loaded.timestamps == frame.timestamps
    assert np.array_equal(loaded.values, frame.values)


def test_json_roundtrip(tmp_path):
    frame = TimeSeriesFrame(values=np.array([[1.0], [2.0]]), feature_names=("only",))
    path = tmp_path / "frame.json"
    save_frame(frame, path, "json-frame")
    loaded = load_frame(path, "json-frame")
    assert np.array_equal(loaded.values, frame.values)
    assert frame_from_json(frame_to_json(frame)).feature_names == ("only",)


def test_csv_error_positions(tmp_path):
    path = tmp_path / "bad.csv"
    path.write_text("a,b\n1.0,2.0\n3.0,oops\n", encoding="utf-8")
    with pytest.raises(NonNumericCell) as exc:
        load_frame(path, "csv-wide")
    assert "line 3" in str(exc.value) and "'b'" in str(exc.value)

    path.write_text("a,b\n1.0\n", encoding="utf-8")
    with pytest.raises(MalformedRow):
        load_frame(path, "csv-wide")

    path.write_text("a,b\n1.0,inf\n", encoding="utf-8")
    with pytest.raises(NaNDetected):
        load_frame(path, "csv-wide")


def test_load_frame_missing_file(tmp_path):
    with pytest.raises(MissingFile):
        load_frame(tmp_path / "nope.csv", "csv-wide")


def test_make_windows_oracle():
    frame = TimeSeriesFrame(values=np.arange(20.0).reshape(10, 2), feature_names=("a", "b"))
    pairs = make_windows(frame, WindowSpec(p=3, q=2, stride=2))
    # rows 0..9: windows start at 0, 2, 4 -> (10 - 3 - 2) // 2 + 1 = 3
    assert len(pairs) == 3
    for i, (x, y) in enumerate(pairs):
        lo = i * 2
        assert np.array_equal(x, frame.values[lo : lo + 3])
        assert np.array_equal(y, frame.values[lo + 3 : lo + 5])


def test_make_windows_too_short():
    frame = TimeSeriesFrame(values=np.ones((3, 1)), feature_names=("a",))
    with pytest.raises(FrameTooShort):
        make_windows(frame, WindowSpec(p=3, q=1))


def test_make_segments_oracle():
    frame = TimeSeriesFrame(values=np.arange(12.0).reshape(6, 2), feature_names=("a", "b"))
    segs = make_segments(frame, length=3, stride=1)
    assert len(segs) == 4
    assert np.array_equal(segs[1], frame.values[1:4])


def test_split_frame_chronological():
    frame = TimeSeriesFrame(values=np.arange(10.0).reshape(10, 1), feature_names=("a",))
    train, test = split_frame(frame, 0.2)
    assert train.n_steps == 8 and test.n_steps == 2
    assert float(test.values[0, 0]) == 8.0


def test_window_spec_validation():
    with pytest.raises(EngineError):
        WindowSpec(p=0, q=1)
    with pytest.raises(EngineError):
        WindowSpec(p=1, q=1, stride=0)


def test_task_spec_validation():
    values = ar2_values(T=60, seed=3)
    task = make_forecast_task(values, p=4, q=2)
    assert task.primary_criterion == "rmse"
    with pytest.raises(EngineError):
        make_forecast_task(values, criteria=("rmse",), primary="mae")


def test_dataset_split_feature_name_guard():
    a = TimeSeriesFrame(values=np.ones((4, 1)), feature_names=("a",))
    b = TimeSeriesFrame(values=np.ones((4, 1)), feature_names=("b",))
    with pytest.raises(EngineError):
        DatasetSplit(train=a, test=b, window=WindowSpec(p=1, q=1))


def test_validate_task_reports_violations(banks):
    values = ar2_values(T=60, seed=5)
    good = make_forecast_task(values, p=4, q=2)
    assert validate_task(good, banks) == []

    unknown = make_forecast_task(values, p=4, q=2, criteria=("rmse", "zzz"), primary="rmse")
    kinds = [v.kind for v in validate_task(unknown, banks)]
    assert "UnknownMetric" in kinds

    mismatched = make_forecast_task(values, p=4, q=2, criteria=("rmse", "marginal_score"), primary="rmse")
    kinds = [v.kind for v in validate_task(mismatched, banks)]
    assert "KindMismatch" in kinds

    tiny = make_forecast_task(ar2_values(T=12, seed=6), p=8, q=4)
    kinds = [v.kind for v in validate_task(tiny, banks)]
    assert "FrameTooShort" in kinds


def test_load_task_resolves_relative_dataset(tmp_path):
    values = ar2_values(T=80, seed=8)
    doc = {"feature_names": ["f1", "f2", "f3"], "values": values.tolist()}
    (tmp_path / "data.json").write_text(json.dumps(doc), encoding="utf-8")
    task_doc = {
        "id": "t1",
        "kind": "forecasting",
        "description": "toy",
        "dataset": {"path": "data.json", "format": "json-frame"},
        "window": {"p": 4, "q": 2},
        "criteria": ["rmse"],
        "primary_criterion": "rmse",
        "test_fraction": 0.25,
    }
    (tmp_path / "task.json").write_text(json.dumps(task_doc), encoding="utf-8")
    task = load_task(tmp_path / "task.json")
    assert task.id == "t1"
    assert task.dataset.test.n_steps == 20
    assert task.dataset.window.p == 4

    with pytest.raises(EngineError):
        bad = dict(task_doc)
        del bad["criteria"]
        (tmp_path / "bad.json").write_text(json.dumps(bad), encoding="utf-8")
        load_task(tmp_path / "bad.json")
