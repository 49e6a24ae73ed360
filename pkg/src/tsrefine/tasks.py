"""Tasks, datasets, windowing, and evaluation criteria.

A task couples a description, a train/test dataset split, and the metric ids
that judge a candidate model.  Frames are immutable 2-D arrays (T timesteps
by d features); windowing turns them into supervised input/target pairs for
forecasting or fixed-length segments for generation.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .errors import (
    EngineError,
    FrameTooShort,
    MalformedRow,
    MissingFile,
    NaNDetected,
    NonNumericCell,
)

TASK_KINDS = ("forecasting", "generation")
FRAME_FORMATS = ("csv-wide", "json-frame")


@dataclass(frozen=True)
class TimeSeriesFrame:
    """Raw multivariate series: T timesteps by d features."""

    values: np.ndarray
    feature_names: tuple[str, ...]
    timestamps: Optional[tuple[str, ...]] = None

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64)
        if values.ndim != 2:
            raise EngineError(f"frame values must be 2-D, got shape {values.shape}")
        if values.shape[0] < 1 or values.shape[1] < 1:
            raise EngineError("frame needs at least 1 row and 1 feature")
        if not np.isfinite(values).all():
            raise NaNDetected("frame contains NaN or Inf entries")
        if len(self.feature_names) != values.shape[1]:
            raise EngineError(
                f"{len(self.feature_names)} feature names for {values.shape[1]} columns"
            )
        if self.timestamps is not None:
            if len(self.timestamps) != values.shape[0]:
                raise EngineError("timestamps length must equal number of rows")
            for a, b in zip(self.timestamps, self.timestamps[1:]):
                if not a < b:
                    raise EngineError(f"timestamps not strictly increasing at {b!r}")
        values.setflags(write=False)
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "feature_names", tuple(self.feature_names))
        if self.timestamps is not None:
            object.__setattr__(self, "timestamps", tuple(self.timestamps))

    @property
    def n_steps(self) -> int:
        return self.values.shape[0]

    @property
    def n_features(self) -> int:
        return self.values.shape[1]


@dataclass(frozen=True)
class WindowSpec:
    """Input length, horizon, and stride for windowing a frame."""

    p: int
    q: int
    stride: int = 1

    def __post_init__(self):
        if self.p < 1 or self.q < 1 or self.stride < 1:
            raise EngineError(f"window spec needs p, q, stride >= 1, got {self}")


@dataclass(frozen=True)
class DatasetSplit:
    train: TimeSeriesFrame
    test: TimeSeriesFrame
    window: WindowSpec

    def __post_init__(self):
        if self.train.feature_names != self.test.feature_names:
            raise EngineError("train and test must share feature names")
        if self.train.timestamps is not None and self.test.timestamps is not None:
            if not self.train.timestamps[-1] < self.test.timestamps[0]:
                raise EngineError("train and test time ranges overlap")


@dataclass(frozen=True)
class TaskSpec:
    id: str
    kind: str
    description: str
    dataset: DatasetSplit
    criteria: tuple[str, ...]
    primary_criterion: str
    direction: str = "minimize"

    def __post_init__(self):
        if self.kind not in TASK_KINDS:
            raise EngineError(f"unknown task kind {self.kind!r}")
        if self.primary_criterion not in self.criteria:
            raise EngineError("primary_criterion must be listed in criteria")
        if self.direction != "minimize":
            raise EngineError("only minimizing criteria are supported")
        object.__setattr__(self, "criteria", tuple(self.criteria))


@dataclass(frozen=True)
class Violation:
    """One referential or compatibility problem found by validate_task."""

    kind: str
    detail: str


def _parse_cell(raw: str, line_no: int, column: str) -> float:
    try:
        value = float(raw)
    except ValueError:
        raise NonNumericCell(line_no, column, raw) from None
    if math.isnan(value) or math.isinf(value):
        raise NaNDetected(f"non-finite value at line {line_no}, column {column!r}")
    return value


def load_frame(path: str | Path, format: str) -> TimeSeriesFrame:
    """Load one frame from csv-wide or json-frame."""
    path = Path(path)
    if not path.exists():
        raise MissingFile(str(path))
    if format == "csv-wide":
        return _load_csv_wide(path)
    if format == "json-frame":
        return _load_json_frame(path)
    raise EngineError(f"unknown frame format {format!r}")


def _load_csv_wide(path: Path) -> TimeSeriesFrame:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise MalformedRow(1, "empty file") from None
        has_ts = bool(header) and header[0] == "timestamp"
        names = header[1:] if has_ts else header
        if not names:
            raise MalformedRow(1, "header has no feature columns")
        rows: list[list[float]] = []
        stamps: list[str] = []
        for line_no, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise MalformedRow(line_no, f"expected {len(header)} cells, got {len(row)}")
            cells = row[1:] if has_ts else row
            if has_ts:
                stamps.append(row[0])
            rows.append([_parse_cell(c, line_no, names[j]) for j, c in enumerate(cells)])
    if not rows:
        raise MalformedRow(2, "no data rows")
    return TimeSeriesFrame(
        values=np.array(rows, dtype=np.float64),
        feature_names=tuple(names),
        timestamps=tuple(stamps) if has_ts else None,
    )


def _load_json_frame(path: Path) -> TimeSeriesFrame:
    with open(path, encoding="utf-8") as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise MalformedRow(exc.lineno, exc.msg) from None
    if not isinstance(doc, dict) or "values" not in doc or "feature_names" not in doc:
        raise MalformedRow(1, "json-frame needs 'feature_names' and 'values'")
    names = [str(n) for n in doc["feature_names"]]
    values = doc["values"]
    rows = []
    for i, row in enumerate(values):
        if len(row) != len(names):
            raise MalformedRow(i + 1, f"row has {len(row)} cells, expected {len(names)}")
        parsed = []
        for j, cell in enumerate(row):
            if not isinstance(cell, (int, float)) or isinstance(cell, bool):
                raise NonNumericCell(i + 1, names[j], repr(cell))
            if math.isnan(cell) or math.isinf(cell):
                raise NaNDetected(f"non-finite value at row {i + 1}, column {names[j]!r}")
            parsed.append(float(cell))
        rows.append(parsed)
    if not rows:
        raise MalformedRow(1, "no data rows")
    ts = doc.get("timestamps")
    return TimeSeriesFrame(
        values=np.array(rows, dtype=np.float64),
        feature_names=tuple(names),
        timestamps=tuple(str(t) for t in ts) if ts else None,
    )


def save_frame(frame: TimeSeriesFrame, path: str | Path, format: str) -> None:
    """Write a frame back out; floats round-trip bit-exact via repr."""
    path = Path(path)
    if format == "csv-wide":
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            if frame.timestamps is not None:
                writer.writerow(("timestamp",) + frame.feature_names)
                for stamp, row in zip(frame.timestamps, frame.values):
                    writer.writerow([stamp] + [repr(float(v)) for v in row])
            else:
                writer.writerow(frame.feature_names)
                for row in frame.values:
                    writer.writerow([repr(float(v)) for v in row])
    elif format == "json-frame":
        doc: dict = {
            "feature_names": list(frame.feature_names),
            "values": [[float(v) for v in row] for row in frame.values],
        }
        if frame.timestamps is not None:
            doc["timestamps"] = list(frame.timestamps)
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(doc, fh)
    else:
        raise EngineError(f"unknown frame format {format!r}")


def frame_to_json(frame: TimeSeriesFrame) -> dict:
    doc: dict = {
        "feature_names": list(frame.feature_names),
        "values": [[float(v) for v in row] for row in frame.values],
    }
    if frame.timestamps is not None:
        doc["timestamps"] = list(frame.timestamps)
    return doc


def frame_from_json(doc: dict) -> TimeSeriesFrame:
    ts = doc.get("timestamps")
    return TimeSeriesFrame(
        values=np.array(doc["values"], dtype=np.float64),
        feature_names=tuple(str(n) for n in doc["feature_names"]),
        timestamps=tuple(str(t) for t in ts) if ts else None,
    )


def split_frame(frame: TimeSeriesFrame, test_fraction: float = 0.2) -> tuple[TimeSeriesFrame, TimeSeriesFrame]:
    """Chronological holdout: last test_fraction of rows become the test set."""
    t = frame.n_steps
    n_test = max(1, int(round(t * test_fraction)))
    n_train = t - n_test
    if n_train < 1:
        raise EngineError(f"frame with {t} rows cannot be split {1 - test_fraction:.0%}/{test_fraction:.0%}")

    def piece(lo: int, hi: int) -> TimeSeriesFrame:
        return TimeSeriesFrame(
            values=frame.values[lo:hi].copy(),
            feature_names=frame.feature_names,
            timestamps=frame.timestamps[lo:hi] if frame.timestamps is not None else None,
        )

    return piece(0, n_train), piece(n_train, t)


def load_dataset(
    path: str | Path,
    format: str,
    window: WindowSpec,
    test_fraction: float = 0.2,
) -> DatasetSplit:
    """Load a single-frame dataset file and split it chronologically."""
    frame = load_frame(path, format)
    train, test = split_frame(frame, test_fraction)
    return DatasetSplit(train=train, test=test, window=window)


def load_task(path: str | Path) -> TaskSpec:
    """Load a sidecar task file (JSON) and its referenced dataset."""
    path = Path(path)
    if not path.exists():
        raise MissingFile(str(path))
    with open(path, encoding="utf-8") as fh:
        doc = json.load(fh)
    for key in ("id", "kind", "description", "dataset", "window", "criteria", "primary_criterion"):
        if key not in doc:
            raise EngineError(f"task file missing field {key!r}")
    win = doc["window"]
    window = WindowSpec(p=int(win["p"]), q=int(win["q"]), stride=int(win.get("stride", 1)))
    ds = doc["dataset"]
    data_path = Path(ds["path"])
    if not data_path.is_absolute():
        data_path = path.parent / data_path
    split = load_dataset(data_path, ds["format"], window, float(doc.get("test_fraction", 0.2)))
    return TaskSpec(
        id=str(doc["id"]),
        kind=str(doc["kind"]),
        description=str(doc["description"]),
        dataset=split,
        criteria=tuple(str(c) for c in doc["criteria"]),
        primary_criterion=str(doc["primary_criterion"]),
    )


def make_windows(frame: TimeSeriesFrame, spec: WindowSpec) -> list[tuple[np.ndarray, np.ndarray]]:
    """Contiguous (input, target) pairs: p rows in, the next q rows out.

    Window i covers rows [i*stride, i*stride+p) for the input and
    [i*stride+p, i*stride+p+q) for the target.
    """
    t = frame.n_steps
    p, q, stride = spec.p, spec.q, spec.stride
    if t < p + q:
        raise FrameTooShort(t, p, q)
    count = (t - p - q) // stride + 1
    pairs = []
    for i in range(count):
        lo = i * stride
        pairs.append((frame.values[lo : lo + p], frame.values[lo + p : lo + p + q]))
    return pairs


def make_segments(frame: TimeSeriesFrame, length: int, stride: int = 1) -> list[np.ndarray]:
    """Contiguous length-q segments, the windows of a generation task."""
    t = frame.n_steps
    if length < 1 or stride < 1:
        raise EngineError("segment length and stride must be >= 1")
    if t < length:
        raise FrameTooShort(t, length, 0)
    count = (t - length) // stride + 1
    return [frame.values[i * stride : i * stride + length] for i in range(count)]


def validate_task(spec: TaskSpec, banks) -> list[Violation]:
    """Referential and kind-compatibility checks; empty list means ok."""
    violations = []
    known = {m.id: m for m in banks.metrics}
    for crit in spec.criteria:
        if crit not in known:
            violations.append(Violation("UnknownMetric", f"criterion {crit!r} not in metric bank"))
        elif spec.kind not in known[crit].task_kinds:
            violations.append(
                Violation("KindMismatch", f"criterion {crit!r} does not apply to {spec.kind} tasks")
            )
    if spec.primary_criterion not in spec.criteria:
        violations.append(Violation("PrimaryNotListed", "primary_criterion not among criteria"))
    win = spec.dataset.window
    for name, frame in (("train", spec.dataset.train), ("test", spec.dataset.test)):
        needed = win.q if spec.kind == "generation" else win.p + win.q
        if frame.n_steps < needed:
            violations.append(
                Violation("FrameTooShort", f"{name} frame has {frame.n_steps} rows, needs {needed}")
            )
    return violations
