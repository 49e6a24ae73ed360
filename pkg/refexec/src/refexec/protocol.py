"""ExecRequest parsing and validation.

One JSON document arrives on stdin.  Anything wrong with it raises
ProtocolError, which the command loop turns into a status "error" response;
malformed input never crashes the process.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Any, Mapping, Optional

import numpy as np

TASK_KINDS = ("forecasting", "generation")


class ProtocolError(ValueError):
    """A request problem that still deserves a well-formed error response."""


@dataclass(frozen=True)
class ParsedRequest:
    kind: str
    p: int
    q: int
    criteria: tuple[str, ...]
    primary_criterion: str
    train: np.ndarray
    test: np.ndarray
    feature_names: tuple[str, ...]
    model_id: str
    hyperparams: Mapping[str, Any] = field(default_factory=dict)
    directives: tuple[tuple[str, Mapping[str, Any]], ...] = ()
    freeform_patch: Optional[str] = None
    seed: int = 0
    return_predictions: bool = False


def _require(doc: Mapping[str, Any], key: str, path: str) -> Any:
    if key not in doc:
        raise ProtocolError(f"missing field {path}.{key}")
    return doc[key]


def _as_object(value: Any, path: str) -> Mapping[str, Any]:
    if not isinstance(value, Mapping):
        raise ProtocolError(f"{path} must be a JSON object")
    return value


def _parse_frame(doc: Any, path: str) -> tuple[np.ndarray, tuple[str, ...]]:
    frame = _as_object(doc, path)
    names = _require(frame, "feature_names", path)
    values = _require(frame, "values", path)
    if not isinstance(names, list) or not all(isinstance(n, str) for n in names) or not names:
        raise ProtocolError(f"{path}.feature_names must be a non-empty list of strings")
    try:
        arr = np.asarray(values, dtype=np.float64)
    except (TypeError, ValueError) as exc:
        raise ProtocolError(f"{path}.values must be a rectangular numeric array: {exc}") from exc
    if arr.ndim != 2 or arr.shape[0] < 1:
        raise ProtocolError(f"{path}.values must be a non-empty 2d array, got shape {arr.shape}")
    if arr.shape[1] != len(names):
        raise ProtocolError(
            f"{path}.values has {arr.shape[1]} columns but {len(names)} feature names"
        )
    if not np.all(np.isfinite(arr)):
        raise ProtocolError(f"{path}.values contains non-finite entries")
    return arr, tuple(names)


def _parse_window(doc: Any, path: str) -> tuple[int, int]:
    window = _as_object(doc, path)
    out = []
    for key in ("p", "q"):
        value = _require(window, key, path)
        if not isinstance(value, int) or isinstance(value, bool) or value < 1:
            raise ProtocolError(f"{path}.{key} must be an integer >= 1")
        out.append(value)
    return out[0], out[1]


def _parse_directives(raw: Any, path: str) -> tuple[tuple[str, Mapping[str, Any]], ...]:
    if not isinstance(raw, list):
        raise ProtocolError(f"{path} must be a list")
    out = []
    for i, item in enumerate(raw):
        obj = _as_object(item, f"{path}[{i}]")
        name = obj.get("name")
        if not isinstance(name, str) or not name:
            raise ProtocolError(f"{path}[{i}].name must be a non-empty string")
        params = obj.get("params", {})
        out.append((name, _as_object(params, f"{path}[{i}].params")))
    return tuple(out)


def parse_request(text: str) -> ParsedRequest:
    try:
        doc = json.loads(text)
    except (json.JSONDecodeError, TypeError) as exc:
        raise ProtocolError("malformed ExecRequest document") from exc
    if not isinstance(doc, Mapping):
        raise ProtocolError("ExecRequest must be a JSON object")
    version = doc.get("v")
    if version != 1:
        raise ProtocolError(f"unsupported schema version {version!r}")

    task = _as_object(_require(doc, "task", "request"), "request.task")
    kind = _require(task, "kind", "request.task")
    if kind not in TASK_KINDS:
        raise ProtocolError(f"request.task.kind must be one of {list(TASK_KINDS)}, got {kind!r}")
    p, q = _parse_window(_require(task, "window", "request.task"), "request.task.window")
    criteria = _require(task, "criteria", "request.task")
    if (
        not isinstance(criteria, list)
        or not criteria
        or not all(isinstance(c, str) and c for c in criteria)
    ):
        raise ProtocolError("request.task.criteria must be a non-empty list of strings")
    primary = _require(task, "primary_criterion", "request.task")
    if primary not in criteria:
        raise ProtocolError(f"primary_criterion {primary!r} is not among the criteria")

    data = _as_object(_require(doc, "data", "request"), "request.data")
    train, train_names = _parse_frame(_require(data, "train", "request.data"), "request.data.train")
    test, test_names = _parse_frame(_require(data, "test", "request.data"), "request.data.test")
    if train_names != test_names:
        raise ProtocolError("train and test frames must share feature names")

    config = _as_object(_require(doc, "config", "request"), "request.config")
    model_id = _require(config, "model_id", "request.config")
    if not isinstance(model_id, str) or not model_id:
        raise ProtocolError("request.config.model_id must be a non-empty string")
    hyperparams = _as_object(config.get("hyperparams", {}), "request.config.hyperparams")
    directives = _parse_directives(config.get("directives", []), "request.config.directives")
    seed = config.get("seed", 0)
    if not isinstance(seed, int) or isinstance(seed, bool):
        raise ProtocolError("request.config.seed must be an integer")
    freeform = config.get("freeform_patch")
    if freeform is not None and not isinstance(freeform, str):
        raise ProtocolError("request.config.freeform_patch must be a string when present")
    return_predictions = doc.get("return_predictions", False)
    if not isinstance(return_predictions, bool):
        raise ProtocolError("request.return_predictions must be a boolean when present")

    return ParsedRequest(
        kind=kind,
        p=p,
        q=q,
        criteria=tuple(criteria),
        primary_criterion=primary,
        train=train,
        test=test,
        feature_names=train_names,
        model_id=model_id,
        hyperparams=dict(hyperparams),
        directives=directives,
        freeform_patch=freeform,
        seed=seed,
        return_predictions=return_predictions,
    )
