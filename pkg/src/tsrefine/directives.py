"""Closed catalog of refinement directives shared by banks, planners, executors.

A directive is a named, parameterized tweak a model may honor: normalization,
early stopping, schedules, regularization, augmentation, shrinkage.  Models
ignore directives they do not support (with a warning), never erroring on them.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Mapping, Optional, Sequence

from .errors import FieldViolation


@dataclass(frozen=True)
class ParamSpec:
    name: str
    kind: str  # "real" | "int"
    low: Optional[float] = None
    high: Optional[float] = None
    low_open: bool = False
    high_open: bool = False
    default: float | int = 0

    def check(self, value: Any, path: str) -> float | int:
        if self.kind == "int":
            if isinstance(value, bool) or not isinstance(value, int):
                raise FieldViolation(path, f"expected integer, got {value!r}")
            v: float | int = value
        else:
            if isinstance(value, bool) or not isinstance(value, (int, float)):
                raise FieldViolation(path, f"expected number, got {value!r}")
            v = float(value)
        if self.low is not None:
            if v < self.low or (self.low_open and v == self.low):
                raise FieldViolation(path, f"{v} below {'open' if self.low_open else 'closed'} lower bound {self.low}")
        if self.high is not None:
            if v > self.high or (self.high_open and v == self.high):
                raise FieldViolation(path, f"{v} above {'open' if self.high_open else 'closed'} upper bound {self.high}")
        return v


@dataclass(frozen=True)
class DirectiveSpec:
    name: str
    params: tuple[ParamSpec, ...] = ()
    group: Optional[str] = None  # directives in the same group conflict

    def param(self, name: str) -> ParamSpec:
        for p in self.params:
            if p.name == name:
                return p
        raise KeyError(name)


CATALOG: dict[str, DirectiveSpec] = {
    spec.name: spec
    for spec in (
        DirectiveSpec("normalize_zscore", group="normalization"),
        DirectiveSpec("normalize_minmax", group="normalization"),
        DirectiveSpec("early_stopping", (ParamSpec("patience", "int", low=1, default=5),)),
        DirectiveSpec(
            "lr_schedule_plateau",
            (
                ParamSpec("factor", "real", low=0.0, high=1.0, low_open=True, high_open=True, default=0.5),
                ParamSpec("patience", "int", low=1, default=3),
            ),
        ),
        DirectiveSpec("weight_decay", (ParamSpec("lambda", "real", low=0.0, high=1.0, default=0.001),)),
        DirectiveSpec("gradient_clip", (ParamSpec("max_norm", "real", low=0.0, low_open=True, default=1.0),)),
        DirectiveSpec("augment_jitter", (ParamSpec("sigma", "real", low=0.0, default=0.01),)),
        DirectiveSpec("cov_shrinkage", (ParamSpec("lambda", "real", low=0.0, high=1.0, default=0.1),)),
    )
}


@dataclass(frozen=True)
class Directive:
    name: str
    params: Mapping[str, float | int] = field(default_factory=dict)

    def to_json(self) -> dict:
        return {"name": self.name, "params": dict(self.params)}


def validate_directive(obj: Any, path: str = "directive") -> Directive:
    """Parse and range-check one directive against the catalog."""
    if isinstance(obj, Directive):
        obj = obj.to_json()
    if not isinstance(obj, Mapping):
        raise FieldViolation(path, f"expected object, got {type(obj).__name__}")
    name = obj.get("name")
    if name not in CATALOG:
        raise FieldViolation(f"{path}.name", f"unknown directive {name!r}")
    spec = CATALOG[name]
    raw = obj.get("params", {})
    if not isinstance(raw, Mapping):
        raise FieldViolation(f"{path}.params", "expected object")
    known = {p.name for p in spec.params}
    for key in raw:
        if key not in known:
            raise FieldViolation(f"{path}.params.{key}", f"not a parameter of {name}")
    checked: dict[str, float | int] = {}
    for pspec in spec.params:
        if pspec.name in raw:
            checked[pspec.name] = pspec.check(raw[pspec.name], f"{path}.params.{pspec.name}")
        else:
            checked[pspec.name] = pspec.default
    return Directive(name, checked)


def validate_directives(objs: Sequence[Any], path: str = "directives") -> tuple[Directive, ...]:
    if not isinstance(objs, Sequence) or isinstance(objs, (str, bytes)):
        raise FieldViolation(path, "expected array")
    return tuple(validate_directive(o, f"{path}[{i}]") for i, o in enumerate(objs))


def resolve_directives(
    directives: Sequence[Directive],
    supported: Sequence[str],
) -> tuple[tuple[Directive, ...], tuple[str, ...]]:
    """Reduce a proposed directive list to what one model will actually apply.

    Unsupported directives are dropped with a warning, never an error.  Within
    a conflict group (the two normalizations) the last occurrence wins and the
    displaced ones are warned about.
    """
    supported_set = set(supported)
    warnings: list[str] = []
    kept: list[Directive] = []
    for d in directives:
        if d.name not in CATALOG:
            warnings.append(f"unknown directive {d.name!r} ignored")
            continue
        if d.name not in supported_set:
            warnings.append(f"directive {d.name!r} not supported by this model, ignored")
            continue
        kept.append(d)
    by_group: dict[str, int] = {}
    final: list[Optional[Directive]] = []
    for d in kept:
        group = CATALOG[d.name].group
        if group is not None:
            if group in by_group:
                prev = by_group[group]
                displaced = final[prev]
                assert displaced is not None
                warnings.append(f"directive {displaced.name!r} displaced by later {d.name!r} in group {group!r}")
                final[prev] = None
            by_group[group] = len(final)
        final.append(d)
    return tuple(d for d in final if d is not None), tuple(warnings)


def directives_to_json(directives: Sequence[Directive]) -> list[dict]:
    return [d.to_json() for d in directives]
