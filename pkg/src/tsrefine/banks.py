"""Read-only knowledge banks: cases, refinement tips, model and metric catalogs.

Each record lives in its own JSON file under the bank root (`cases/`,
`refinements/`, `models/`, `metrics/`).  Loading validates every record, checks
all cross-references, and computes a content digest that is independent of
filesystem enumeration order.  A loaded BankSet is immutable.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping, Optional, Sequence

from .canonical import digest_of
from .directives import Directive, validate_directive
from .errors import (
    DanglingReference,
    DuplicateId,
    FieldViolation,
    MissingFile,
    SchemaViolation,
    UnknownId,
)
from .metrics import FORECAST_METRICS, GENERATION_METRICS
from .tasks import TASK_KINDS

REFINEMENT_CATEGORIES = ("preprocessing", "training_optimization", "tuning_evaluation")
MODEL_FAMILIES = ("tree", "deep", "econometric", "gan", "vae", "diffusion", "linear", "baseline")
HYPERPARAM_TYPES = ("int", "real", "log-real", "categorical")
BANK_SECTIONS = ("cases", "refinements", "models", "metrics")


@dataclass(frozen=True)
class CaseRecord:
    id: str
    task_kind: str
    domain_tags: tuple[str, ...]
    description: str
    solution_summary: str
    recommended_model: str
    outcome: Mapping[str, float]

    def to_json(self) -> dict:
        return {
            "v": 1,
            "id": self.id,
            "task_kind": self.task_kind,
            "domain_tags": list(self.domain_tags),
            "description": self.description,
            "solution_summary": self.solution_summary,
            "recommended_model": self.recommended_model,
            "outcome": dict(self.outcome),
        }


@dataclass(frozen=True)
class DirectiveTemplate:
    kind: str
    params: Mapping[str, float | int]

    def instantiate(self) -> Directive:
        return validate_directive({"name": self.kind, "params": dict(self.params)})

    def to_json(self) -> dict:
        return {"kind": self.kind, "params": dict(self.params)}


@dataclass(frozen=True)
class RefinementEntry:
    id: str
    category: str
    title: str
    guidance: str
    directive_template: DirectiveTemplate
    applicability: tuple[str, ...]

    def to_json(self) -> dict:
        return {
            "v": 1,
            "id": self.id,
            "category": self.category,
            "title": self.title,
            "guidance": self.guidance,
            "directive_template": self.directive_template.to_json(),
            "applicability": list(self.applicability),
        }


@dataclass(frozen=True)
class HyperparamSpec:
    name: str
    type: str
    range: Optional[tuple[float, float]] = None
    choices: Optional[tuple[Any, ...]] = None
    default: Any = None

    def check(self, value: Any, path: str) -> Any:
        if self.type == "categorical":
            if value not in (self.choices or ()):
                raise FieldViolation(path, f"{value!r} not in choices {list(self.choices or ())}")
            return value
        if self.type == "int":
            if isinstance(value, bool) or not isinstance(value, int):
                raise FieldViolation(path, f"expected integer, got {value!r}")
            v: float | int = value
        else:
            if isinstance(value, bool) or not isinstance(value, (int, float)):
                raise FieldViolation(path, f"expected number, got {value!r}")
            v = float(value)
        lo, hi = self.range  # numeric specs always carry a range
        if not lo <= v <= hi:
            raise FieldViolation(path, f"{v} outside range [{lo}, {hi}]")
        if self.type == "log-real" and v <= 0:
            raise FieldViolation(path, f"log-real value must be positive, got {v}")
        return v

    def to_json(self) -> dict:
        out: dict[str, Any] = {"name": self.name, "type": self.type, "default": self.default}
        if self.range is not None:
            out["range"] = list(self.range)
        if self.choices is not None:
            out["choices"] = list(self.choices)
        return out


@dataclass(frozen=True)
class Binding:
    kind: str  # "native" | "external"
    ref: str  # native model kind id, or external command reference

    def to_json(self) -> dict:
        return {"kind": self.kind, "ref": self.ref}


@dataclass(frozen=True)
class ModelDescriptor:
    id: str
    family: str
    task_kinds: tuple[str, ...]
    hyperparam_schema: tuple[HyperparamSpec, ...]
    binding: Binding
    summary: str

    def schema_by_name(self) -> dict[str, HyperparamSpec]:
        return {h.name: h for h in self.hyperparam_schema}

    def default_hyperparams(self) -> dict[str, Any]:
        return {h.name: h.default for h in self.hyperparam_schema}

    def to_json(self) -> dict:
        return {
            "v": 1,
            "id": self.id,
            "family": self.family,
            "task_kinds": list(self.task_kinds),
            "hyperparam_schema": [h.to_json() for h in self.hyperparam_schema],
            "binding": self.binding.to_json(),
            "summary": self.summary,
        }


@dataclass(frozen=True)
class MetricDescriptor:
    id: str
    task_kinds: tuple[str, ...]
    direction: str
    summary: str

    def to_json(self) -> dict:
        return {
            "v": 1,
            "id": self.id,
            "task_kinds": list(self.task_kinds),
            "direction": self.direction,
            "summary": self.summary,
        }


@dataclass(frozen=True)
class BankSet:
    cases: tuple[CaseRecord, ...]
    refinements: tuple[RefinementEntry, ...]
    models: tuple[ModelDescriptor, ...]
    metrics: tuple[MetricDescriptor, ...]
    content_digest: str
    _model_idx: Mapping[str, ModelDescriptor] = field(repr=False, default_factory=dict)
    _metric_idx: Mapping[str, MetricDescriptor] = field(repr=False, default_factory=dict)
    _case_idx: Mapping[str, CaseRecord] = field(repr=False, default_factory=dict)
    _refinement_idx: Mapping[str, RefinementEntry] = field(repr=False, default_factory=dict)

    def model(self, model_id: str) -> ModelDescriptor:
        try:
            return self._model_idx[model_id]
        except KeyError:
            raise UnknownId(f"no model {model_id!r} in bank") from None

    def metric(self, metric_id: str) -> MetricDescriptor:
        try:
            return self._metric_idx[metric_id]
        except KeyError:
            raise UnknownId(f"no metric {metric_id!r} in bank") from None

    def case(self, case_id: str) -> CaseRecord:
        try:
            return self._case_idx[case_id]
        except KeyError:
            raise UnknownId(f"no case {case_id!r} in bank") from None

    def refinement(self, entry_id: str) -> RefinementEntry:
        try:
            return self._refinement_idx[entry_id]
        except KeyError:
            raise UnknownId(f"no refinement entry {entry_id!r} in bank") from None

    def has_metric(self, metric_id: str) -> bool:
        return metric_id in self._metric_idx


def _require(rec: Mapping, key: str, typ, file: str):
    if key not in rec:
        raise SchemaViolation(file, key)
    val = rec[key]
    if typ is float:
        if isinstance(val, bool) or not isinstance(val, (int, float)):
            raise SchemaViolation(file, key)
        return float(val)
    if not isinstance(val, typ) or (typ is int and isinstance(val, bool)):
        raise SchemaViolation(file, key)
    return val


def _str_list(rec: Mapping, key: str, file: str, allowed: Optional[Sequence[str]] = None) -> tuple[str, ...]:
    val = _require(rec, key, list, file)
    if not all(isinstance(x, str) for x in val):
        raise SchemaViolation(file, key)
    if allowed is not None and not all(x in allowed for x in val):
        raise SchemaViolation(file, key)
    return tuple(val)


def _check_version(rec: Mapping, file: str):
    if rec.get("v") != 1:
        raise SchemaViolation(file, "v")


def _parse_case(rec: Mapping, file: str) -> CaseRecord:
    _check_version(rec, file)
    kind = _require(rec, "task_kind", str, file)
    if kind not in TASK_KINDS:
        raise SchemaViolation(file, "task_kind")
    desc = _require(rec, "description", str, file)
    if not desc.strip():
        raise SchemaViolation(file, "description")
    outcome = _require(rec, "outcome", dict, file)
    clean_outcome: dict[str, float] = {}
    for k, v in outcome.items():
        if not isinstance(k, str) or isinstance(v, bool) or not isinstance(v, (int, float)):
            raise SchemaViolation(file, f"outcome.{k}")
        clean_outcome[k] = float(v)
    return CaseRecord(
        id=_require(rec, "id", str, file),
        task_kind=kind,
        domain_tags=_str_list(rec, "domain_tags", file),
        description=desc,
        solution_summary=_require(rec, "solution_summary", str, file),
        recommended_model=_require(rec, "recommended_model", str, file),
        outcome=clean_outcome,
    )


def _parse_refinement(rec: Mapping, file: str) -> RefinementEntry:
    _check_version(rec, file)
    category = _require(rec, "category", str, file)
    if category not in REFINEMENT_CATEGORIES:
        raise SchemaViolation(file, "category")
    tpl = _require(rec, "directive_template", dict, file)
    kind = _require(tpl, "kind", str, file)
    params = tpl.get("params", {})
    if not isinstance(params, dict):
        raise SchemaViolation(file, "directive_template.params")
    template = DirectiveTemplate(kind=kind, params=dict(params))
    try:
        template.instantiate()
    except FieldViolation as exc:
        raise SchemaViolation(file, f"directive_template ({exc})") from exc
    applicability = _str_list(rec, "applicability", file, allowed=MODEL_FAMILIES)
    if not applicability:
        raise SchemaViolation(file, "applicability")
    return RefinementEntry(
        id=_require(rec, "id", str, file),
        category=category,
        title=_require(rec, "title", str, file),
        guidance=_require(rec, "guidance", str, file),
        directive_template=template,
        applicability=applicability,
    )


def _parse_hyperparam(spec: Mapping, file: str, idx: int) -> HyperparamSpec:
    where = f"hyperparam_schema[{idx}]"
    if not isinstance(spec, dict):
        raise SchemaViolation(file, where)
    name = _require(spec, "name", str, file)
    typ = _require(spec, "type", str, file)
    if typ not in HYPERPARAM_TYPES:
        raise SchemaViolation(file, f"{where}.type")
    rng: Optional[tuple[float, float]] = None
    choices: Optional[tuple[Any, ...]] = None
    if typ == "categorical":
        raw_choices = _require(spec, "choices", list, file)
        if not raw_choices:
            raise SchemaViolation(file, f"{where}.choices")
        choices = tuple(raw_choices)
    else:
        raw_range = _require(spec, "range", list, file)
        if len(raw_range) != 2 or not all(
            isinstance(x, (int, float)) and not isinstance(x, bool) for x in raw_range
        ):
            raise SchemaViolation(file, f"{where}.range")
        lo, hi = float(raw_range[0]), float(raw_range[1])
        if not lo <= hi:
            raise SchemaViolation(file, f"{where}.range")
        if typ == "log-real" and lo <= 0:
            raise SchemaViolation(file, f"{where}.range")
        rng = (lo, hi)
    if "default" not in spec:
        raise SchemaViolation(file, f"{where}.default")
    parsed = HyperparamSpec(name=name, type=typ, range=rng, choices=choices, default=spec["default"])
    try:
        parsed.check(parsed.default, f"{where}.default")
    except FieldViolation as exc:
        raise SchemaViolation(file, f"{where}.default ({exc.reason})") from exc
    return parsed


def _parse_model(rec: Mapping, file: str) -> ModelDescriptor:
    _check_version(rec, file)
    family = _require(rec, "family", str, file)
    if family not in MODEL_FAMILIES:
        raise SchemaViolation(file, "family")
    kinds = _str_list(rec, "task_kinds", file, allowed=TASK_KINDS)
    if not kinds:
        raise SchemaViolation(file, "task_kinds")
    raw_schema = _require(rec, "hyperparam_schema", list, file)
    schema = tuple(_parse_hyperparam(s, file, i) for i, s in enumerate(raw_schema))
    names = [h.name for h in schema]
    if len(set(names)) != len(names):
        raise SchemaViolation(file, "hyperparam_schema (duplicate names)")
    raw_binding = _require(rec, "binding", dict, file)
    bkind = _require(raw_binding, "kind", str, file)
    if bkind not in ("native", "external"):
        raise SchemaViolation(file, "binding.kind")
    binding = Binding(kind=bkind, ref=_require(raw_binding, "ref", str, file))
    if binding.kind == "native":
        from .executor import NATIVE_MODEL_KINDS  # deferred: executor imports this module

        if binding.ref not in NATIVE_MODEL_KINDS:
            raise SchemaViolation(file, f"binding.ref (no native model kind {binding.ref!r})")
    return ModelDescriptor(
        id=_require(rec, "id", str, file),
        family=family,
        task_kinds=kinds,
        hyperparam_schema=schema,
        binding=binding,
        summary=_require(rec, "summary", str, file),
    )


def _parse_metric(rec: Mapping, file: str) -> MetricDescriptor:
    _check_version(rec, file)
    kinds = _str_list(rec, "task_kinds", file, allowed=TASK_KINDS)
    if not kinds:
        raise SchemaViolation(file, "task_kinds")
    direction = _require(rec, "direction", str, file)
    if direction != "minimize":
        raise SchemaViolation(file, "direction")
    metric_id = _require(rec, "id", str, file)
    for kind in kinds:
        implemented = FORECAST_METRICS if kind == "forecasting" else GENERATION_METRICS
        if metric_id not in implemented:
            raise SchemaViolation(file, f"id (metric {metric_id!r} not implemented for {kind})")
    return MetricDescriptor(
        id=metric_id,
        task_kinds=kinds,
        direction=direction,
        summary=_require(rec, "summary", str, file),
    )


_PARSERS = {
    "cases": _parse_case,
    "refinements": _parse_refinement,
    "models": _parse_model,
    "metrics": _parse_metric,
}


def _load_section(root: Path, section: str) -> list:
    subdir = root / section
    if not subdir.is_dir():
        raise MissingFile(f"bank root missing {section}/ directory: {subdir}")
    records = []
    seen_ids: set[str] = set()
    for path in sorted(subdir.glob("*.json")):
        rel = f"{section}/{path.name}"
        try:
            raw = json.loads(path.read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise SchemaViolation(rel, f"(unreadable: {exc})") from exc
        if not isinstance(raw, dict):
            raise SchemaViolation(rel, "(top-level object required)")
        record = _PARSERS[section](raw, rel)
        if record.id in seen_ids:
            raise DuplicateId(f"{section}: duplicate id {record.id!r} in {rel}")
        seen_ids.add(record.id)
        records.append(record)
    return records


def load_banks(root: str | Path) -> BankSet:
    """Load and validate all four bank sections from a directory tree."""
    rootp = Path(root)
    if not rootp.is_dir():
        raise MissingFile(f"bank root not found: {rootp}")
    cases = _load_section(rootp, "cases")
    refinements = _load_section(rootp, "refinements")
    models = _load_section(rootp, "models")
    metrics = _load_section(rootp, "metrics")

    model_ids = {m.id for m in models}
    metric_ids = {m.id for m in metrics}
    families_present = {m.family for m in models}
    for case in cases:
        if case.recommended_model not in model_ids:
            raise DanglingReference(case.id, case.recommended_model)
        for mid in case.outcome:
            if mid not in metric_ids:
                raise DanglingReference(case.id, mid)
    for entry in refinements:
        if not any(fam in families_present for fam in entry.applicability):
            raise DanglingReference(entry.id, f"family:{'/'.join(entry.applicability)}")

    def by_id(records):
        return sorted(records, key=lambda r: r.id)

    cases_s = tuple(by_id(cases))
    refinements_s = tuple(by_id(refinements))
    models_s = tuple(by_id(models))
    metrics_s = tuple(by_id(metrics))
    digest = digest_of(
        {
            "cases": [c.to_json() for c in cases_s],
            "refinements": [r.to_json() for r in refinements_s],
            "models": [m.to_json() for m in models_s],
            "metrics": [m.to_json() for m in metrics_s],
        }
    )
    return BankSet(
        cases=cases_s,
        refinements=refinements_s,
        models=models_s,
        metrics=metrics_s,
        content_digest=digest,
        _model_idx={m.id: m for m in models_s},
        _metric_idx={m.id: m for m in metrics_s},
        _case_idx={c.id: c for c in cases_s},
        _refinement_idx={r.id: r for r in refinements_s},
    )


def validate_hyperparams(model: ModelDescriptor, assignment: Mapping[str, Any]) -> dict[str, Any]:
    """Range-check an assignment against the model schema and fill defaults."""
    schema = model.schema_by_name()
    for name in assignment:
        if name not in schema:
            raise FieldViolation(f"hyperparams.{name}", f"not a hyperparameter of {model.id}")
    complete: dict[str, Any] = {}
    for name, spec in schema.items():
        if name in assignment:
            complete[name] = spec.check(assignment[name], f"hyperparams.{name}")
        else:
            complete[name] = spec.default
    return complete


def _render_case(c: CaseRecord) -> str:
    outcome = ", ".join(f"{k}={v:g}" for k, v in sorted(c.outcome.items()))
    return (
        f"[case {c.id}] kind={c.task_kind} tags={','.join(c.domain_tags)}\n"
        f"{c.description}\n"
        f"solution: {c.solution_summary}\n"
        f"recommended_model: {c.recommended_model}"
        + (f" | outcome: {outcome}" if outcome else "")
    )


def _render_refinement(r: RefinementEntry) -> str:
    d = r.directive_template
    params = ", ".join(f"{k}={v:g}" for k, v in sorted(d.params.items()))
    return (
        f"[tip {r.id}] category={r.category} | {r.title}\n"
        f"{r.guidance}\n"
        f"directive: {d.kind}({params})\n"
        f"applies_to: {','.join(r.applicability)}"
    )


def _render_model(m: ModelDescriptor) -> str:
    lines = [f"[model {m.id}] family={m.family} kinds={','.join(m.task_kinds)}", m.summary]
    for h in m.hyperparam_schema:
        if h.type == "categorical":
            dom = f"choices={list(h.choices or ())}"
        else:
            dom = f"range=[{h.range[0]:g}, {h.range[1]:g}]"
        lines.append(f"  hyperparam {h.name}: {h.type} {dom} default={h.default}")
    return "\n".join(lines)


def _render_metric(m: MetricDescriptor) -> str:
    return f"[metric {m.id}] kinds={','.join(m.task_kinds)} direction={m.direction}\n{m.summary}"


_RENDERERS = {
    "cases": _render_case,
    "refinements": _render_refinement,
    "models": _render_model,
    "metrics": _render_metric,
}

_LOOKUPS = {
    "cases": lambda banks, i: banks.case(i),
    "refinements": lambda banks, i: banks.refinement(i),
    "models": lambda banks, i: banks.model(i),
    "metrics": lambda banks, i: banks.metric(i),
}


def bank_excerpt(banks: BankSet, section: str, ids: Sequence[str]) -> str:
    """Stable plain-text rendering of selected records, ascending id order."""
    if section not in BANK_SECTIONS:
        raise ValueError(f"unknown bank section {section!r}")
    if not ids:
        return ""
    records = [_LOOKUPS[section](banks, i) for i in ids]
    records.sort(key=lambda r: r.id)
    render = _RENDERERS[section]
    return "\n\n".join(render(r) for r in records)
