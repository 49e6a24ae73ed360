"""Factorized decision policy: model selection, refinement, fine-tuning.

Each stage sees only its own slice of state (parsimonious context), and every
backend (scripted rule table, seeded-random sampler, or LLM) produces the
same Decision shape, validated against the stage schema before anything
downstream consumes it.
"""

from __future__ import annotations

import json
import math
import re
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Callable, Mapping, Optional, Sequence

import numpy as np

from .audit import Memory, digest_for_context
from .banks import BankSet, ModelDescriptor, bank_excerpt, validate_hyperparams
from .canonical import sha256_hex, stable_uint64
from .directives import CATALOG, validate_directives
from .errors import (
    BackendUnavailable,
    BudgetImpossible,
    FieldViolation,
    NoJsonFound,
    ParseExhausted,
)
from .executor import SUPPORTED_DIRECTIVES, CandidateConfig, RunResult
from .gateway import ChatParams, Gateway, chat_request
from .retrieval import RetrievalResult
from .tasks import TaskSpec

STAGES = ("model_select", "refinement", "fine_tune")
DECISION_KINDS = {"model_select": "model", "refinement": "refinement", "fine_tune": "fine_tune"}
DEFAULT_CONTEXT_BUDGET = 16000
MAX_PARSE_ATTEMPTS = 3

PROMPT_DIR = Path(__file__).parent / "prompts"


@dataclass(frozen=True)
class DecisionSchema:
    stage: str
    allowed_models: tuple[str, ...] = ()
    model: Optional[ModelDescriptor] = None
    allow_freeform: bool = False

    def render(self) -> str:
        if self.stage == "model_select":
            return (
                "Reply with one JSON object: "
                '{"model_id": <one of ' + json.dumps(list(self.allowed_models)) + '>, '
                '"rationale": <non-empty string>}. No other fields.'
            )
        if self.stage == "refinement":
            names = ", ".join(sorted(CATALOG))
            extra = ' Optionally "freeform_patch": <string>.' if self.allow_freeform else ""
            return (
                "Reply with one JSON object: "
                '{"directives": [{"name": <catalog name>, "params": {...}}, ...], '
                '"rationale": <non-empty string>}.'
                f" Catalog names: {names}.{extra} No other fields."
            )
        return (
            "Reply with one JSON object: "
            '{"hyperparams": {<name>: <value>, ...}, "rationale": <non-empty string>}. '
            "Values must respect the documented ranges. No other fields."
        )


@dataclass(frozen=True)
class DecisionContext:
    stage: str
    task_text: str
    bank_excerpts: str
    memory_digest: str
    current_config: str
    last_result: Optional[str]
    schema: DecisionSchema
    candidate_id: str = ""
    iteration: int = 0
    attempt: int = 0
    error_text: Optional[str] = None

    def rendered(self) -> str:
        blocks = [f"stage: {self.stage}"]
        if self.task_text:
            blocks.append(f"task:\n{self.task_text}")
        if self.bank_excerpts:
            blocks.append(f"bank excerpts:\n{self.bank_excerpts}")
        if self.memory_digest:
            blocks.append(f"memory:\n{self.memory_digest}")
        if self.current_config:
            blocks.append(f"current config:\n{self.current_config}")
        if self.last_result is not None:
            blocks.append(f"last result:\n{self.last_result}")
        if self.error_text is not None:
            blocks.append(f"error to fix:\n{self.error_text}")
        blocks.append(f"response schema:\n{self.schema.render()}")
        return "\n\n".join(blocks)


@dataclass(frozen=True)
class Decision:
    kind: str  # model | refinement | fine_tune
    payload: Mapping[str, Any]
    rationale: str
    backend_id: str
    meta: Mapping[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        if not self.rationale.strip():
            raise ValueError("Decision rationale must be non-empty")


@dataclass(frozen=True)
class PlannerState:
    """The slice of controller state the planner is allowed to see."""

    candidate_id: str = ""
    iteration: int = 0
    attempt: int = 0
    retrieval: Optional[RetrievalResult] = None
    current_config: Optional[CandidateConfig] = None
    last_result: Optional[RunResult] = None
    metrics_history: tuple[tuple[int, str, Optional[float]], ...] = ()  # (iteration, status, primary_loss)
    error_text: Optional[str] = None


def _summarize_config(config: Optional[CandidateConfig]) -> str:
    if config is None:
        return ""
    return json.dumps(config.to_json(), sort_keys=True)


def _summarize_result(result: Optional[RunResult]) -> Optional[str]:
    if result is None:
        return None
    if result.ok:
        rendered = ", ".join(f"{k}={v:.6g}" for k, v in sorted((result.metrics or {}).items()))
        return f"status=success primary_loss={result.primary_loss:.6g} metrics: {rendered}"
    parts = [f"status={result.status}", f"message={result.message}"]
    if result.stderr_tail:
        parts.append(f"stderr: {result.stderr_tail}")
    return " ".join(parts)


def _history_digest(history: Sequence[tuple[int, str, Optional[float]]], char_budget: int) -> str:
    if not history:
        return "history: none yet"
    lines = []
    total = 0
    for iteration, status, loss in reversed(history):
        loss_txt = "n/a" if loss is None else f"{loss:.6g}"
        line = f"t={iteration} status={status} primary_loss={loss_txt}"
        if total + len(line) + 1 > char_budget:
            break
        lines.append(line)
        total += len(line) + 1
    return "\n".join(lines) if lines else "history: (budget too small)"


def build_context(
    stage: str,
    task: TaskSpec,
    banks: BankSet,
    memory: Optional[Memory],
    state: PlannerState,
    char_budget: int = DEFAULT_CONTEXT_BUDGET,
) -> DecisionContext:
    """Assemble the stage-restricted context.

    model_select sees only the task text and retrieved case excerpts;
    refinement sees task text, refinement-bank excerpts, memory digest, current
    config, and the last result; fine_tune sees only the hyperparameter schema,
    the metrics history, and the current assignment.
    """
    if stage not in STAGES:
        raise ValueError(f"unknown stage {stage!r}")
    common = dict(candidate_id=state.candidate_id, iteration=state.iteration, attempt=state.attempt)

    if stage == "model_select":
        if state.retrieval is None:
            raise ValueError("model_select context requires retrieval output")
        case_ids = [cid for cid, _ in state.retrieval.ranked]
        excerpts = bank_excerpt(banks, "cases", case_ids)
        schema = DecisionSchema(
            stage=stage, allowed_models=tuple(m for m, _ in state.retrieval.model_votes)
        )
        ctx = DecisionContext(
            stage=stage,
            task_text=task.description,
            bank_excerpts=excerpts,
            memory_digest="",
            current_config="",
            last_result=None,
            schema=schema,
            **common,
        )
        if len(ctx.rendered()) > char_budget:
            raise BudgetImpossible(f"model_select mandatory context exceeds budget {char_budget}")
        return ctx

    if state.current_config is None:
        raise ValueError(f"{stage} context requires a current config")
    model = banks.model(state.current_config.model_id)

    if stage == "refinement":
        entries = [r.id for r in banks.refinements if model.family in r.applicability]
        excerpts = bank_excerpt(banks, "refinements", entries)
        schema = DecisionSchema(stage=stage, model=model, allow_freeform=model.binding.kind == "external")
        base = DecisionContext(
            stage=stage,
            task_text=task.description,
            bank_excerpts=excerpts,
            memory_digest="",
            current_config=_summarize_config(state.current_config),
            last_result=_summarize_result(state.last_result),
            schema=schema,
            error_text=state.error_text,
            **common,
        )
        mandatory = len(base.rendered())
        if mandatory > char_budget:
            raise BudgetImpossible(f"refinement mandatory context ({mandatory}) exceeds budget {char_budget}")
        if memory is not None:
            digest = digest_for_context(memory, max(char_budget - mandatory, len("best_so_far: none yet")))
            base = replace(base, memory_digest=digest)
        return base

    # fine_tune: hyperparameter schema + history + current assignment only
    schema_text = "\n".join(
        f"hyperparam {h.name}: {h.type} "
        + (f"choices={list(h.choices or ())}" if h.type == "categorical" else f"range=[{h.range[0]:g}, {h.range[1]:g}]")
        + f" default={h.default}"
        for h in model.hyperparam_schema
    )
    schema = DecisionSchema(stage=stage, model=model)
    assignment = json.dumps(dict(state.current_config.hyperparams), sort_keys=True)
    base = DecisionContext(
        stage=stage,
        task_text="",
        bank_excerpts=schema_text or "(no hyperparameters)",
        memory_digest="",
        current_config=assignment,
        last_result=None,
        schema=schema,
        **common,
    )
    mandatory = len(base.rendered())
    if mandatory > char_budget:
        raise BudgetImpossible(f"fine_tune mandatory context ({mandatory}) exceeds budget {char_budget}")
    history = _history_digest(state.metrics_history, char_budget - mandatory)
    return replace(base, memory_digest=history)


# --- payload validation ---------------------------------------------------------


def _require_rationale(obj: Mapping[str, Any]) -> str:
    rationale = obj.get("rationale")
    if not isinstance(rationale, str) or not rationale.strip():
        raise FieldViolation("rationale", "must be a non-empty string")
    return rationale


def validate_payload(schema: DecisionSchema, obj: Mapping[str, Any]) -> tuple[dict, str]:
    """Check a raw decision object against its stage schema.

    Returns (canonical payload without rationale, rationale).  Unknown fields
    are rejected with their paths.
    """
    if schema.stage == "model_select":
        allowed_keys = {"model_id", "rationale"}
        for key in obj:
            if key not in allowed_keys:
                raise FieldViolation(key, "unknown field for model_select decision")
        model_id = obj.get("model_id")
        if not isinstance(model_id, str):
            raise FieldViolation("model_id", "must be a string")
        if schema.allowed_models and model_id not in schema.allowed_models:
            raise FieldViolation("model_id", f"{model_id!r} not among candidates {list(schema.allowed_models)}")
        return {"model_id": model_id}, _require_rationale(obj)

    if schema.stage == "refinement":
        allowed_keys = {"directives", "rationale", "freeform_patch"}
        for key in obj:
            if key not in allowed_keys:
                raise FieldViolation(key, "unknown field for refinement decision")
        directives = validate_directives(obj.get("directives", None) or [])
        payload: dict[str, Any] = {"directives": [d.to_json() for d in directives]}
        if "freeform_patch" in obj:
            if not schema.allow_freeform:
                raise FieldViolation("freeform_patch", "only allowed for externally bound models")
            if not isinstance(obj["freeform_patch"], str):
                raise FieldViolation("freeform_patch", "must be a string")
            payload["freeform_patch"] = obj["freeform_patch"]
        return payload, _require_rationale(obj)

    allowed_keys = {"hyperparams", "rationale"}
    for key in obj:
        if key not in allowed_keys:
            raise FieldViolation(key, "unknown field for fine_tune decision")
    hyperparams = obj.get("hyperparams")
    if not isinstance(hyperparams, Mapping):
        raise FieldViolation("hyperparams", "must be an object")
    if schema.model is None:
        raise FieldViolation("hyperparams", "no model schema available for validation")
    complete = validate_hyperparams(schema.model, hyperparams)
    return {"hyperparams": complete}, _require_rationale(obj)


def extract_first_json(text: str) -> dict:
    """First JSON object embedded anywhere in the text."""
    decoder = json.JSONDecoder()
    idx = text.find("{")
    while idx != -1:
        try:
            obj, _ = decoder.raw_decode(text[idx:])
        except json.JSONDecodeError:
            idx = text.find("{", idx + 1)
            continue
        if isinstance(obj, dict):
            return obj
        idx = text.find("{", idx + 1)
    raise NoJsonFound("no JSON object found in backend response")


def parse_decision(text: str, schema: DecisionSchema) -> tuple[dict, str]:
    """Strict parse of a backend's textual response into a validated payload."""
    return validate_payload(schema, extract_first_json(text))


# --- backends ---------------------------------------------------------------------


class ScriptedBackend:
    """Deterministic rule table; the default rules implement a conservative
    improvement schedule suitable for the native model kinds."""

    def __init__(self, rules: Optional[Mapping[str, Callable[[DecisionContext], Mapping[str, Any]]]] = None):
        self.id = "scripted"
        self.capabilities = set(STAGES)
        self._rules = dict(rules or {})

    def _tag(self, ctx: DecisionContext) -> str:
        return f"[{ctx.candidate_id} t={ctx.iteration} {ctx.stage} a={ctx.attempt}]"

    def _default_model(self, ctx: DecisionContext) -> dict:
        pick = ctx.schema.allowed_models[0]
        return {"model_id": pick, "rationale": f"scripted{self._tag(ctx)}: keep top-voted model {pick}"}

    def _default_refinement(self, ctx: DecisionContext) -> dict:
        model = ctx.schema.model
        supported = SUPPORTED_DIRECTIVES.get(model.binding.ref, frozenset()) if model else frozenset()
        if ctx.error_text is not None:
            return {
                "directives": [],
                "rationale": f"scripted{self._tag(ctx)}: repair by dropping all directives after failure",
            }
        schedule = [
            [("normalize_zscore", {})],
            [("normalize_zscore", {}), ("early_stopping", {"patience": 8})],
            [("normalize_zscore", {}), ("gradient_clip", {"max_norm": 5.0})],
            [("normalize_zscore", {}), ("weight_decay", {"lambda": 0.0005})],
            [("normalize_zscore", {}), ("lr_schedule_plateau", {"factor": 0.5, "patience": 4})],
            [("cov_shrinkage", {"lambda": 0.1})],
            [("normalize_zscore", {}), ("cov_shrinkage", {"lambda": 0.2})],
            [("normalize_minmax", {})],
        ]
        step = schedule[(max(ctx.iteration, 1) - 1) % len(schedule)]
        directives = [
            {"name": name, "params": params} for name, params in step if not supported or name in supported
        ]
        names = ",".join(d["name"] for d in directives) or "none"
        return {
            "directives": directives,
            "rationale": f"scripted{self._tag(ctx)}: schedule step proposes directives {names}",
        }

    def _default_fine_tune(self, ctx: DecisionContext) -> dict:
        model = ctx.schema.model
        assert model is not None
        current = json.loads(ctx.current_config) if ctx.current_config else {}
        t = max(ctx.iteration, 1)
        out: dict[str, Any] = {}
        for spec in model.hyperparam_schema:
            value = current.get(spec.name, spec.default)
            if spec.type == "categorical":
                out[spec.name] = value
                continue
            lo, hi = spec.range
            if spec.name == "lr":
                factors = (0.6, 1.3, 0.8, 1.0)
                value = min(max(value * factors[(t - 1) % len(factors)], lo), hi)
            elif spec.name == "epochs":
                value = int(min(max(round(value * (1.2 if t % 2 else 1.0)), lo), hi))
            elif spec.name == "alpha":
                value = min(max(value + (0.3 - value) * 0.5, lo), hi)
            elif spec.name == "block_len":
                value = int(min(max(value + (1 if t % 2 else -1), lo), hi))
            elif spec.type == "int":
                value = int(min(max(value, lo), hi))
            else:
                value = min(max(value, lo), hi)
            out[spec.name] = value
        return {
            "hyperparams": out,
            "rationale": f"scripted{self._tag(ctx)}: deterministic tuning step over {len(out)} hyperparams",
        }

    def decide(self, ctx: DecisionContext) -> Decision:
        rule = self._rules.get(ctx.stage)
        if rule is not None:
            raw = dict(rule(ctx))
        elif ctx.stage == "model_select":
            raw = self._default_model(ctx)
        elif ctx.stage == "refinement":
            raw = self._default_refinement(ctx)
        else:
            raw = self._default_fine_tune(ctx)
        payload, rationale = validate_payload(ctx.schema, raw)
        return Decision(kind=DECISION_KINDS[ctx.stage], payload=payload, rationale=rationale, backend_id=self.id)


class SeededRandomBackend:
    """Uniform sampling over valid payloads; every (candidate, iteration,
    stage, attempt) tuple gets its own substream so concurrency cannot perturb
    the sequence."""

    def __init__(self, seed: int):
        self.id = f"random:{seed}"
        self.capabilities = set(STAGES)
        self.seed = seed

    def _rng(self, ctx: DecisionContext) -> np.random.Generator:
        return np.random.default_rng(
            stable_uint64(str(self.seed), ctx.candidate_id, str(ctx.iteration), ctx.stage, str(ctx.attempt))
        )

    def _sample_directive(self, name: str, rng: np.random.Generator) -> dict:
        if name == "early_stopping":
            params: dict[str, Any] = {"patience": int(rng.integers(1, 11))}
        elif name == "lr_schedule_plateau":
            params = {"factor": float(rng.uniform(0.2, 0.9)), "patience": int(rng.integers(1, 7))}
        elif name == "weight_decay":
            params = {"lambda": float(rng.uniform(0.0, 0.01))}
        elif name == "gradient_clip":
            params = {"max_norm": float(rng.uniform(0.5, 10.0))}
        elif name == "augment_jitter":
            params = {"sigma": float(rng.uniform(0.0, 0.05))}
        elif name == "cov_shrinkage":
            params = {"lambda": float(rng.uniform(0.0, 0.5))}
        else:
            params = {}
        return {"name": name, "params": params}

    def decide(self, ctx: DecisionContext) -> Decision:
        rng = self._rng(ctx)
        tag = f"[{ctx.candidate_id} t={ctx.iteration} {ctx.stage} a={ctx.attempt}]"
        if ctx.stage == "model_select":
            pick = ctx.schema.allowed_models[int(rng.integers(0, len(ctx.schema.allowed_models)))]
            raw: dict[str, Any] = {"model_id": pick, "rationale": f"random{tag}: sampled {pick}"}
        elif ctx.stage == "refinement":
            model = ctx.schema.model
            pool = sorted(SUPPORTED_DIRECTIVES.get(model.binding.ref, frozenset())) if model else sorted(CATALOG)
            n = int(rng.integers(0, min(3, len(pool)) + 1)) if pool else 0
            chosen = sorted(rng.choice(len(pool), size=n, replace=False).tolist()) if n else []
            directives = [self._sample_directive(pool[i], rng) for i in chosen]
            names = ",".join(d["name"] for d in directives) or "none"
            raw = {"directives": directives, "rationale": f"random{tag}: sampled directives {names}"}
        else:
            model = ctx.schema.model
            assert model is not None
            out: dict[str, Any] = {}
            for spec in model.hyperparam_schema:
                if spec.type == "categorical":
                    out[spec.name] = (spec.choices or (spec.default,))[
                        int(rng.integers(0, len(spec.choices or (spec.default,))))
                    ]
                elif spec.type == "int":
                    lo, hi = spec.range
                    out[spec.name] = int(rng.integers(int(lo), int(hi) + 1))
                elif spec.type == "log-real":
                    lo, hi = spec.range
                    out[spec.name] = float(math.exp(rng.uniform(math.log(lo), math.log(hi))))
                else:
                    lo, hi = spec.range
                    out[spec.name] = float(rng.uniform(lo, hi))
            raw = {"hyperparams": out, "rationale": f"random{tag}: sampled assignment"}
        payload, rationale = validate_payload(ctx.schema, raw)
        return Decision(kind=DECISION_KINDS[ctx.stage], payload=payload, rationale=rationale, backend_id=self.id)


_PLACEHOLDER_RE = re.compile(r"\{\{(\w+)\}\}")


def render_template(template: str, values: Mapping[str, str]) -> str:
    return _PLACEHOLDER_RE.sub(lambda m: values.get(m.group(1), ""), template)


class LLMBackend:
    """Structured-response planner over the gateway; up to MAX_PARSE_ATTEMPTS
    total attempts, each re-prompt carrying the previous parse error text."""

    def __init__(
        self,
        gateway: Gateway,
        temperature: float = 0.2,
        max_tokens: int = 1024,
        prompt_dir: Optional[Path] = None,
    ):
        self.id = f"llm:{gateway.mode}"
        self.capabilities = set(STAGES)
        self._gateway = gateway
        self._params = ChatParams(temperature=temperature, max_tokens=max_tokens, model_name=gateway.model_name or "")
        self._prompt_dir = Path(prompt_dir) if prompt_dir else PROMPT_DIR
        self._templates: dict[str, str] = {}

    def _template(self, stage: str) -> str:
        if stage not in self._templates:
            self._templates[stage] = (self._prompt_dir / f"{stage}.txt").read_text(encoding="utf-8")
        return self._templates[stage]

    def decide(self, ctx: DecisionContext) -> Decision:
        template = self._template(ctx.stage)
        prompt = render_template(
            template,
            {
                "task_text": ctx.task_text,
                "bank_excerpts": ctx.bank_excerpts,
                "memory_digest": ctx.memory_digest,
                "current_config": ctx.current_config,
                "last_result": ctx.last_result or "",
                "error_text": ctx.error_text or "",
                "schema": ctx.schema.render(),
            },
        )
        messages: list[dict[str, str]] = [
            {"role": "system", "content": "You are a careful time-series modeling assistant."},
            {"role": "user", "content": prompt},
        ]
        last_error = ""
        for attempt in range(1, MAX_PARSE_ATTEMPTS + 1):
            response = self._gateway.complete(chat_request(messages, self._params))
            try:
                payload, rationale = parse_decision(response, ctx.schema)
            except (NoJsonFound, FieldViolation) as exc:
                last_error = str(exc)
                messages.append({"role": "assistant", "content": response})
                messages.append(
                    {
                        "role": "user",
                        "content": (
                            f"Your previous reply could not be parsed: {last_error}. "
                            "Reply again with exactly one valid JSON object matching the schema."
                        ),
                    }
                )
                continue
            return Decision(
                kind=DECISION_KINDS[ctx.stage],
                payload=payload,
                rationale=rationale,
                backend_id=self.id,
                meta={"template_digest": sha256_hex(template.encode("utf-8")), "parse_attempts": attempt},
            )
        raise ParseExhausted(MAX_PARSE_ATTEMPTS, last_error)


def decide(backend, ctx: DecisionContext) -> Decision:
    """Run one backend on one context, re-validating the payload at the boundary."""
    if ctx.stage not in getattr(backend, "capabilities", set()):
        raise BackendUnavailable(f"backend {getattr(backend, 'id', '?')} does not serve stage {ctx.stage}")
    decision = backend.decide(ctx)
    validate_payload(ctx.schema, {**dict(decision.payload), "rationale": decision.rationale})
    return decision


def config_from_decisions(
    base: CandidateConfig,
    refinement_payload: Optional[Mapping[str, Any]] = None,
    fine_tune_payload: Optional[Mapping[str, Any]] = None,
) -> CandidateConfig:
    """Fold decision payloads into a new candidate configuration.

    A refinement decision replaces the whole directive list (and the freeform
    patch, when present); a fine-tune decision replaces the hyperparameters.
    """
    directives = base.directives
    freeform = base.freeform_patch
    hyperparams = dict(base.hyperparams)
    if refinement_payload is not None:
        directives = validate_directives(refinement_payload.get("directives", []))
        freeform = refinement_payload.get("freeform_patch", None)
    if fine_tune_payload is not None:
        hyperparams = dict(fine_tune_payload["hyperparams"])
    return CandidateConfig(
        model_id=base.model_id,
        hyperparams=hyperparams,
        directives=directives,
        freeform_patch=freeform,
        seed=base.seed,
    )
