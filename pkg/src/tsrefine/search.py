"""Two-stage search: case-based pre-selection, then warm-up and optimization.

Stage 1 shortlists k models from the case bank.  Stage 2 runs a short
refinement loop per candidate in parallel (warm-up), promotes the best one,
and continues refining it (optimization).  A candidate replaces the incumbent
only on strict improvement of the primary criterion; everything that happens
is appended to the shared audit log.
"""

from __future__ import annotations

import copy
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Mapping, Optional, Sequence

from .audit import AuditLog, Memory, MemoryEntry, read_entries
from .banks import BankSet
from .canonical import digest_of, stable_uint64
from .errors import AllCandidatesFailed, EngineError, ParseExhausted
from .executor import CandidateConfig, RunResult
from .planner import PlannerState, build_context, config_from_decisions, decide
from .retrieval import index_cases, retrieve_and_vote
from .tasks import TaskSpec, validate_task

VOLATILE_REPORT_KEYS = frozenset(
    {"audit_head", "wall_clock", "duration_ms", "started_at", "finished_at", "timestamp", "timestamps"}
)


@dataclass(frozen=True)
class PhaseConfig:
    k: int = 2
    warmup_iters: int = 3
    opt_iters: int = 10
    debug_retries: int = 2
    seed: int = 0
    parallelism: Optional[int] = None
    context_budget: int = 16000
    k_cases: int = 5

    def __post_init__(self):
        if self.k < 1:
            raise EngineError(f"k must be >= 1, got {self.k}")
        if self.warmup_iters < 1:
            raise EngineError(f"warmup_iters must be >= 1, got {self.warmup_iters}")
        if self.opt_iters < 1:
            raise EngineError(f"opt_iters must be >= 1, got {self.opt_iters}")
        if self.debug_retries < 0:
            raise EngineError(f"debug_retries must be >= 0, got {self.debug_retries}")

    @property
    def t_max(self) -> int:
        return self.warmup_iters * self.k + self.opt_iters

    def to_json(self) -> dict:
        return {
            "k": self.k,
            "warmup_iters": self.warmup_iters,
            "opt_iters": self.opt_iters,
            "debug_retries": self.debug_retries,
            "seed": self.seed,
            "t_max": self.t_max,
        }


@dataclass
class SearchState:
    candidate_id: str
    incumbent: CandidateConfig
    incumbent_result: Optional[RunResult] = None
    iteration: int = 0
    memory: Memory = field(default_factory=lambda: Memory(candidate_id=""))
    last_result: Optional[RunResult] = None
    metrics_history: list[tuple[int, str, Optional[float]]] = field(default_factory=list)
    trace: list[dict] = field(default_factory=list)


@dataclass(frozen=True)
class FinalReport:
    task_id: str
    success: bool
    winning_config: Optional[dict]
    final_metrics: Optional[Mapping[str, float]]
    loss_trace: tuple[dict, ...]
    phases: Mapping[str, Any]
    audit_head: str
    wall_clock: Mapping[str, Any]
    bank_digest: str
    planner_backend: str
    phase_config: Mapping[str, Any]
    failure: Optional[Mapping[str, str]] = None

    def to_json(self) -> dict:
        return {
            "task_id": self.task_id,
            "success": self.success,
            "winning_config": self.winning_config,
            "final_metrics": dict(self.final_metrics) if self.final_metrics is not None else None,
            "loss_trace": [dict(step) for step in self.loss_trace],
            "phases": copy.deepcopy(dict(self.phases)),
            "audit_head": self.audit_head,
            "wall_clock": dict(self.wall_clock),
            "bank_digest": self.bank_digest,
            "planner_backend": self.planner_backend,
            "phase_config": dict(self.phase_config),
            "failure": dict(self.failure) if self.failure else None,
        }

    @property
    def digest(self) -> str:
        return report_digest(self.to_json())


def _prune_volatile(obj):
    if isinstance(obj, dict):
        return {k: _prune_volatile(v) for k, v in obj.items() if k not in VOLATILE_REPORT_KEYS}
    if isinstance(obj, (list, tuple)):
        return [_prune_volatile(v) for v in obj]
    return obj


def report_digest(report_json: Mapping) -> str:
    """Digest of a report with wall-clock and chain-head fields removed.

    Audit entry hashes commit to timestamps, so the chain head cannot be part
    of a digest that must be stable across replays.
    """
    return digest_of(_prune_volatile(dict(report_json)))


def _stable_core(report_json: Mapping) -> dict:
    return _prune_volatile(dict(report_json))


def _error_text(result: RunResult) -> str:
    parts = [f"{result.status}: {result.message}"]
    if result.log_excerpt and result.log_excerpt != result.message:
        parts.append(result.log_excerpt)
    if result.stderr_tail:
        parts.append(f"stderr tail:\n{result.stderr_tail}")
    return "\n".join(parts)


def _note(state: SearchState, seq: int, action: str, verdict: Optional[str], loss: Optional[float], rationale: str, config_digest: str):
    state.memory.note(
        MemoryEntry(
            seq=seq,
            iteration=state.iteration,
            action=action,
            verdict=verdict,
            primary_loss=loss,
            rationale=rationale,
            config_digest=config_digest,
        )
    )


def _planner_state(state: SearchState, attempt: int = 0, error_text: Optional[str] = None) -> PlannerState:
    return PlannerState(
        candidate_id=state.candidate_id,
        iteration=state.iteration,
        attempt=attempt,
        current_config=state.incumbent,
        last_result=state.last_result,
        metrics_history=tuple(state.metrics_history),
        error_text=error_text,
    )


def _decide_or_fallback(planner, ctx, log: AuditLog, state: SearchState, action: str):
    """Run the planner; on ParseExhausted log a no-op fallback and return None."""
    try:
        return decide(planner, ctx)
    except ParseExhausted as exc:
        rationale = (
            f"fallback[{state.candidate_id} t={state.iteration} {ctx.stage}]: "
            "planner parse exhausted, keeping current configuration"
        )
        seq, _ = log.append(
            iteration=state.iteration,
            candidate_id=state.candidate_id,
            action=action,
            payload={"decision": {"fallback": "no_op"}, "backend": getattr(planner, "id", "?"), "error": str(exc)},
            rationale=rationale,
            config_digest=state.incumbent.digest,
        )
        _note(state, seq, action, None, None, rationale, state.incumbent.digest)
        return None


def stage1_preselect(
    task: TaskSpec,
    banks: BankSet,
    planner,
    phase: PhaseConfig,
    log: AuditLog,
) -> list[tuple[str, CandidateConfig]]:
    """Retrieval, vote aggregation, optional planner re-rank, seed derivation.

    Returns (candidate_id, config) pairs in final priority order.
    """
    index = index_cases(banks, task.kind)
    result = retrieve_and_vote(index, banks, task.description, phase.k_cases, phase.k)
    order = [m for m, _ in result.model_votes]
    rationale = result.rationale
    backend_id = "retrieval"
    rerank_meta: dict[str, Any] = {}
    if "model_select" in getattr(planner, "capabilities", set()):
        ctx = build_context(
            "model_select",
            task,
            banks,
            None,
            PlannerState(candidate_id="stage1", iteration=0, retrieval=result),
            phase.context_budget,
        )
        try:
            decision = decide(planner, ctx)
        except ParseExhausted:
            decision = None
            rerank_meta = {"rerank": "parse_exhausted, lexical order kept"}
        if decision is not None:
            pick = decision.payload["model_id"]
            order = [pick] + [m for m in order if m != pick]
            rationale = decision.rationale
            backend_id = decision.backend_id
            rerank_meta = {"rerank": "planner", "meta": dict(decision.meta)}

    candidates: list[tuple[str, CandidateConfig]] = []
    for slot, model_id in enumerate(order):
        model = banks.model(model_id)
        config = CandidateConfig(
            model_id=model_id,
            hyperparams=model.default_hyperparams(),
            directives=(),
            seed=stable_uint64(str(phase.seed), "candidate", model_id),
        )
        candidates.append((f"c{slot}:{model_id}", config))
    log.append(
        iteration=0,
        candidate_id="stage1",
        action="A_model",
        payload={
            "retrieval": result.to_json(),
            "order": order,
            "backend": backend_id,
            **rerank_meta,
        },
        rationale=rationale,
        config_digest=candidates[0][1].digest,
    )
    return candidates


def debug_fix(
    failed_config: CandidateConfig,
    error: RunResult,
    task: TaskSpec,
    banks: BankSet,
    planner,
    executor,
    log: AuditLog,
    state: SearchState,
    retries: int,
    context_budget: int,
) -> tuple[CandidateConfig, RunResult, int]:
    """Up to `retries` repair attempts: the refinement planner is re-invoked
    with the error text in context, each proposal executed and logged."""
    config, result = failed_config, error
    attempts = 0
    for attempt in range(1, retries + 1):
        if result.ok:
            break
        error_text = _error_text(result)
        ctx = build_context(
            "refinement",
            task,
            banks,
            state.memory,
            _planner_state(state, attempt=attempt, error_text=error_text),
            context_budget,
        )
        decision = _decide_or_fallback(planner, ctx, log, state, "debug_attempt")
        if decision is not None:
            config = config_from_decisions(config, refinement_payload=decision.payload)
        attempts = attempt
        result = executor.run(config, task)
        rationale = (
            decision.rationale
            if decision is not None
            else f"fallback[{state.candidate_id} t={state.iteration} debug a={attempt}]: retry unchanged config"
        )
        seq, _ = log.append(
            iteration=state.iteration,
            candidate_id=state.candidate_id,
            action="debug_attempt",
            payload={
                "attempt": attempt,
                "error": error_text,
                "decision": dict(decision.payload) if decision is not None else {"fallback": "no_op"},
                "backend": decision.backend_id if decision is not None else getattr(planner, "id", "?"),
                "result_status": result.status,
            },
            rationale=rationale,
            config_digest=config.digest,
            metrics=result.metrics if result.ok else None,
        )
        _note(state, seq, "debug_attempt", None, result.primary_loss, rationale, config.digest)
        if result.ok:
            break
    return config, result, attempts


def _log_decision(log: AuditLog, state: SearchState, action: str, decision) -> None:
    seq, _ = log.append(
        iteration=state.iteration,
        candidate_id=state.candidate_id,
        action=action,
        payload={"decision": dict(decision.payload), "backend": decision.backend_id, "meta": dict(decision.meta)},
        rationale=decision.rationale,
        config_digest=state.incumbent.digest,
    )
    _note(state, seq, action, None, None, decision.rationale, state.incumbent.digest)


def refine_iteration(
    state: SearchState,
    task: TaskSpec,
    banks: BankSet,
    planner,
    executor,
    log: AuditLog,
    phase: PhaseConfig,
    phase_label: str,
) -> SearchState:
    """One full cycle: refinement decision, fine-tune decision, execution,
    debug-and-fix, strict-improvement accept/reject, memory update."""
    assert state.incumbent_result is not None and state.incumbent_result.ok
    state.iteration += 1
    t = state.iteration

    ref_ctx = build_context("refinement", task, banks, state.memory, _planner_state(state), phase.context_budget)
    ref_decision = _decide_or_fallback(planner, ref_ctx, log, state, "A_refinement")
    if ref_decision is not None:
        _log_decision(log, state, "A_refinement", ref_decision)

    ft_ctx = build_context("fine_tune", task, banks, state.memory, _planner_state(state), phase.context_budget)
    ft_decision = _decide_or_fallback(planner, ft_ctx, log, state, "A_fine_tune")
    if ft_decision is not None:
        _log_decision(log, state, "A_fine_tune", ft_decision)

    candidate = config_from_decisions(
        state.incumbent,
        refinement_payload=dict(ref_decision.payload) if ref_decision is not None else None,
        fine_tune_payload=dict(ft_decision.payload) if ft_decision is not None else None,
    )
    result = executor.run(candidate, task)
    if not result.ok and phase.debug_retries > 0:
        candidate, result, _ = debug_fix(
            candidate, result, task, banks, planner, executor, log, state, phase.debug_retries, phase.context_budget
        )

    pre_digest = state.incumbent.digest
    incumbent_loss = state.incumbent_result.primary_loss
    accepted = result.ok and result.primary_loss < incumbent_loss
    verdict = "accepted" if accepted else "rejected"
    if accepted:
        state.incumbent = candidate
        state.incumbent_result = result
    cand_loss_txt = f"{result.primary_loss:.6g}" if result.ok else result.status
    rationale = (
        f"logging[{state.candidate_id} t={t}]: candidate loss {cand_loss_txt} "
        f"vs incumbent {incumbent_loss:.6g} -> {verdict}"
    )
    seq, _ = log.append(
        iteration=t,
        candidate_id=state.candidate_id,
        action="A_logging",
        payload={
            "event": "iteration_result",
            "phase": phase_label,
            "candidate_digest": candidate.digest,
            "result": result.to_json(),
            "incumbent_digest_after": state.incumbent.digest,
            "reverted": (not accepted),
            "pre_iteration_digest": pre_digest,
        },
        rationale=rationale,
        config_digest=state.incumbent.digest,
        metrics=result.metrics if result.ok else None,
        verdict=verdict,
    )
    _note(state, seq, "A_logging", verdict, result.primary_loss, rationale, state.incumbent.digest)
    state.memory.push_state(state.incumbent.digest)
    if result.ok:
        state.memory.update_best(candidate.digest, result.primary_loss)
    state.last_result = result
    state.metrics_history.append((t, result.status, result.primary_loss))
    state.trace.append(
        {
            "iteration": t,
            "candidate_id": state.candidate_id,
            "phase": phase_label,
            "status": result.status,
            "candidate_loss": result.primary_loss,
            "incumbent_loss": state.incumbent_result.primary_loss,
            "verdict": verdict,
            "config_digest": state.incumbent.digest,
        }
    )
    return state


def _warm_start(
    candidate_id: str,
    config: CandidateConfig,
    task: TaskSpec,
    banks: BankSet,
    planner,
    executor,
    log: AuditLog,
    phase: PhaseConfig,
) -> Optional[SearchState]:
    """Iteration 0: run bank defaults; a failing candidate gets the debug loop
    and is skipped if it still cannot produce a successful run."""
    state = SearchState(candidate_id=candidate_id, incumbent=config, memory=Memory(candidate_id=candidate_id))
    result = executor.run(config, task)
    state.last_result = result
    if not result.ok and phase.debug_retries > 0:
        config, result, _ = debug_fix(
            config, result, task, banks, planner, executor, log, state, phase.debug_retries, phase.context_budget
        )
    rationale = (
        f"logging[{candidate_id} t=0]: warm-start run "
        + (f"loss {result.primary_loss:.6g}" if result.ok else f"failed ({result.status})")
    )
    seq, _ = log.append(
        iteration=0,
        candidate_id=candidate_id,
        action="A_logging",
        payload={
            "event": "warm_start",
            "phase": "warmup",
            "result": result.to_json(),
            "candidate_digest": config.digest,
        },
        rationale=rationale,
        config_digest=config.digest,
        metrics=result.metrics if result.ok else None,
        verdict="n/a",
    )
    _note(state, seq, "A_logging", "n/a", result.primary_loss, rationale, config.digest)
    state.memory.push_state(config.digest)
    state.metrics_history.append((0, result.status, result.primary_loss))
    state.trace.append(
        {
            "iteration": 0,
            "candidate_id": candidate_id,
            "phase": "warm_start",
            "status": result.status,
            "candidate_loss": result.primary_loss,
            "incumbent_loss": result.primary_loss,
            "verdict": "n/a",
            "config_digest": config.digest,
        }
    )
    if not result.ok:
        return None
    state.incumbent = config
    state.incumbent_result = result
    state.memory.update_best(config.digest, result.primary_loss)
    return state


def run_warmup(
    candidates: Sequence[tuple[str, CandidateConfig]],
    task: TaskSpec,
    banks: BankSet,
    planner,
    executor,
    log: AuditLog,
    phase: PhaseConfig,
) -> tuple[SearchState, list[dict]]:
    """Independent W-iteration refine loops per candidate, possibly in
    parallel; the winner is the candidate with the minimum best loss, ties
    broken by stage-1 order, and it proceeds with its best-found config."""

    def run_loop(slot: int) -> tuple[int, Optional[SearchState]]:
        candidate_id, config = candidates[slot]
        state = _warm_start(candidate_id, config, task, banks, planner, executor, log, phase)
        if state is None:
            return slot, None
        for _ in range(phase.warmup_iters):
            refine_iteration(state, task, banks, planner, executor, log, phase, "warmup")
        return slot, state

    workers = phase.parallelism or phase.k
    if workers > 1 and len(candidates) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            outcomes = list(pool.map(run_loop, range(len(candidates))))
    else:
        outcomes = [run_loop(slot) for slot in range(len(candidates))]
    outcomes.sort(key=lambda pair: pair[0])

    summaries = []
    winner: Optional[SearchState] = None
    winner_slot = -1
    for slot, state in outcomes:
        candidate_id = candidates[slot][0]
        if state is None:
            summaries.append({"candidate_id": candidate_id, "failed": True, "best_loss": None, "iterations": 0})
            continue
        best_loss = state.incumbent_result.primary_loss
        summaries.append(
            {
                "candidate_id": candidate_id,
                "failed": False,
                "best_loss": best_loss,
                "iterations": state.iteration,
            }
        )
        if winner is None or best_loss < winner.incumbent_result.primary_loss:
            winner = state
            winner_slot = slot
    if winner is None:
        raise AllCandidatesFailed("no warm-up candidate achieved a successful run")
    log.append(
        iteration=winner.iteration,
        candidate_id=winner.candidate_id,
        action="phase_marker",
        payload={
            "phase": "warmup_winner",
            "winner": winner.candidate_id,
            "winner_slot": winner_slot,
            "best_loss": winner.incumbent_result.primary_loss,
            "per_candidate": summaries,
        },
        rationale=f"phase[warmup_winner]: {winner.candidate_id} wins with loss "
        f"{winner.incumbent_result.primary_loss:.6g}",
        config_digest=winner.incumbent.digest,
    )
    return winner, summaries


def run_optimization(
    state: SearchState,
    task: TaskSpec,
    banks: BankSet,
    planner,
    executor,
    log: AuditLog,
    phase: PhaseConfig,
) -> SearchState:
    for _ in range(phase.opt_iters):
        refine_iteration(state, task, banks, planner, executor, log, phase, "optimization")
    return state


def run_full(
    task: TaskSpec,
    banks: BankSet,
    planner,
    executor,
    phase: PhaseConfig,
    audit_path: str | Path,
) -> FinalReport:
    """Full pipeline; failures are reported in the result, never raised."""
    started_at = datetime.now(timezone.utc).isoformat()
    t0 = time.monotonic()
    log = AuditLog(audit_path)

    def wall_clock() -> dict:
        return {
            "started_at": started_at,
            "finished_at": datetime.now(timezone.utc).isoformat(),
            "duration_ms": int((time.monotonic() - t0) * 1000),
        }

    def fail(phase_name: str, message: str, phases: dict) -> FinalReport:
        report = FinalReport(
            task_id=task.id,
            success=False,
            winning_config=None,
            final_metrics=None,
            loss_trace=(),
            phases=phases,
            audit_head=log.head_hash,
            wall_clock=wall_clock(),
            bank_digest=banks.content_digest,
            planner_backend=getattr(planner, "id", "?"),
            phase_config=phase.to_json(),
            failure={"phase": phase_name, "message": message},
        )
        _finalize(log, report)
        return report

    log.append(
        iteration=0,
        candidate_id="engine",
        action="phase_marker",
        payload={"phase": "run_start", "task_id": task.id, "config": phase.to_json(), "bank_digest": banks.content_digest},
        rationale=f"phase[run_start]: task {task.id}",
        config_digest="",
    )

    violations = validate_task(task, banks)
    if violations:
        detail = "; ".join(f"{v.kind}: {v.detail}" for v in violations)
        return fail("validate", detail, {})

    try:
        candidates = stage1_preselect(task, banks, planner, phase, log)
    except EngineError as exc:
        return fail("stage1", str(exc), {})

    phases: dict[str, Any] = {"stage1": {"candidates": [cid for cid, _ in candidates]}}
    try:
        winner, summaries = run_warmup(candidates, task, banks, planner, executor, log, phase)
    except AllCandidatesFailed as exc:
        return fail("warmup", str(exc), phases)
    except EngineError as exc:
        return fail("warmup", str(exc), phases)
    phases["warmup"] = {"winner": winner.candidate_id, "per_candidate": summaries}

    warmup_best = winner.incumbent_result.primary_loss
    log.append(
        iteration=winner.iteration,
        candidate_id=winner.candidate_id,
        action="phase_marker",
        payload={"phase": "optimization_start", "start_loss": warmup_best},
        rationale=f"phase[optimization_start]: continuing {winner.candidate_id}",
        config_digest=winner.incumbent.digest,
    )
    try:
        final_state = run_optimization(winner, task, banks, planner, executor, log, phase)
    except EngineError as exc:
        return fail("optimization", str(exc), phases)
    phases["optimization"] = {
        "start_loss": warmup_best,
        "final_loss": final_state.incumbent_result.primary_loss,
        "iterations": phase.opt_iters,
    }

    report = FinalReport(
        task_id=task.id,
        success=True,
        winning_config=final_state.incumbent.to_json(),
        final_metrics=dict(final_state.incumbent_result.metrics or {}),
        loss_trace=tuple(final_state.trace),
        phases=phases,
        audit_head=log.head_hash,
        wall_clock=wall_clock(),
        bank_digest=banks.content_digest,
        planner_backend=getattr(planner, "id", "?"),
        phase_config=phase.to_json(),
    )
    _finalize(log, report)
    return report


def _finalize(log: AuditLog, report: FinalReport) -> None:
    """Seal the run: the stable report core goes into the closing marker so the
    report can be reconstructed from the audit log alone."""
    log.append(
        iteration=0,
        candidate_id="engine",
        action="phase_marker",
        payload={"phase": "run_complete", "report_core": _stable_core(report.to_json())},
        rationale=f"phase[run_complete]: success={report.success}",
        config_digest="",
    )
    # the closing marker is not part of the digested core, so patch the head in
    object.__setattr__(report, "audit_head", log.head_hash)
    log.close()


def report_from_log(audit_path: str | Path) -> dict:
    """Reconstruct the stable report core from a sealed audit log."""
    entries = read_entries(audit_path)
    for entry in reversed(entries):
        payload = entry.get("payload")
        if entry.get("action") == "phase_marker" and isinstance(payload, dict) and payload.get("phase") == "run_complete":
            return payload["report_core"]
    raise EngineError("audit log has no run_complete marker")
