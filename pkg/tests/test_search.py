from __future__ import annotations

import pytest

from conftest import make_forecast_task, ar2_values
from tsrefine.audit import read_entries, verify_chain
from tsrefine.errors import EngineError
from tsrefine.executor import DefaultExecutor, RunResult
from tsrefine.gateway import Gateway
from tsrefine.planner import LLMBackend, ScriptedBackend
from tsrefine.search import (
    PhaseConfig,
    report_digest,
    report_from_log,
    run_full,
)


class FakeExecutor:
    """Deterministic loss sequences keyed by model id; 'fail' items error out."""

    def __init__(self, losses_by_model):
        self.queues = {m: list(seq) for m, seq in losses_by_model.items()}

    def run(self, config, task):
        queue = self.queues[config.model_id]
        item = queue.pop(0)
        if item == "fail":
            return RunResult(status="train_error", message="rigged failure", log_excerpt="rigged failure")
        metrics = {c: float(item) for c in task.criteria}
        return RunResult(
            status="success",
            metrics=metrics,
            primary_loss=metrics[task.primary_criterion],
            artifact_digest="rigged",
        )


@pytest.fixture(scope="module")
def task():
    return make_forecast_task(ar2_values(T=240, seed=7), p=4, q=2)


def entries_for(path, action=None, candidate=None, iteration=None):
    out = []
    for e in read_entries(path):
        if action is not None and e["action"] != action:
            continue
        if candidate is not None and e["candidate_id"] != candidate:
            continue
        if iteration is not None and e["iteration"] != iteration:
            continue
        out.append(e)
    return out


# --- phase config ---------------------------------------------------------------


def test_phase_config_validation():
    assert PhaseConfig().t_max == 2 * 3 + 10
    with pytest.raises(EngineError):
        PhaseConfig(k=0)
    with pytest.raises(EngineError):
        PhaseConfig(warmup_iters=0)
    with pytest.raises(EngineError):
        PhaseConfig(opt_iters=0)
    with pytest.raises(EngineError):
        PhaseConfig(debug_retries=-1)


# --- full pipeline with the native executor ------------------------------------------


def test_run_full_native_scripted(banks, task, tmp_path):
    phase = PhaseConfig(k=2, warmup_iters=2, opt_iters=3, seed=0, parallelism=1)
    path = tmp_path / "audit.ndjson"
    report = run_full(task, banks, ScriptedBackend(), DefaultExecutor(banks=banks), phase, path)
    assert report.success
    assert report.failure is None
    assert report.task_id == task.id
    assert report.winning_config["model_id"] in ("gd_linear", "naive_last")
    assert set(report.final_metrics) == {"rmse", "mae"}
    # winner trace: warm start + W warmup + O optimization
    assert len(report.loss_trace) == 1 + 2 + 3
    assert [step["iteration"] for step in report.loss_trace] == [0, 1, 2, 3, 4, 5]

    check = verify_chain(path)
    assert check.ok
    assert check.head_hash == report.audit_head
    assert report.bank_digest == banks.content_digest

    entries = read_entries(path)
    assert entries[0]["action"] == "phase_marker" and entries[0]["payload"]["phase"] == "run_start"
    assert entries[-1]["action"] == "phase_marker" and entries[-1]["payload"]["phase"] == "run_complete"
    assert len(entries_for(path, action="A_model")) == 1

    # every refine iteration of every surviving candidate leaves >= 3 entries
    refine_keys = {
        (e["candidate_id"], e["iteration"])
        for e in entries
        if e["iteration"] >= 1 and e["candidate_id"] not in ("engine", "stage1")
    }
    assert refine_keys
    for cid, t in refine_keys:
        group = entries_for(path, candidate=cid, iteration=t)
        names = [e["action"] for e in group if e["action"] != "phase_marker"]
        assert len(names) >= 3
        assert names.count("A_logging") >= 1


def test_run_full_deterministic_across_runs(banks, task, tmp_path):
    phase = PhaseConfig(k=2, warmup_iters=1, opt_iters=2, seed=3)
    r1 = run_full(task, banks, ScriptedBackend(), DefaultExecutor(banks=banks), phase, tmp_path / "a.ndjson")
    r2 = run_full(task, banks, ScriptedBackend(), DefaultExecutor(banks=banks), phase, tmp_path / "b.ndjson")
    assert r1.success and r2.success
    assert r1.digest == r2.digest
    assert r1.audit_head != ""


def test_report_from_log_roundtrip(banks, task, tmp_path):
    phase = PhaseConfig(k=2, warmup_iters=1, opt_iters=1, parallelism=1)
    path = tmp_path / "audit.ndjson"
    report = run_full(task, banks, ScriptedBackend(), DefaultExecutor(banks=banks), phase, path)
    core = report_from_log(path)
    assert report_digest(core) == report.digest
    assert core["task_id"] == task.id
    assert core["success"] is True


def test_report_from_log_requires_marker(tmp_path):
    path = tmp_path / "empty.ndjson"
    path.write_text("", encoding="utf-8")
    with pytest.raises(EngineError):
        report_from_log(path)


# --- accept and reject mechanics (rigged losses) --------------------------------------


def test_accept_reject_and_revert(banks, task, tmp_path):
    phase = PhaseConfig(k=2, warmup_iters=3, opt_iters=1, debug_retries=0, parallelism=1)
    executor = FakeExecutor(
        {
            "gd_linear": [1.0, 0.9, 0.95, 0.8, 0.85],
            "naive_last": ["fail"],
        }
    )
    path = tmp_path / "audit.ndjson"
    report = run_full(task, banks, ScriptedBackend(), executor, phase, path)
    assert report.success
    assert report.phases["warmup"]["winner"] == "c0:gd_linear"
    failed = [s for s in report.phases["warmup"]["per_candidate"] if s["candidate_id"] == "c1:naive_last"]
    assert failed and failed[0]["failed"] is True

    verdicts = [step["verdict"] for step in report.loss_trace]
    assert verdicts == ["n/a", "accepted", "rejected", "accepted", "rejected"]
    incumbent = [step["incumbent_loss"] for step in report.loss_trace]
    assert incumbent == [1.0, 0.9, 0.9, 0.8, 0.8]
    assert report.final_metrics["rmse"] == 0.8

    # rejected iterations revert: digest after equals the pre-iteration digest
    for entry in entries_for(path, action="A_logging", candidate="c0:gd_linear"):
        payload = entry["payload"]
        if payload.get("event") != "iteration_result":
            continue
        if entry["verdict"] == "rejected":
            assert payload["reverted"] is True
            assert payload["incumbent_digest_after"] == payload["pre_iteration_digest"]
        else:
            assert payload["reverted"] is False
            assert payload["incumbent_digest_after"] == payload["candidate_digest"]
            assert payload["incumbent_digest_after"] != payload["pre_iteration_digest"]

    # accepted incumbent losses decrease strictly
    accepted = [s["candidate_loss"] for s in report.loss_trace if s["verdict"] == "accepted"]
    assert all(b < a for a, b in zip(accepted, accepted[1:]))


def test_warmup_winner_min_loss_and_tie_break(banks, task, tmp_path):
    phase = PhaseConfig(k=2, warmup_iters=1, opt_iters=1, debug_retries=0, parallelism=1)
    executor = FakeExecutor({"gd_linear": [0.5, 0.45], "naive_last": [0.4, 0.38, 0.37]})
    report = run_full(task, banks, ScriptedBackend(), executor, phase, tmp_path / "w.ndjson")
    assert report.phases["warmup"]["winner"] == "c1:naive_last"
    assert report.final_metrics["rmse"] == 0.37

    executor = FakeExecutor({"gd_linear": [0.5, 0.4, 0.39], "naive_last": [0.6, 0.4]})
    report = run_full(task, banks, ScriptedBackend(), executor, phase, tmp_path / "t.ndjson")
    # equal best losses: earlier stage-1 slot wins
    assert report.phases["warmup"]["winner"] == "c0:gd_linear"


def test_winner_carries_best_found_config(banks, task, tmp_path):
    phase = PhaseConfig(k=1, warmup_iters=2, opt_iters=1, debug_retries=0)
    executor = FakeExecutor({"gd_linear": [1.0, 0.6, 0.9, 0.95]})
    path = tmp_path / "audit.ndjson"
    report = run_full(task, banks, ScriptedBackend(), executor, phase, path)
    # iteration 1 accepted at 0.6; everything after is rejected, so the
    # winning config digest equals the incumbent digest logged at iteration 1
    accepted = [e for e in entries_for(path, action="A_logging") if e["verdict"] == "accepted"]
    assert len(accepted) == 1
    markers = [e for e in entries_for(path, action="phase_marker") if e["payload"]["phase"] == "optimization_start"]
    assert markers[0]["config_digest"] == accepted[0]["payload"]["incumbent_digest_after"]
    assert report.final_metrics["rmse"] == 0.6


# --- debug loop ----------------------------------------------------------------------


def test_debug_fix_recovers_and_logs_attempts(banks, task, tmp_path):
    phase = PhaseConfig(k=1, warmup_iters=1, opt_iters=1, debug_retries=2)
    executor = FakeExecutor({"gd_linear": [1.0, "fail", "fail", 0.7, 0.75]})
    path = tmp_path / "audit.ndjson"
    report = run_full(task, banks, ScriptedBackend(), executor, phase, path)
    assert report.success
    assert report.final_metrics["rmse"] == 0.7

    attempts = entries_for(path, action="debug_attempt", candidate="c0:gd_linear", iteration=1)
    assert len(attempts) == 2
    assert [a["payload"]["attempt"] for a in attempts] == [1, 2]
    # each attempt sees the error text of the failure it is repairing
    assert all("rigged failure" in a["payload"]["error"] for a in attempts)
    assert [a["payload"]["result_status"] for a in attempts] == ["train_error", "success"]
    # the scripted repair rule drops all directives
    assert attempts[0]["payload"]["decision"]["directives"] == []

    logging = entries_for(path, action="A_logging", candidate="c0:gd_linear", iteration=1)
    assert logging[-1]["verdict"] == "accepted"


def test_debug_exhausted_rejects_and_reverts(banks, task, tmp_path):
    phase = PhaseConfig(k=1, warmup_iters=1, opt_iters=1, debug_retries=2)
    executor = FakeExecutor({"gd_linear": [1.0, "fail", "fail", "fail", 0.9]})
    path = tmp_path / "audit.ndjson"
    report = run_full(task, banks, ScriptedBackend(), executor, phase, path)
    assert report.success

    attempts = entries_for(path, action="debug_attempt", candidate="c0:gd_linear", iteration=1)
    assert len(attempts) == 2  # never more than debug_retries
    logging = [
        e
        for e in entries_for(path, action="A_logging", candidate="c0:gd_linear", iteration=1)
        if e["payload"].get("event") == "iteration_result"
    ]
    assert logging[0]["verdict"] == "rejected"
    assert logging[0]["payload"]["result"]["status"] == "train_error"
    assert logging[0]["payload"]["incumbent_digest_after"] == logging[0]["payload"]["pre_iteration_digest"]
    # optimization iteration then improves from the untouched incumbent
    assert report.loss_trace[-1]["verdict"] == "accepted"
    assert report.final_metrics["rmse"] == 0.9


def test_debug_disabled_rejects_immediately(banks, task, tmp_path):
    phase = PhaseConfig(k=1, warmup_iters=1, opt_iters=1, debug_retries=0)
    executor = FakeExecutor({"gd_linear": [1.0, "fail", 0.9]})
    path = tmp_path / "audit.ndjson"
    report = run_full(task, banks, ScriptedBackend(), executor, phase, path)
    assert report.success
    assert entries_for(path, action="debug_attempt") == []
    assert report.loss_trace[1]["verdict"] == "rejected"


# --- failure reporting -----------------------------------------------------------------


def test_all_candidates_failed(banks, task, tmp_path):
    phase = PhaseConfig(k=2, warmup_iters=1, opt_iters=1, debug_retries=0, parallelism=1)
    executor = FakeExecutor({"gd_linear": ["fail"], "naive_last": ["fail"]})
    path = tmp_path / "audit.ndjson"
    report = run_full(task, banks, ScriptedBackend(), executor, phase, path)
    assert report.success is False
    assert report.failure["phase"] == "warmup"
    assert "no warm-up candidate" in report.failure["message"]
    # the log is still sealed and reconstructible
    assert verify_chain(path).ok
    core = report_from_log(path)
    assert core["success"] is False
    assert report_digest(core) == report.digest


def test_validate_failure_reported(banks, tmp_path):
    bad = make_forecast_task(ar2_values(T=240, seed=7), p=4, q=2, criteria=("rmse", "no_such_metric"))
    report = run_full(
        bad, banks, ScriptedBackend(), DefaultExecutor(banks=banks), PhaseConfig(), tmp_path / "v.ndjson"
    )
    assert report.success is False
    assert report.failure["phase"] == "validate"
    assert "no_such_metric" in report.failure["message"]


# --- planner fallback -------------------------------------------------------------------


def test_parse_exhausted_falls_back_to_noop(banks, task, tmp_path):
    gw = Gateway(mode="mock", mock_queue=["junk"] * 40)
    planner = LLMBackend(gw)
    phase = PhaseConfig(k=1, warmup_iters=1, opt_iters=1, debug_retries=0)
    path = tmp_path / "audit.ndjson"
    report = run_full(task, banks, planner, DefaultExecutor(banks=banks), phase, path)
    assert report.success  # the run completes; every iteration keeps defaults

    model_entry = entries_for(path, action="A_model")[0]
    assert "parse_exhausted" in model_entry["payload"]["rerank"]

    fallbacks = [
        e
        for e in read_entries(path)
        if e["action"] in ("A_refinement", "A_fine_tune")
        and e["payload"].get("decision") == {"fallback": "no_op"}
    ]
    assert len(fallbacks) == 4  # two stages in each of two iterations
    assert all("parse exhausted" in e["rationale"] for e in fallbacks)
    # unchanged config re-runs are never strict improvements
    verdicts = [s["verdict"] for s in report.loss_trace if s["iteration"] >= 1]
    assert set(verdicts) == {"rejected"}
