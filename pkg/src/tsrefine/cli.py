"""Command-line surface: run, retrieve, eval, audit verify/report, replay,
banks validate.

Configuration precedence is defaults, then config file, then TSREFINE_*
environment variables, then flags.  Unknown config keys are rejected.  Exit
codes: 0 success, 1 configuration or usage error, 2 reported run failure,
3 audit verification failure.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path
from typing import Any, Mapping, Optional

import numpy as np
import yaml

from .audit import export_report, verify_chain
from .banks import load_banks
from .errors import ChainInvalid, ConfigError, EngineError
from .executor import DefaultExecutor
from .gateway import Gateway
from .metrics import FORECAST_METRICS, GENERATION_METRICS, compute_forecast_metric, compute_generation_metric
from .planner import LLMBackend, ScriptedBackend, SeededRandomBackend
from .retrieval import DEFAULT_K_CASES, index_cases, retrieve_and_vote
from .search import PhaseConfig, run_full
from .tasks import load_frame, load_task, make_segments

ENV_PREFIX = "TSREFINE_"

_INT_KEYS = {"seed", "k", "warmup", "opt", "debug_retries", "parallel", "context_budget", "k_cases"}
_STR_KEYS = {"task", "banks", "out", "planner", "transcript"}
_ALL_KEYS = _INT_KEYS | _STR_KEYS

DEFAULTS: dict[str, Any] = {
    "task": None,
    "banks": None,
    "out": None,
    "planner": "scripted",
    "seed": 0,
    "k": 2,
    "warmup": 3,
    "opt": 10,
    "debug_retries": 2,
    "parallel": None,
    "transcript": None,
    "context_budget": 16000,
    "k_cases": DEFAULT_K_CASES,
}

PLANNERS = ("scripted", "random", "llm", "replay")


def _check_plain(value: Any, where: str) -> None:
    if value is None or isinstance(value, (str, int, float, bool)):
        return
    if isinstance(value, list):
        for i, v in enumerate(value):
            _check_plain(v, f"{where}[{i}]")
        return
    if isinstance(value, dict):
        for k, v in value.items():
            if not isinstance(k, str):
                raise ConfigError(f"non-string key at {where}")
            _check_plain(v, f"{where}.{k}")
        return
    raise ConfigError(f"unsupported YAML value type {type(value).__name__} at {where}")


def load_config_file(path: str | Path) -> dict:
    """Strict YAML subset: scalars, maps, lists; anchors and aliases rejected."""
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc}") from exc
    try:
        for event in yaml.parse(text):
            if isinstance(event, yaml.events.AliasEvent) or getattr(event, "anchor", None):
                raise ConfigError("YAML anchors and aliases are not supported")
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"malformed config file {path}: {exc}") from exc
    if data is None:
        return {}
    if not isinstance(data, dict):
        raise ConfigError("config file must contain a mapping at the top level")
    _check_plain(data, "config")
    for key in data:
        if key not in _ALL_KEYS:
            raise ConfigError(f"unknown config key {key!r}")
    return data


def _coerce(key: str, value: Any) -> Any:
    if value is None:
        return None
    if key in _INT_KEYS:
        if isinstance(value, bool) or (not isinstance(value, int) and not isinstance(value, str)):
            raise ConfigError(f"config key {key!r} must be an integer, got {value!r}")
        try:
            return int(value)
        except ValueError as exc:
            raise ConfigError(f"config key {key!r} must be an integer, got {value!r}") from exc
    if not isinstance(value, str):
        raise ConfigError(f"config key {key!r} must be a string, got {value!r}")
    return value


def merge_config(args: argparse.Namespace) -> dict:
    """defaults <- config file <- environment <- flags."""
    merged = dict(DEFAULTS)
    config_path = getattr(args, "config", None)
    if config_path:
        for key, value in load_config_file(config_path).items():
            merged[key] = _coerce(key, value)
    for key in _ALL_KEYS:
        env = os.environ.get(ENV_PREFIX + key.upper())
        if env is not None:
            merged[key] = _coerce(key, env)
    for key in _ALL_KEYS:
        flag = getattr(args, key, None)
        if flag is not None:
            merged[key] = _coerce(key, flag)
    if merged["planner"] not in PLANNERS:
        raise ConfigError(f"unknown planner {merged['planner']!r}; choose from {', '.join(PLANNERS)}")
    return merged


def _build_planner(cfg: Mapping[str, Any]):
    name = cfg["planner"]
    if name == "scripted":
        return ScriptedBackend()
    if name == "random":
        return SeededRandomBackend(int(cfg["seed"]))
    if name == "llm":
        mode = "record" if cfg["transcript"] else "live"
        gateway = Gateway(mode=mode, transcript_path=cfg["transcript"])
        return LLMBackend(gateway)
    if not cfg["transcript"]:
        raise ConfigError("replay planner requires --transcript")
    gateway = Gateway(mode="replay", transcript_path=cfg["transcript"])
    return LLMBackend(gateway)


def _cmd_run(args: argparse.Namespace) -> int:
    cfg = merge_config(args)
    for required in ("task", "banks", "out"):
        if not cfg[required]:
            raise ConfigError(f"missing required option --{required}")
    banks = load_banks(cfg["banks"])
    task = load_task(cfg["task"])
    planner = _build_planner(cfg)
    executor = DefaultExecutor(banks)
    phase = PhaseConfig(
        k=cfg["k"],
        warmup_iters=cfg["warmup"],
        opt_iters=cfg["opt"],
        debug_retries=cfg["debug_retries"],
        seed=cfg["seed"],
        parallelism=cfg["parallel"],
        context_budget=cfg["context_budget"],
        k_cases=cfg["k_cases"],
    )
    out_dir = Path(cfg["out"])
    out_dir.mkdir(parents=True, exist_ok=True)
    report = run_full(task, banks, planner, executor, phase, out_dir / "audit.log")
    report_json = report.to_json()
    (out_dir / "report.json").write_text(
        json.dumps(report_json, indent=2, sort_keys=True, ensure_ascii=False) + "\n", encoding="utf-8"
    )
    if report.winning_config is not None:
        (out_dir / "winner.config.json").write_text(
            json.dumps(report.winning_config, indent=2, sort_keys=True) + "\n", encoding="utf-8"
        )
    summary = {
        "success": report.success,
        "report_digest": report.digest,
        "final_loss": (
            report_json["final_metrics"].get(task.primary_criterion) if report_json["final_metrics"] else None
        ),
        "out": str(out_dir),
    }
    if report.failure:
        summary["failure"] = dict(report.failure)
    print(json.dumps(summary, sort_keys=True))
    return 0 if report.success else 2


def _cmd_retrieve(args: argparse.Namespace) -> int:
    banks = load_banks(args.banks)
    task = load_task(args.task)
    index = index_cases(banks, task.kind)
    result = retrieve_and_vote(index, banks, task.description, args.k_cases, args.k)
    print(json.dumps(result.to_json(), indent=2, sort_keys=True))
    return 0


def _cmd_eval(args: argparse.Namespace) -> int:
    pred = load_frame(args.pred, args.format)
    truth = load_frame(args.truth, args.format)
    metric = args.metric
    if metric in FORECAST_METRICS:
        value = compute_forecast_metric(metric, pred.values[None, :, :], truth.values[None, :, :]).value
    elif metric in GENERATION_METRICS:
        if not args.window:
            raise ConfigError(f"generation metric {metric!r} requires --window")
        real = np.stack(make_segments(truth, args.window))
        fake = np.stack(make_segments(pred, args.window))
        value = compute_generation_metric(metric, real, fake).value
    else:
        raise ConfigError(f"unknown metric {metric!r}")
    print(json.dumps({"metric": metric, "value": value}))
    return 0


def _cmd_audit_verify(args: argparse.Namespace) -> int:
    result = verify_chain(args.file)
    if result.ok:
        print(json.dumps({"ok": True, "entries": result.n_entries, "head": result.head_hash}))
        return 0
    print(json.dumps({"ok": False, "first_bad_seq": result.first_bad_seq}))
    return 3


def _cmd_audit_report(args: argparse.Namespace) -> int:
    fmt = "markdown" if args.format == "md" else "json"
    try:
        sys.stdout.write(export_report(args.file, fmt))
    except ChainInvalid as exc:
        print(f"audit chain invalid at seq {exc.first_bad_seq}", file=sys.stderr)
        return 3
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="tsrefine", description="Agentic time-series model refinement engine")
    sub = parser.add_subparsers(dest="command", required=True)

    def add_run_flags(p: argparse.ArgumentParser):
        p.add_argument("--task", help="task spec JSON file")
        p.add_argument("--banks", help="bank root directory")
        p.add_argument("--out", help="output directory for report/audit artifacts")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--k", type=int, default=None, help="candidate shortlist size")
        p.add_argument("--warmup", type=int, default=None, help="warm-up iterations per candidate")
        p.add_argument("--opt", type=int, default=None, help="optimization iterations")
        p.add_argument("--debug-retries", dest="debug_retries", type=int, default=None)
        p.add_argument("--parallel", type=int, default=None, help="warm-up parallelism (default: k)")
        p.add_argument("--config", help="YAML config file")
        p.add_argument("--transcript", help="LLM transcript file (record/replay)")
        p.add_argument("--context-budget", dest="context_budget", type=int, default=None)
        p.add_argument("--k-cases", dest="k_cases", type=int, default=None)

    run_p = sub.add_parser("run", help="run the full two-stage search on a task")
    add_run_flags(run_p)
    run_p.add_argument("--planner", choices=PLANNERS, default=None)
    run_p.set_defaults(fn=_cmd_run)

    replay_p = sub.add_parser("replay", help="re-run a recorded LLM search deterministically")
    add_run_flags(replay_p)
    replay_p.set_defaults(fn=_cmd_run, planner="replay")

    ret_p = sub.add_parser("retrieve", help="inspect stage-1 case retrieval for a task")
    ret_p.add_argument("--task", required=True)
    ret_p.add_argument("--banks", required=True)
    ret_p.add_argument("--k", type=int, default=2)
    ret_p.add_argument("--k-cases", dest="k_cases", type=int, default=DEFAULT_K_CASES)
    ret_p.set_defaults(fn=_cmd_retrieve)

    eval_p = sub.add_parser("eval", help="score a prediction frame against a truth frame")
    eval_p.add_argument("--metric", required=True)
    eval_p.add_argument("--pred", required=True)
    eval_p.add_argument("--truth", required=True)
    eval_p.add_argument("--format", choices=("csv-wide", "json-frame"), default="json-frame")
    eval_p.add_argument("--window", type=int, default=None, help="window length for generation scores")
    eval_p.set_defaults(fn=_cmd_eval)

    audit_p = sub.add_parser("audit", help="verify or export an audit log")
    audit_sub = audit_p.add_subparsers(dest="audit_command", required=True)
    verify_p = audit_sub.add_parser("verify", help="recompute the hash chain")
    verify_p.add_argument("file")
    verify_p.set_defaults(fn=_cmd_audit_verify)
    report_p = audit_sub.add_parser("report", help="render a chronology from a verified log")
    report_p.add_argument("file")
    report_p.add_argument("--format", choices=("md", "json"), default="md")
    report_p.set_defaults(fn=_cmd_audit_report)

    banks_p = sub.add_parser("banks", help="bank utilities")
    banks_sub = banks_p.add_subparsers(dest="banks_command", required=True)
    validate_p = banks_sub.add_parser("validate", help="load and validate a bank directory")
    validate_p.add_argument("root")
    validate_p.set_defaults(fn=_cmd_banks_validate)

    return parser


def _cmd_banks_validate(args: argparse.Namespace) -> int:
    banks = load_banks(args.root)
    print(
        json.dumps(
            {
                "content_digest": banks.content_digest,
                "counts": {
                    "cases": len(banks.cases),
                    "refinements": len(banks.refinements),
                    "models": len(banks.models),
                    "metrics": len(banks.metrics),
                },
            },
            sort_keys=True,
        )
    )
    return 0


def main(argv: Optional[list[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        # argparse exits 2 on usage errors; remap to the documented code
        return 0 if exc.code in (0, None) else 1
    try:
        return args.fn(args)
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return 1
    except EngineError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
