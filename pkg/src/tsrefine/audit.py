"""Append-only, hash-chained audit log and per-candidate dynamic memory.

Every engine decision lands here as one NDJSON line whose entry_hash commits to
the previous entry, so any byte-level tampering or deletion is detectable by
recomputing the chain.  Memory objects are lightweight per-candidate views used
to build planner context; the log file is the single shared chronology.
"""

from __future__ import annotations

import json
import threading
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Mapping, Optional

from .canonical import GENESIS_HASH, chain_hash
from .errors import BudgetImpossible, ChainInvalid, IoFailure, LogClosed

ACTIONS = ("A_model", "A_refinement", "A_fine_tune", "A_logging", "debug_attempt", "phase_marker")
VERDICTS = ("accepted", "rejected", "n/a")

_ENTRY_FIELDS = (
    "seq",
    "iteration",
    "candidate_id",
    "action",
    "payload",
    "rationale",
    "config_digest",
    "metrics",
    "verdict",
    "timestamp",
    "prev_hash",
)


@dataclass(frozen=True)
class LogEntry:
    seq: int
    iteration: int
    candidate_id: str
    action: str
    payload: Any
    rationale: str
    config_digest: str
    metrics: Optional[Mapping[str, float]]
    verdict: Optional[str]
    timestamp: str
    prev_hash: str
    entry_hash: str

    def to_json(self) -> dict:
        out = {name: getattr(self, name) for name in _ENTRY_FIELDS}
        if out["metrics"] is not None:
            out["metrics"] = dict(out["metrics"])
        out["entry_hash"] = self.entry_hash
        return out


def _hash_fields(fields: Mapping[str, Any]) -> str:
    return chain_hash(fields["prev_hash"], {k: fields[k] for k in _ENTRY_FIELDS})


class AuditLog:
    """Writer for one run's audit log.  append() is the only mutation and is
    serialized, so concurrent warm-up loops get a total order."""

    def __init__(self, path: str | Path):
        self._path = Path(path)
        try:
            self._fh = open(self._path, "w", encoding="utf-8")
        except OSError as exc:
            raise IoFailure(f"cannot open audit log {self._path}: {exc}") from exc
        self._lock = threading.Lock()
        self._prev_hash = GENESIS_HASH
        self._seq = 0
        self._entries: list[LogEntry] = []
        self._closed = False

    @property
    def path(self) -> Path:
        return self._path

    @property
    def head_hash(self) -> str:
        return self._prev_hash

    @property
    def entries(self) -> tuple[LogEntry, ...]:
        with self._lock:
            return tuple(self._entries)

    def append(
        self,
        iteration: int,
        candidate_id: str,
        action: str,
        payload: Any,
        rationale: str,
        config_digest: str,
        metrics: Optional[Mapping[str, float]] = None,
        verdict: Optional[str] = None,
    ) -> tuple[int, str]:
        if action not in ACTIONS:
            raise ValueError(f"unknown action {action!r}")
        if verdict is not None and verdict not in VERDICTS:
            raise ValueError(f"unknown verdict {verdict!r}")
        with self._lock:
            if self._closed:
                raise LogClosed(f"audit log {self._path} is closed")
            fields = {
                "seq": self._seq,
                "iteration": iteration,
                "candidate_id": candidate_id,
                "action": action,
                "payload": payload,
                "rationale": rationale,
                "config_digest": config_digest,
                "metrics": dict(metrics) if metrics is not None else None,
                "verdict": verdict,
                "timestamp": datetime.now(timezone.utc).isoformat(),
                "prev_hash": self._prev_hash,
            }
            entry_hash = _hash_fields(fields)
            entry = LogEntry(entry_hash=entry_hash, **fields)
            try:
                self._fh.write(json.dumps(entry.to_json(), ensure_ascii=False) + "\n")
                self._fh.flush()
            except OSError as exc:
                raise IoFailure(f"audit append failed: {exc}") from exc
            self._entries.append(entry)
            self._prev_hash = entry_hash
            seq = self._seq
            self._seq += 1
            return seq, entry_hash

    def close(self):
        with self._lock:
            if not self._closed:
                self._fh.close()
                self._closed = True

    def __enter__(self) -> "AuditLog":
        return self

    def __exit__(self, *exc_info):
        self.close()


@dataclass(frozen=True)
class VerifyResult:
    ok: bool
    first_bad_seq: Optional[int]
    n_entries: int
    head_hash: str


def read_entries(path: str | Path) -> list[dict]:
    """Parse an audit log file without verifying it."""
    out = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                out.append(json.loads(line))
    return out


def verify_chain(path: str | Path) -> VerifyResult:
    """Recompute every entry hash and check the seq sequence is gapless.

    Each line must also be the byte-exact serialization append() would have
    written for its parsed content; this catches tampering that alters bytes
    without changing the parsed values (extra keys, whitespace, or float
    digits beyond double precision).  The verdict is the return value;
    verification itself never raises on bad content, only on an unreadable
    file.
    """
    prev = GENESIS_HASH
    n = 0
    try:
        fh = open(path, encoding="utf-8")
    except OSError as exc:
        raise IoFailure(f"cannot read audit log {path}: {exc}") from exc
    with fh:
        for i, line in enumerate(fh):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError:
                return VerifyResult(False, i, n, prev)
            if not isinstance(obj, dict) or any(k not in obj for k in _ENTRY_FIELDS) or "entry_hash" not in obj:
                return VerifyResult(False, i, n, prev)
            rebuilt = {k: obj[k] for k in _ENTRY_FIELDS}
            rebuilt["entry_hash"] = obj["entry_hash"]
            if json.dumps(rebuilt, ensure_ascii=False) != line:
                return VerifyResult(False, i, n, prev)
            if obj["seq"] != i or obj["prev_hash"] != prev:
                return VerifyResult(False, i, n, prev)
            expected = _hash_fields(obj)
            if obj["entry_hash"] != expected:
                return VerifyResult(False, i, n, prev)
            prev = obj["entry_hash"]
            n += 1
    return VerifyResult(True, None, n, prev)


# --- per-candidate memory -----------------------------------------------------


@dataclass(frozen=True)
class MemoryEntry:
    seq: int
    iteration: int
    action: str
    verdict: Optional[str]
    primary_loss: Optional[float]
    rationale: str
    config_digest: str


@dataclass
class Memory:
    """Append-only view of one candidate loop's history.

    entries reference audit-log seq numbers; script_states is the ordered
    sequence of config digests this loop has visited; best_so_far tracks the
    minimum successful primary loss.
    """

    candidate_id: str
    entries: list[MemoryEntry] = field(default_factory=list)
    script_states: list[str] = field(default_factory=list)
    best_so_far: Optional[tuple[str, float]] = None

    def note(self, entry: MemoryEntry):
        self.entries.append(entry)

    def push_state(self, config_digest: str):
        self.script_states.append(config_digest)

    def update_best(self, config_digest: str, primary_loss: float):
        if self.best_so_far is None or primary_loss < self.best_so_far[1]:
            self.best_so_far = (config_digest, primary_loss)


def _best_block(memory: Memory) -> str:
    if memory.best_so_far is None:
        return "best_so_far: none yet"
    digest, loss = memory.best_so_far
    return f"best_so_far: loss={loss:.6g} config={digest[:12]}"


def _render_entry(e: MemoryEntry) -> str:
    loss = "n/a" if e.primary_loss is None else f"{e.primary_loss:.6g}"
    verdict = e.verdict or "n/a"
    rationale = e.rationale.splitlines()[0] if e.rationale else ""
    return f"[t={e.iteration}] {e.action} verdict={verdict} loss={loss} :: {rationale}"


def digest_for_context(memory: Memory, char_budget: int) -> str:
    """Render memory for planner context: best-so-far block, then the most
    recent entries newest-first until the budget runs out (oldest dropped)."""
    best = _best_block(memory)
    if len(best) > char_budget:
        raise BudgetImpossible(
            f"char_budget {char_budget} below mandatory best-so-far block ({len(best)} chars)"
        )
    lines = [best]
    total = len(best)
    for entry in reversed(memory.entries):
        rendered = _render_entry(entry)
        if total + 1 + len(rendered) > char_budget:
            break
        lines.append(rendered)
        total += 1 + len(rendered)
    return "\n".join(lines)


# --- report export --------------------------------------------------------------


def export_report(path: str | Path, format: str = "markdown") -> str:
    """Render a verified audit log as a human-readable chronology."""
    if format not in ("markdown", "json"):
        raise ValueError(f"unknown report format {format!r}")
    result = verify_chain(path)
    if not result.ok:
        raise ChainInvalid(result.first_bad_seq if result.first_bad_seq is not None else -1)
    entries = read_entries(path)
    accepted = [
        e
        for e in entries
        if e["verdict"] == "accepted" and e["action"] == "A_logging"
    ]
    if format == "json":
        doc = {
            "head_hash": result.head_hash,
            "n_entries": result.n_entries,
            "entries": entries,
            "accepted_incumbents": [
                {
                    "seq": e["seq"],
                    "iteration": e["iteration"],
                    "candidate_id": e["candidate_id"],
                    "config_digest": e["config_digest"],
                    "metrics": e["metrics"],
                }
                for e in accepted
            ],
        }
        return json.dumps(doc, indent=2, sort_keys=True, ensure_ascii=False) + "\n"

    by_iter: dict[tuple[int, str], list[dict]] = {}
    for e in entries:
        by_iter.setdefault((e["iteration"], e["candidate_id"]), []).append(e)
    lines = ["# Run audit report", "", f"chain head: {result.head_hash}", f"entries: {result.n_entries}", ""]
    for (iteration, candidate_id), group in sorted(by_iter.items(), key=lambda kv: kv[1][0]["seq"]):
        lines.append(f"## iteration {iteration} ({candidate_id})")
        for e in group:
            verdict = e["verdict"] or "n/a"
            lines.append(f"- seq {e['seq']} {e['action']} verdict={verdict} config={e['config_digest'][:12]}")
            if e["rationale"]:
                first = e["rationale"].splitlines()[0]
                lines.append(f"  rationale: {first}")
            if e["metrics"]:
                rendered = ", ".join(f"{k}={v:.6g}" for k, v in sorted(e["metrics"].items()))
                lines.append(f"  metrics: {rendered}")
        lines.append("")
    lines.append("## accepted incumbents")
    if accepted:
        lines.append("| seq | iteration | candidate | config | metrics |")
        lines.append("|---|---|---|---|---|")
        for e in accepted:
            rendered = (
                ", ".join(f"{k}={v:.6g}" for k, v in sorted(e["metrics"].items())) if e["metrics"] else ""
            )
            lines.append(
                f"| {e['seq']} | {e['iteration']} | {e['candidate_id']} | {e['config_digest'][:12]} | {rendered} |"
            )
    else:
        lines.append("(none)")
    lines.append("")
    return "\n".join(lines)
