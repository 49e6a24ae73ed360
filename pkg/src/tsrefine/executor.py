"""Candidate execution: native model kinds and the external subprocess protocol.

run_native is fully deterministic given (config, task): a seeded generator
drives every random draw, and directives translate to concrete training
settings before any computation.  Failures never escape as exceptions; they
come back encoded in RunResult.status.
"""

from __future__ import annotations

import json
import shlex
import subprocess
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Mapping, Optional

import numpy as np

from .banks import BankSet, ModelDescriptor
from .canonical import digest_of
from .directives import Directive, resolve_directives
from .errors import EngineError
from .metrics import RiskParams, compute_forecast_metric, compute_generation_metric
from .tasks import TaskSpec, frame_to_json, make_segments, make_windows

NATIVE_MODEL_KINDS = ("naive_last", "gd_linear", "exp_smoothing", "gaussian_gen", "block_bootstrap_gen")

SUPPORTED_DIRECTIVES: dict[str, frozenset[str]] = {
    "naive_last": frozenset({"normalize_zscore", "normalize_minmax"}),
    "gd_linear": frozenset(
        {
            "normalize_zscore",
            "normalize_minmax",
            "early_stopping",
            "lr_schedule_plateau",
            "weight_decay",
            "gradient_clip",
            "augment_jitter",
        }
    ),
    "exp_smoothing": frozenset({"normalize_zscore", "normalize_minmax"}),
    "gaussian_gen": frozenset({"normalize_zscore", "normalize_minmax", "cov_shrinkage"}),
    "block_bootstrap_gen": frozenset({"normalize_zscore", "normalize_minmax"}),
}

NATIVE_TIMEOUT_MS = 120_000
EXTERNAL_TIMEOUT_MS = 600_000
STDERR_TAIL_BYTES = 8192


@dataclass(frozen=True)
class CandidateConfig:
    model_id: str
    hyperparams: Mapping[str, Any]
    directives: tuple[Directive, ...] = ()
    freeform_patch: Optional[str] = None
    seed: int = 0

    def to_json(self) -> dict:
        out: dict[str, Any] = {
            "model_id": self.model_id,
            "hyperparams": dict(self.hyperparams),
            "directives": [d.to_json() for d in self.directives],
            "seed": self.seed,
        }
        if self.freeform_patch is not None:
            out["freeform_patch"] = self.freeform_patch
        return out

    @property
    def digest(self) -> str:
        return digest_of(self.to_json())


@dataclass(frozen=True)
class RunResult:
    status: str  # success | train_error | timeout | invalid_output
    metrics: Optional[Mapping[str, float]] = None
    primary_loss: Optional[float] = None
    message: str = ""
    log_excerpt: str = ""
    duration_ms: int = 0
    stdout_tail: str = ""
    stderr_tail: str = ""
    artifact_digest: str = ""
    warnings: tuple[str, ...] = ()

    @property
    def ok(self) -> bool:
        return self.status == "success"

    def to_json(self) -> dict:
        return {
            "status": self.status,
            "metrics": dict(self.metrics) if self.metrics is not None else None,
            "primary_loss": self.primary_loss,
            "message": self.message,
            "log_excerpt": self.log_excerpt,
            "duration_ms": self.duration_ms,
            "stdout_tail": self.stdout_tail,
            "stderr_tail": self.stderr_tail,
            "artifact_digest": self.artifact_digest,
            "warnings": list(self.warnings),
        }


@dataclass(frozen=True)
class EffectiveSettings:
    normalize: Optional[str] = None  # "zscore" | "minmax"
    early_stopping_patience: Optional[int] = None
    plateau: Optional[tuple[float, int]] = None  # (factor, patience)
    weight_decay: float = 0.0
    clip_max_norm: Optional[float] = None
    jitter_sigma: float = 0.0
    cov_shrinkage: float = 0.0


def apply_directives(config: CandidateConfig, model_kind: str) -> tuple[EffectiveSettings, tuple[str, ...]]:
    """Translate validated directives into training settings for one model.

    Unsupported directives warn and vanish; the later of two normalizations
    wins.  Never raises.
    """
    supported = SUPPORTED_DIRECTIVES.get(model_kind, frozenset())
    effective, warnings = resolve_directives(config.directives, sorted(supported))
    settings = EffectiveSettings()
    for d in effective:
        if d.name == "normalize_zscore":
            settings = replace(settings, normalize="zscore")
        elif d.name == "normalize_minmax":
            settings = replace(settings, normalize="minmax")
        elif d.name == "early_stopping":
            settings = replace(settings, early_stopping_patience=int(d.params["patience"]))
        elif d.name == "lr_schedule_plateau":
            settings = replace(settings, plateau=(float(d.params["factor"]), int(d.params["patience"])))
        elif d.name == "weight_decay":
            settings = replace(settings, weight_decay=float(d.params["lambda"]))
        elif d.name == "gradient_clip":
            settings = replace(settings, clip_max_norm=float(d.params["max_norm"]))
        elif d.name == "augment_jitter":
            settings = replace(settings, jitter_sigma=float(d.params["sigma"]))
        elif d.name == "cov_shrinkage":
            settings = replace(settings, cov_shrinkage=float(d.params["lambda"]))
    return settings, warnings


class _Scaler:
    """Per-feature affine transform fitted on training rows only."""

    def __init__(self, kind: Optional[str], train_rows: np.ndarray):
        self.kind = kind
        if kind == "zscore":
            self.shift = train_rows.mean(axis=0)
            scale = train_rows.std(axis=0)
        elif kind == "minmax":
            self.shift = train_rows.min(axis=0)
            scale = train_rows.max(axis=0) - self.shift
        else:
            self.shift = np.zeros(train_rows.shape[1])
            scale = np.ones(train_rows.shape[1])
        # degenerate features keep their offset but divide by 1
        self.scale = np.where(scale == 0, 1.0, scale)

    def transform(self, arr: np.ndarray) -> np.ndarray:
        return (arr - self.shift) / self.scale

    def inverse(self, arr: np.ndarray) -> np.ndarray:
        return arr * self.scale + self.shift


class _Deadline:
    def __init__(self, timeout_ms: int):
        self.expires = time.monotonic() + timeout_ms / 1000.0

    def exceeded(self) -> bool:
        return time.monotonic() > self.expires


class _TimeoutSignal(Exception):
    pass


@np.errstate(over="ignore", invalid="ignore")  # divergence is detected via the finite check
def _gd_fit(
    a: np.ndarray,
    y: np.ndarray,
    lr: float,
    epochs: int,
    settings: EffectiveSettings,
    rng: np.random.Generator,
    val: Optional[tuple[np.ndarray, np.ndarray]],
    deadline: Optional[_Deadline] = None,
) -> tuple[np.ndarray, list[float], list[float]]:
    """Full-batch gradient descent on ||aW - y||^2 / N with optional decay,
    clipping, plateau schedule, and early stopping on the validation split.

    Returns (weights, per-epoch train losses, per-epoch val losses).  Raises
    _TimeoutSignal on deadline and EngineError on divergence to non-finite loss.
    """
    n, n_in = a.shape
    w = rng.normal(0.0, 0.01, size=(n_in, y.shape[1]))
    nonbias = np.ones((n_in, 1))
    nonbias[-1, 0] = 0.0  # bias column is not decayed
    train_losses: list[float] = []
    val_losses: list[float] = []
    best_val = np.inf
    best_w = w.copy()
    since_improve = 0
    since_plateau = 0
    cur_lr = lr
    for epoch in range(epochs):
        if deadline is not None and deadline.exceeded():
            raise _TimeoutSignal()
        err = a @ w - y
        loss = float(np.mean(err**2))
        if not np.isfinite(loss):
            raise EngineError(f"training loss diverged to non-finite at epoch {epoch}")
        train_losses.append(loss)
        if val is not None:
            va, vy = val
            vloss = float(np.mean((va @ w - vy) ** 2))
            val_losses.append(vloss)
            if vloss < best_val - 1e-15:
                best_val = vloss
                best_w = w.copy()
                since_improve = 0
                since_plateau = 0
            else:
                since_improve += 1
                since_plateau += 1
            if settings.plateau is not None:
                factor, patience = settings.plateau
                if since_plateau >= patience:
                    cur_lr *= factor
                    since_plateau = 0
            if settings.early_stopping_patience is not None and since_improve >= settings.early_stopping_patience:
                return best_w, train_losses, val_losses
        grad = (2.0 / n) * (a.T @ err) + 2.0 * settings.weight_decay * (w * nonbias)
        if settings.clip_max_norm is not None:
            gnorm = float(np.linalg.norm(grad))
            if gnorm > settings.clip_max_norm:
                grad = grad * (settings.clip_max_norm / gnorm)
        w = w - cur_lr * grad
    if val is not None and settings.early_stopping_patience is not None:
        return best_w, train_losses, val_losses
    return w, train_losses, val_losses


def _forecast_predictions(
    kind: str,
    config: CandidateConfig,
    task: TaskSpec,
    settings: EffectiveSettings,
    deadline: _Deadline,
) -> np.ndarray:
    """Predictions for all test windows, already back in original scale."""
    ds = task.dataset
    win = ds.window
    scaler = _Scaler(settings.normalize, ds.train.values)
    train_pairs = make_windows(ds.train, win)
    test_pairs = make_windows(ds.test, win)
    x_tr = np.stack([scaler.transform(x) for x, _ in train_pairs])
    y_tr = np.stack([scaler.transform(y) for _, y in train_pairs])
    x_te = np.stack([scaler.transform(x) for x, _ in test_pairs])
    rng = np.random.default_rng(config.seed)
    hp = config.hyperparams

    if kind == "naive_last":
        preds = np.repeat(x_te[:, -1:, :], win.q, axis=1)
    elif kind == "exp_smoothing":
        alpha = float(hp["alpha"])
        s = x_te[:, 0, :].copy()
        for t in range(1, win.p):
            s = alpha * x_te[:, t, :] + (1.0 - alpha) * s
        preds = np.repeat(s[:, None, :], win.q, axis=1)
    elif kind == "gd_linear":
        if settings.jitter_sigma > 0:
            x_tr = x_tr + rng.normal(0.0, settings.jitter_sigma, size=x_tr.shape)
        n = x_tr.shape[0]
        a = np.concatenate([x_tr.reshape(n, -1), np.ones((n, 1))], axis=1)
        y = y_tr.reshape(n, -1)
        val = None
        needs_val = settings.early_stopping_patience is not None or settings.plateau is not None
        if needs_val:
            n_val = max(1, int(round(float(hp["val_fraction"]) * n)))
            if n - n_val >= 1:
                # chronological: windows are emitted oldest-first
                val = (a[n - n_val :], y[n - n_val :])
                a, y = a[: n - n_val], y[: n - n_val]
        w, _, _ = _gd_fit(
            a,
            y,
            lr=float(hp["lr"]),
            epochs=int(hp["epochs"]),
            settings=settings,
            rng=rng,
            val=val,
            deadline=deadline,
        )
        m = x_te.shape[0]
        a_te = np.concatenate([x_te.reshape(m, -1), np.ones((m, 1))], axis=1)
        preds = (a_te @ w).reshape(m, win.q, ds.test.n_features)
    else:
        raise EngineError(f"model kind {kind!r} is not a forecaster")
    return np.stack([scaler.inverse(p) for p in preds])


def _generation_samples(
    kind: str,
    config: CandidateConfig,
    task: TaskSpec,
    settings: EffectiveSettings,
    n_samples: int,
) -> np.ndarray:
    """n_samples synthetic windows of shape (q, d), in original scale."""
    ds = task.dataset
    q = ds.window.q
    d = ds.train.n_features
    scaler = _Scaler(settings.normalize, ds.train.values)
    rng = np.random.default_rng(config.seed)
    hp = config.hyperparams

    if kind == "gaussian_gen":
        segs = make_segments(ds.train, q, ds.window.stride)
        if len(segs) < 2:
            raise EngineError("gaussian_gen needs at least 2 training windows")
        flat = np.stack([scaler.transform(s) for s in segs]).reshape(len(segs), q * d)
        mu = flat.mean(axis=0)
        cov = np.atleast_2d(np.cov(flat, rowvar=False, ddof=1))
        lam = settings.cov_shrinkage
        if lam > 0:
            cov = (1.0 - lam) * cov + lam * np.diag(np.diag(cov))
        evals, evecs = np.linalg.eigh(cov)
        factor = evecs @ np.diag(np.sqrt(np.clip(evals, 0.0, None)))
        z = rng.standard_normal((n_samples, q * d))
        samples = (mu + z @ factor.T).reshape(n_samples, q, d)
    elif kind == "block_bootstrap_gen":
        block_len = int(hp["block_len"])
        rows = scaler.transform(ds.train.values)
        t = rows.shape[0]
        if block_len > t:
            raise EngineError(f"block_len {block_len} exceeds training length {t}")
        out = np.empty((n_samples, q, d))
        for i in range(n_samples):
            filled = 0
            while filled < q:
                start = int(rng.integers(0, t - block_len + 1))
                take = min(block_len, q - filled)
                out[i, filled : filled + take] = rows[start : start + take]
                filled += take
        samples = out
    else:
        raise EngineError(f"model kind {kind!r} is not a generator")
    return np.stack([scaler.inverse(s) for s in samples])


def run_native(
    config: CandidateConfig,
    task: TaskSpec,
    model: ModelDescriptor,
    timeout_ms: int = NATIVE_TIMEOUT_MS,
    risk: RiskParams = RiskParams(),
) -> RunResult:
    """Execute a natively bound candidate; all failures return in status."""
    started = time.monotonic()

    def elapsed() -> int:
        return int((time.monotonic() - started) * 1000)

    kind = model.binding.ref
    settings, warnings = apply_directives(config, kind)
    deadline = _Deadline(timeout_ms)
    try:
        if task.kind == "forecasting":
            preds = _forecast_predictions(kind, config, task, settings, deadline)
            truth = np.stack([y for _, y in make_windows(task.dataset.test, task.dataset.window)])
            if not np.all(np.isfinite(preds)):
                return RunResult(
                    status="invalid_output",
                    message="non-finite values in predictions",
                    duration_ms=elapsed(),
                    warnings=warnings,
                )
            metrics = {c: compute_forecast_metric(c, preds, truth, risk).value for c in task.criteria}
            artifact = preds
        else:
            real = make_segments(task.dataset.test, task.dataset.window.q, task.dataset.window.stride)
            samples = _generation_samples(kind, config, task, settings, n_samples=len(real))
            if not np.all(np.isfinite(samples)):
                return RunResult(
                    status="invalid_output",
                    message="non-finite values in samples",
                    duration_ms=elapsed(),
                    warnings=warnings,
                )
            real_arr = np.stack(real)
            metrics = {
                c: compute_generation_metric(c, real_arr, samples, risk).value for c in task.criteria
            }
            artifact = samples
    except _TimeoutSignal:
        return RunResult(
            status="timeout",
            message=f"native run exceeded {timeout_ms} ms",
            duration_ms=elapsed(),
            warnings=warnings,
        )
    except EngineError as exc:
        return RunResult(
            status="train_error",
            message=str(exc),
            log_excerpt=str(exc),
            duration_ms=elapsed(),
            warnings=warnings,
        )
    return RunResult(
        status="success",
        metrics=metrics,
        primary_loss=metrics[task.primary_criterion],
        duration_ms=elapsed(),
        artifact_digest=digest_of(artifact.tolist()),
        warnings=warnings,
    )


# --- external subprocess protocol ---------------------------------------------


def build_exec_request(
    config: CandidateConfig, task: TaskSpec, return_predictions: bool = False
) -> dict:
    req = {
        "v": 1,
        "task": {
            "kind": task.kind,
            "window": {"p": task.dataset.window.p, "q": task.dataset.window.q},
            "criteria": list(task.criteria),
            "primary_criterion": task.primary_criterion,
        },
        "data": {
            "train": frame_to_json(task.dataset.train),
            "test": frame_to_json(task.dataset.test),
        },
        "config": {
            "model_id": config.model_id,
            "hyperparams": dict(config.hyperparams),
            "directives": [d.to_json() for d in config.directives],
            "seed": config.seed,
        },
    }
    if config.freeform_patch is not None:
        req["config"]["freeform_patch"] = config.freeform_patch
    if return_predictions:
        req["return_predictions"] = True
    return req


def _tail(text: str, limit: int = STDERR_TAIL_BYTES) -> str:
    data = text.encode("utf-8", errors="replace")
    if len(data) <= limit:
        return text
    return data[-limit:].decode("utf-8", errors="replace")


def _score_predictions_file(path: str, task: TaskSpec, risk: RiskParams) -> dict[str, float]:
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    preds = np.asarray(doc["windows"], dtype=np.float64)
    if task.kind == "forecasting":
        truth = np.stack([y for _, y in make_windows(task.dataset.test, task.dataset.window)])
        return {c: compute_forecast_metric(c, preds, truth, risk).value for c in task.criteria}
    real = np.stack(make_segments(task.dataset.test, task.dataset.window.q, task.dataset.window.stride))
    return {c: compute_generation_metric(c, real, preds, risk).value for c in task.criteria}


def run_external(
    config: CandidateConfig,
    task: TaskSpec,
    script_ref: str,
    timeout_ms: int = EXTERNAL_TIMEOUT_MS,
    return_predictions: bool = False,
    risk: RiskParams = RiskParams(),
) -> RunResult:
    """One ExecRequest in on stdin, one ExecResponse out on stdout."""
    started = time.monotonic()

    def elapsed() -> int:
        return int((time.monotonic() - started) * 1000)

    request = build_exec_request(config, task, return_predictions)
    doc = json.dumps(request, ensure_ascii=False)
    try:
        proc = subprocess.run(
            shlex.split(script_ref),
            input=doc,
            capture_output=True,
            timeout=timeout_ms / 1000.0,
            encoding="utf-8",
            errors="replace",
        )
    except subprocess.TimeoutExpired as exc:
        stderr = exc.stderr if isinstance(exc.stderr, str) else ""
        return RunResult(
            status="timeout",
            message=f"external executor exceeded {timeout_ms} ms",
            stderr_tail=_tail(stderr or ""),
            duration_ms=elapsed(),
        )
    except OSError as exc:
        return RunResult(
            status="train_error",
            message=f"spawn failure: {exc}",
            duration_ms=elapsed(),
        )

    stdout_tail = _tail(proc.stdout or "")
    stderr_tail = _tail(proc.stderr or "")
    if proc.returncode != 0:
        return RunResult(
            status="train_error",
            message=f"external executor exited {proc.returncode}",
            log_excerpt=stderr_tail,
            stdout_tail=stdout_tail,
            stderr_tail=stderr_tail,
            duration_ms=elapsed(),
        )
    try:
        response = json.loads(proc.stdout)
    except (ValueError, TypeError):
        return RunResult(
            status="train_error",
            message="malformed ExecResponse document",
            log_excerpt=stderr_tail,
            stdout_tail=stdout_tail,
            stderr_tail=stderr_tail,
            duration_ms=elapsed(),
        )
    if not isinstance(response, dict) or response.get("v") != 1 or response.get("status") not in (
        "success",
        "error",
    ):
        return RunResult(
            status="train_error",
            message="ExecResponse failed schema validation",
            log_excerpt=stderr_tail,
            stdout_tail=stdout_tail,
            stderr_tail=stderr_tail,
            duration_ms=elapsed(),
        )
    if response["status"] == "error":
        return RunResult(
            status="train_error",
            message=str(response.get("message", "external executor reported an error")),
            log_excerpt=stderr_tail,
            stdout_tail=stdout_tail,
            stderr_tail=stderr_tail,
            duration_ms=elapsed(),
        )

    if return_predictions and "predictions_path" in response:
        try:
            metrics = _score_predictions_file(response["predictions_path"], task, risk)
        except (OSError, ValueError, KeyError, EngineError) as exc:
            return RunResult(
                status="train_error",
                message=f"could not score predictions file: {exc}",
                stdout_tail=stdout_tail,
                stderr_tail=stderr_tail,
                duration_ms=elapsed(),
            )
    else:
        raw = response.get("metrics")
        if not isinstance(raw, dict):
            return RunResult(
                status="train_error",
                message="success response carries no metrics",
                stdout_tail=stdout_tail,
                stderr_tail=stderr_tail,
                duration_ms=elapsed(),
            )
        metrics = {k: float(v) for k, v in raw.items()}
    missing = [c for c in task.criteria if c not in metrics]
    if missing:
        return RunResult(
            status="train_error",
            message=f"response missing requested metrics: {', '.join(missing)}",
            stdout_tail=stdout_tail,
            stderr_tail=stderr_tail,
            duration_ms=elapsed(),
        )
    metrics = {c: metrics[c] for c in task.criteria}
    return RunResult(
        status="success",
        metrics=metrics,
        primary_loss=metrics[task.primary_criterion],
        message=str(response.get("message", "")),
        stdout_tail=stdout_tail,
        stderr_tail=stderr_tail,
        duration_ms=elapsed(),
        artifact_digest=digest_of(metrics),
    )


@dataclass
class DefaultExecutor:
    """Binding-aware dispatcher the controller calls for every candidate run."""

    banks: BankSet
    native_timeout_ms: int = NATIVE_TIMEOUT_MS
    external_timeout_ms: int = EXTERNAL_TIMEOUT_MS
    risk: RiskParams = field(default_factory=RiskParams)

    def run(self, config: CandidateConfig, task: TaskSpec) -> RunResult:
        model = self.banks.model(config.model_id)
        if model.binding.kind == "native":
            return run_native(config, task, model, self.native_timeout_ms, self.risk)
        return run_external(config, task, model.binding.ref, self.external_timeout_ms, risk=self.risk)
