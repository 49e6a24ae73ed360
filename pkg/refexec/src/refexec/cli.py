"""Command-line entry: `refexec serve-once`.

Reads one ExecRequest from stdin, writes one ExecResponse to stdout.  Every
handled outcome, including protocol-level errors, is a well-formed response
with exit code 0; only an unhandled crash exits nonzero, leaving a traceback
on stderr for the caller's log tail.
"""

from __future__ import annotations

import argparse
import json
import sys
import tempfile
from typing import Optional, Sequence

import numpy as np

from .measures import (
    FORECAST_MEASURES,
    GENERATION_MEASURES,
    forecast_measure,
    generation_measure,
)
from .models import gaussian_samples, make_segments, make_windows, ridge_predictions
from .protocol import ParsedRequest, ProtocolError, parse_request

# model id -> task kind this executor can serve it for
KNOWN_MODELS = {"ridge": "forecasting", "gaussian": "generation"}

SUPPORTED_DIRECTIVES = {
    "ridge": frozenset({"normalize_zscore", "normalize_minmax"}),
    "gaussian": frozenset({"normalize_zscore", "normalize_minmax", "cov_shrinkage"}),
}


def _interpret_directives(
    req: ParsedRequest,
) -> tuple[Optional[str], float, tuple[str, ...]]:
    """Split directives into settings we honor and names we acknowledge only.

    The later of two normalizations wins, mirroring the engine's conflict
    rule; everything outside the supported set is reported back by name.
    """
    supported = SUPPORTED_DIRECTIVES[req.model_id]
    normalize: Optional[str] = None
    shrinkage = 0.0
    ignored: list[str] = []
    for name, params in req.directives:
        if name not in supported:
            ignored.append(name)
        elif name == "normalize_zscore":
            normalize = "zscore"
        elif name == "normalize_minmax":
            normalize = "minmax"
        elif name == "cov_shrinkage":
            lam = params.get("lambda")
            if not isinstance(lam, (int, float)) or isinstance(lam, bool):
                raise ProtocolError("cov_shrinkage requires a numeric params.lambda")
            shrinkage = float(lam)
    return normalize, shrinkage, tuple(dict.fromkeys(ignored))


def _ridge_l2(req: ParsedRequest) -> float:
    raw = req.hyperparams.get("l2", 0.0)
    if not isinstance(raw, (int, float)) or isinstance(raw, bool):
        raise ProtocolError("hyperparams.l2 must be numeric when present")
    if raw < 0:
        raise ProtocolError(f"hyperparams.l2 must be >= 0, got {raw}")
    return float(raw)


def _check_criteria(req: ParsedRequest) -> None:
    known = FORECAST_MEASURES if req.kind == "forecasting" else GENERATION_MEASURES
    unknown = [c for c in req.criteria if c not in known]
    if unknown:
        raise ProtocolError(
            f"unknown criteria for {req.kind}: {', '.join(unknown)}; this executor knows {list(known)}"
        )


def _write_predictions(windows: np.ndarray) -> str:
    doc = {"windows": [[list(map(float, row)) for row in w] for w in windows]}
    with tempfile.NamedTemporaryFile(
        mode="w", encoding="utf-8", prefix="refexec-preds-", suffix=".json", delete=False
    ) as fh:
        json.dump(doc, fh)
        return fh.name


def _execute(req: ParsedRequest) -> dict:
    if req.model_id not in KNOWN_MODELS:
        raise ProtocolError(
            f"unknown model id {req.model_id!r}; this executor serves {sorted(KNOWN_MODELS)}"
        )
    if KNOWN_MODELS[req.model_id] != req.kind:
        raise ProtocolError(
            f"model {req.model_id!r} serves {KNOWN_MODELS[req.model_id]} tasks, request is {req.kind}"
        )
    normalize, shrinkage, ignored = _interpret_directives(req)

    if req.model_id == "ridge":
        outputs = ridge_predictions(req.train, req.test, req.p, req.q, _ridge_l2(req), normalize)
        _, truth = make_windows(req.test, req.p, req.q)
    else:
        real = make_segments(req.test, req.q)
        outputs = gaussian_samples(req.train, req.q, shrinkage, req.seed, real.shape[0], normalize)
        truth = real
    if not np.all(np.isfinite(outputs)):
        raise ProtocolError("model produced non-finite outputs")

    parts = []
    if req.freeform_patch is not None:
        parts.append(f"freeform_patch acknowledged, not executed: {req.freeform_patch}")
    if ignored:
        parts.append("ignored directives: " + ", ".join(ignored))

    response: dict = {"v": 1, "status": "success"}
    if req.return_predictions:
        response["predictions_path"] = _write_predictions(outputs)
    elif req.kind == "forecasting":
        _check_criteria(req)
        response["metrics"] = {c: forecast_measure(c, outputs, truth) for c in req.criteria}
    else:
        _check_criteria(req)
        response["metrics"] = {c: generation_measure(c, truth, outputs) for c in req.criteria}
    if parts:
        response["message"] = "; ".join(parts)
    return response


def serve_once(text: str) -> dict:
    """One request document in, one response document out; never raises on
    anticipated failures."""
    try:
        return _execute(parse_request(text))
    except (ProtocolError, ValueError, np.linalg.LinAlgError) as exc:
        return {"v": 1, "status": "error", "message": str(exc)}


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = argparse.ArgumentParser(
        prog="refexec",
        description="Reference external executor for the ExecRequest/ExecResponse protocol.",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser(
        "serve-once",
        help="read one ExecRequest on stdin, write one ExecResponse to stdout",
    )
    parser.parse_args(argv)
    response = serve_once(sys.stdin.read())
    sys.stdout.write(json.dumps(response, ensure_ascii=False) + "\n")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
