from __future__ import annotations

import json
from pathlib import Path

import numpy as np
import pytest

from tsrefine.banks import load_banks
from tsrefine.tasks import DatasetSplit, TaskSpec, TimeSeriesFrame, WindowSpec, split_frame

REPO_ROOT = Path(__file__).resolve().parent.parent
BANK_ROOT = REPO_ROOT / "banks"

# acceptance tests record one line per criterion; a terminal-summary hook
# prints them even though pytest captures in-test stdout
ACCEPTANCE_LINES: dict[int, str] = {}


def record_acceptance(criterion: int, ok: bool, detail: str = "") -> None:
    status = "PASS" if ok else "FAIL"
    line = f"criterion {criterion:2d} [{status}] {detail}".rstrip()
    ACCEPTANCE_LINES[criterion] = line
    print(line)


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.ensure_newline()
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(ACCEPTANCE_LINES[n])


@pytest.fixture(scope="session")
def banks():
    return load_banks(BANK_ROOT)


def ar2_values(T=2000, d=3, seed=42, phi1=0.6, phi2=0.25, noise=0.5):
    rng = np.random.default_rng(seed)
    x = np.zeros((T, d))
    x[0] = rng.normal(size=d)
    x[1] = rng.normal(size=d)
    mix = np.array([[1.0, 0.3, 0.1], [0.3, 1.0, 0.3], [0.1, 0.3, 1.0]])
    chol = np.linalg.cholesky(mix)
    for t in range(2, T):
        x[t] = phi1 * x[t - 1] + phi2 * x[t - 2] + chol @ rng.normal(size=d) * noise
    return x


AR2_DESCRIPTION = (
    "Three correlated autoregressive index features observed daily. Forecast the next "
    "two steps from the last eight observations of each window. Stationary linear lag "
    "structure with moderate noise; minimize rmse on held-out windows, mae reported too."
)


def make_forecast_task(values, task_id="ar2-bench", p=8, q=2, description=AR2_DESCRIPTION,
                       criteria=("rmse", "mae"), primary="rmse", test_fraction=0.2):
    names = tuple(f"f{j + 1}" for j in range(values.shape[1]))
    frame = TimeSeriesFrame(values=values, feature_names=names)
    train, test = split_frame(frame, test_fraction)
    return TaskSpec(
        id=task_id,
        kind="forecasting",
        description=description,
        dataset=DatasetSplit(train=train, test=test, window=WindowSpec(p=p, q=q)),
        criteria=tuple(criteria),
        primary_criterion=primary,
    )


def make_generation_task(values, task_id="gen-bench", q=6, description="", criteria=("covariance_score",),
                         primary="covariance_score", test_fraction=0.3):
    names = tuple(f"f{j + 1}" for j in range(values.shape[1]))
    frame = TimeSeriesFrame(values=values, feature_names=names)
    train, test = split_frame(frame, test_fraction)
    desc = description or (
        "Generate synthetic multivariate return windows matching covariance and "
        "correlation structure of the real gaussian sample."
    )
    return TaskSpec(
        id=task_id,
        kind="generation",
        description=desc,
        dataset=DatasetSplit(train=train, test=test, window=WindowSpec(p=1, q=q)),
        criteria=tuple(criteria),
        primary_criterion=primary,
    )


@pytest.fixture(scope="session")
def ar2_task():
    return make_forecast_task(ar2_values())


@pytest.fixture(scope="session")
def small_task():
    # small and fast: enough rows for p=4, q=2 windows on both splits
    return make_forecast_task(ar2_values(T=240, seed=7), task_id="ar2-small", p=4, q=2)


def write_bank(root: Path, cases=(), refinements=(), models=(), metrics=()) -> Path:
    """Materialize a toy bank directory; records are JSON dicts without 'v'."""
    for section, records in (
        ("cases", cases),
        ("refinements", refinements),
        ("models", models),
        ("metrics", metrics),
    ):
        subdir = root / section
        subdir.mkdir(parents=True, exist_ok=True)
        for rec in records:
            doc = {"v": 1, **rec}
            (subdir / f"{rec['id']}.json").write_text(json.dumps(doc, indent=1), encoding="utf-8")
    return root


def metric_record(metric_id, kinds=("forecasting",)):
    return {"id": metric_id, "task_kinds": list(kinds), "direction": "minimize", "summary": metric_id}


def model_record(model_id, family="baseline", kinds=("forecasting",), schema=(), ref=None, binding_kind="native"):
    return {
        "id": model_id,
        "family": family,
        "task_kinds": list(kinds),
        "hyperparam_schema": list(schema),
        "binding": {"kind": binding_kind, "ref": ref if ref is not None else model_id},
        "summary": f"toy model {model_id}",
    }


def case_record(case_id, description, model_id, kind="forecasting", outcome=None):
    return {
        "id": case_id,
        "task_kind": kind,
        "domain_tags": ["toy"],
        "description": description,
        "solution_summary": f"solved by {model_id}",
        "recommended_model": model_id,
        "outcome": outcome or {},
    }


def refinement_record(entry_id, kind="normalize_zscore", params=None, category="preprocessing",
                      applicability=("baseline", "linear")):
    return {
        "id": entry_id,
        "category": category,
        "title": f"tip {entry_id}",
        "guidance": "guidance text",
        "directive_template": {"kind": kind, "params": params or {}},
        "applicability": list(applicability),
    }
