"""Evaluation measure bank: forecasting errors, risk differences, fidelity scores.

Forecasting errors pool every (window, step, feature) cell before aggregating,
so the value does not depend on how cells are grouped.  Risk metrics use the
historical method on simple returns.  Generation scores measure l2 differences
between real and synthetic window sets.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .errors import (
    DegenerateFeature,
    DimensionMismatch,
    EmptyInput,
    EmptySet,
    LagOutOfRange,
    MapeDenominatorZero,
    NonPositivePrice,
    ShapeMismatch,
    TooShort,
    ZeroVolatility,
)

MAPE_FLOOR = 1e-8
SMAPE_FLOOR = 1e-12


@dataclass(frozen=True)
class MetricValue:
    id: str
    value: float
    detail: Optional[dict[str, float]] = None


@dataclass(frozen=True)
class RiskParams:
    """Tail level and return convention for VaR/ES."""

    alpha: float = 0.05
    return_kind: str = "simple"

    def __post_init__(self):
        if not 0.0 < self.alpha <= 0.5:
            raise ValueError(f"alpha must be in (0, 0.5], got {self.alpha}")
        if self.return_kind != "simple":
            raise ValueError("only simple returns are supported")


def _paired(pred, truth) -> tuple[np.ndarray, np.ndarray]:
    p = np.asarray(pred, dtype=np.float64)
    t = np.asarray(truth, dtype=np.float64)
    if p.shape != t.shape:
        raise ShapeMismatch(f"pred {p.shape} vs truth {t.shape}")
    if p.size == 0:
        raise EmptyInput("no cells to score")
    return p.ravel(), t.ravel()


def mse(pred, truth) -> MetricValue:
    p, t = _paired(pred, truth)
    return MetricValue("mse", float(np.mean((p - t) ** 2)))


def rmse(pred, truth) -> MetricValue:
    p, t = _paired(pred, truth)
    return MetricValue("rmse", float(math.sqrt(np.mean((p - t) ** 2))))


def mae(pred, truth) -> MetricValue:
    p, t = _paired(pred, truth)
    return MetricValue("mae", float(np.mean(np.abs(p - t))))


def mape(pred, truth) -> MetricValue:
    p, t = _paired(pred, truth)
    if np.any(np.abs(t) < MAPE_FLOOR):
        raise MapeDenominatorZero(f"truth contains entries with |a| < {MAPE_FLOOR}")
    return MetricValue("mape", float(100.0 * np.mean(np.abs(p - t) / np.abs(t))))


def smape(pred, truth) -> MetricValue:
    p, t = _paired(pred, truth)
    denom = np.abs(p) + np.abs(t)
    terms = np.where(denom < SMAPE_FLOOR, 0.0, 2.0 * np.abs(p - t) / np.where(denom < SMAPE_FLOOR, 1.0, denom))
    return MetricValue("smape", float(100.0 * np.mean(terms)))


def returns_from_prices(prices: Sequence[float] | np.ndarray) -> np.ndarray:
    """Simple returns r_t = p_t / p_{t-1} - 1."""
    p = np.asarray(prices, dtype=np.float64).ravel()
    if p.size < 2:
        raise TooShort(f"need at least 2 prices, got {p.size}")
    if np.any(p <= 0):
        raise NonPositivePrice("prices must be strictly positive")
    return p[1:] / p[:-1] - 1.0


def sharpe(returns: Sequence[float] | np.ndarray) -> float:
    """Mean over sample standard deviation (N-1 divisor), no annualization."""
    r = np.asarray(returns, dtype=np.float64).ravel()
    if r.size < 2:
        raise TooShort(f"sharpe needs at least 2 returns, got {r.size}")
    std = float(np.std(r, ddof=1))
    if std == 0.0:
        raise ZeroVolatility("returns have zero sample standard deviation")
    return float(np.mean(r)) / std


def var(returns: Sequence[float] | np.ndarray, params: RiskParams = RiskParams()) -> float:
    """Historical VaR: negated ceil(alpha*N)-th smallest return."""
    r = np.asarray(returns, dtype=np.float64).ravel()
    if r.size < 1:
        raise TooShort("var needs at least 1 return")
    k = math.ceil(params.alpha * r.size)
    if k < 1:
        raise TooShort(f"ceil(alpha*N) must be >= 1, got alpha={params.alpha}, N={r.size}")
    q = float(np.sort(r)[k - 1])
    return -q


def es(returns: Sequence[float] | np.ndarray, params: RiskParams = RiskParams()) -> float:
    """Historical expected shortfall: negated mean of returns at or below the VaR quantile."""
    r = np.asarray(returns, dtype=np.float64).ravel()
    if r.size < 1:
        raise TooShort("es needs at least 1 return")
    k = math.ceil(params.alpha * r.size)
    if k < 1:
        raise TooShort(f"ceil(alpha*N) must be >= 1, got alpha={params.alpha}, N={r.size}")
    q = float(np.sort(r)[k - 1])
    tail = r[r <= q]
    return -float(np.mean(tail))


_RISK_FNS = {"sharpe": lambda r, p: sharpe(r), "var": var, "es": es}


def metric_difference(
    metric: str,
    pred_prices,
    true_prices,
    params: RiskParams = RiskParams(),
) -> MetricValue:
    """Absolute gap between a risk metric on predicted vs true price paths."""
    if metric not in _RISK_FNS:
        raise ValueError(f"unknown risk metric {metric!r}")
    fn = _RISK_FNS[metric]
    a = fn(returns_from_prices(pred_prices), params)
    b = fn(returns_from_prices(true_prices), params)
    return MetricValue(f"{metric}_diff", abs(a - b))


def _window_stack(windows) -> np.ndarray:
    arr = np.asarray(windows, dtype=np.float64)
    if arr.ndim == 2:
        arr = arr[None, :, :]
    if arr.ndim != 3:
        raise DimensionMismatch(f"window set must be N x q x d, got shape {arr.shape}")
    if arr.shape[0] == 0:
        raise EmptySet("window set is empty")
    return arr


def _pair_window_sets(real, fake) -> tuple[np.ndarray, np.ndarray]:
    r = _window_stack(real)
    f = _window_stack(fake)
    if r.shape[1:] != f.shape[1:]:
        raise DimensionMismatch(f"real windows {r.shape[1:]} vs fake windows {f.shape[1:]}")
    return r, f


def marginal_score(real, fake, bins: int = 50) -> MetricValue:
    """Mean over features of the l2 gap between histogram mass vectors.

    Bin edges span the pooled [min, max] of each feature; both histograms are
    normalized to total mass 1 before differencing.
    """
    r, f = _pair_window_sets(real, fake)
    d = r.shape[2]
    detail = {}
    for j in range(d):
        rv = r[:, :, j].ravel()
        fv = f[:, :, j].ravel()
        pooled = np.concatenate([rv, fv])
        lo, hi = float(pooled.min()), float(pooled.max())
        if hi <= lo:
            detail[f"f{j}"] = 0.0
            continue
        hr, _ = np.histogram(rv, bins=bins, range=(lo, hi))
        hf, _ = np.histogram(fv, bins=bins, range=(lo, hi))
        hr = hr / hr.sum()
        hf = hf / hf.sum()
        detail[f"f{j}"] = float(np.linalg.norm(hr - hf))
    return MetricValue("marginal_score", float(np.mean(list(detail.values()))), detail)


def _flat_rows(windows: np.ndarray) -> np.ndarray:
    """Pool a window set over (window, timestep) into rows of dimension d."""
    n, q, d = windows.shape
    return windows.reshape(n * q, d)


def correlation_score(real, fake) -> MetricValue:
    """Frobenius norm of the gap between cross-feature correlation matrices."""
    r, f = _pair_window_sets(real, fake)
    d = r.shape[2]
    if d < 2:
        return MetricValue("correlation_score", 0.0)
    rows_r, rows_f = _flat_rows(r), _flat_rows(f)
    for name, rows in (("real", rows_r), ("fake", rows_f)):
        stds = rows.std(axis=0)
        if np.any(stds == 0):
            raise DegenerateFeature(f"{name} set has a zero-variance feature")
    cr = np.corrcoef(rows_r, rowvar=False)
    cf = np.corrcoef(rows_f, rowvar=False)
    return MetricValue("correlation_score", float(np.linalg.norm(cr - cf)))


def covariance_score(real, fake) -> MetricValue:
    """Frobenius norm of the gap between sample covariance matrices (N-1 divisor)."""
    r, f = _pair_window_sets(real, fake)
    rows_r, rows_f = _flat_rows(r), _flat_rows(f)
    if rows_r.shape[0] < 2 or rows_f.shape[0] < 2:
        raise TooShort("covariance needs at least 2 pooled rows per set")
    cr = np.cov(rows_r, rowvar=False, ddof=1)
    cf = np.cov(rows_f, rowvar=False, ddof=1)
    return MetricValue("covariance_score", float(np.linalg.norm(np.atleast_2d(cr) - np.atleast_2d(cf))))


def _acf_per_feature(windows: np.ndarray, lags: range) -> np.ndarray:
    """Mean over windows of per-window Pearson autocorrelation, per feature and lag.

    A window whose slices have zero variance at a lag contributes 0 there.
    """
    n, q, d = windows.shape
    out = np.zeros((len(lags), d))
    for li, lag in enumerate(lags):
        for j in range(d):
            acc = 0.0
            for w in range(n):
                a = windows[w, : q - lag, j]
                b = windows[w, lag:, j]
                sa, sb = a.std(), b.std()
                if sa == 0.0 or sb == 0.0:
                    continue
                acc += float(np.mean((a - a.mean()) * (b - b.mean())) / (sa * sb))
            out[li, j] = acc / n
    return out


def autocorrelation_score(real, fake, max_lag: Optional[int] = None) -> MetricValue:
    """Mean over features of the l2 gap between lag profiles of window ACFs."""
    r, f = _pair_window_sets(real, fake)
    q = r.shape[1]
    if q < 2:
        raise LagOutOfRange(f"windows of length {q} have no lags")
    if max_lag is None:
        max_lag = q - 1
    if not 1 <= max_lag <= q - 1:
        raise LagOutOfRange(f"max_lag must be in [1, {q - 1}], got {max_lag}")
    lags = range(1, max_lag + 1)
    acf_r = _acf_per_feature(r, lags)
    acf_f = _acf_per_feature(f, lags)
    per_feature = np.linalg.norm(acf_r - acf_f, axis=0)
    detail = {f"f{j}": float(v) for j, v in enumerate(per_feature)}
    return MetricValue("autocorrelation_score", float(per_feature.mean()), detail)


# --- task-level aggregation -------------------------------------------------

FORECAST_METRICS = ("mse", "rmse", "mae", "mape", "smape", "sharpe_diff", "var_diff", "es_diff")
GENERATION_METRICS = (
    "marginal_score",
    "correlation_score",
    "covariance_score",
    "autocorrelation_score",
    "var_diff",
    "es_diff",
)

_ERROR_FNS = {"mse": mse, "rmse": rmse, "mae": mae, "mape": mape, "smape": smape}


def pooled_window_returns(windows: np.ndarray) -> np.ndarray:
    """Simple returns along the horizon axis of every window, pooled flat.

    Interprets each window column as a short price path; requires q >= 2 and
    strictly positive values.
    """
    arr = _window_stack(windows)
    if arr.shape[1] < 2:
        raise TooShort("window length must be >= 2 to imply returns")
    if np.any(arr <= 0):
        raise NonPositivePrice("window values must be strictly positive to imply returns")
    return (arr[:, 1:, :] / arr[:, :-1, :] - 1.0).ravel()


def compute_forecast_metric(
    metric_id: str,
    pred: np.ndarray,
    truth: np.ndarray,
    risk: RiskParams = RiskParams(),
) -> MetricValue:
    """Score stacked forecast windows (N x q x d) under one metric id."""
    if metric_id in _ERROR_FNS:
        return _ERROR_FNS[metric_id](pred, truth)
    if metric_id in ("sharpe_diff", "var_diff", "es_diff"):
        name = metric_id.split("_")[0]
        fn = _RISK_FNS[name]
        a = fn(pooled_window_returns(pred), risk)
        b = fn(pooled_window_returns(truth), risk)
        return MetricValue(metric_id, abs(a - b))
    raise ValueError(f"unknown forecasting metric {metric_id!r}")


def compute_generation_metric(
    metric_id: str,
    real,
    fake,
    risk: RiskParams = RiskParams(),
    bins: int = 50,
    max_lag: Optional[int] = None,
) -> MetricValue:
    """Score a synthetic window set against the real one under one metric id."""
    if metric_id == "marginal_score":
        return marginal_score(real, fake, bins=bins)
    if metric_id == "correlation_score":
        return correlation_score(real, fake)
    if metric_id == "covariance_score":
        return covariance_score(real, fake)
    if metric_id == "autocorrelation_score":
        return autocorrelation_score(real, fake, max_lag=max_lag)
    if metric_id in ("var_diff", "es_diff"):
        name = metric_id.split("_")[0]
        fn = _RISK_FNS[name]
        a = fn(pooled_window_returns(fake), risk)
        b = fn(pooled_window_returns(real), risk)
        return MetricValue(metric_id, abs(a - b))
    raise ValueError(f"unknown generation metric {metric_id!r}")
