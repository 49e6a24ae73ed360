"""Self-contained evaluation measures.

Forecast errors pool every (window, step, feature) cell before aggregating.
Risk differences use the historical method on simple returns at a fixed 5%
tail level; the wire protocol carries no tail parameter.  Generation scores
compare a synthetic window set against the real one.
"""

from __future__ import annotations

import math

import numpy as np

MAPE_FLOOR = 1e-8
SMAPE_FLOOR = 1e-12
TAIL_ALPHA = 0.05
HISTOGRAM_BINS = 50

FORECAST_MEASURES = ("mse", "rmse", "mae", "mape", "smape", "sharpe_diff", "var_diff", "es_diff")
GENERATION_MEASURES = (
    "marginal_score",
    "correlation_score",
    "covariance_score",
    "autocorrelation_score",
    "var_diff",
    "es_diff",
)


def _paired(pred: np.ndarray, truth: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    p = np.asarray(pred, dtype=np.float64)
    t = np.asarray(truth, dtype=np.float64)
    if p.shape != t.shape:
        raise ValueError(f"prediction shape {p.shape} does not match truth shape {t.shape}")
    if p.size == 0:
        raise ValueError("no cells to score")
    return p.ravel(), t.ravel()


def mse(pred, truth) -> float:
    p, t = _paired(pred, truth)
    return float(np.mean((p - t) ** 2))


def rmse(pred, truth) -> float:
    return float(math.sqrt(mse(pred, truth)))


def mae(pred, truth) -> float:
    p, t = _paired(pred, truth)
    return float(np.mean(np.abs(p - t)))


def mape(pred, truth) -> float:
    p, t = _paired(pred, truth)
    if np.any(np.abs(t) < MAPE_FLOOR):
        raise ValueError(f"mape undefined: truth contains entries with |a| < {MAPE_FLOOR}")
    return float(100.0 * np.mean(np.abs(p - t) / np.abs(t)))


def smape(pred, truth) -> float:
    p, t = _paired(pred, truth)
    denom = np.abs(p) + np.abs(t)
    safe = np.where(denom < SMAPE_FLOOR, 1.0, denom)
    terms = np.where(denom < SMAPE_FLOOR, 0.0, 2.0 * np.abs(p - t) / safe)
    return float(100.0 * np.mean(terms))


def _window_returns(windows: np.ndarray) -> np.ndarray:
    """Simple returns along the horizon axis of every window, pooled flat."""
    arr = np.asarray(windows, dtype=np.float64)
    if arr.shape[1] < 2:
        raise ValueError("window length must be >= 2 to imply returns")
    if np.any(arr <= 0):
        raise ValueError("window values must be strictly positive to imply returns")
    return (arr[:, 1:, :] / arr[:, :-1, :] - 1.0).ravel()


def _sharpe(returns: np.ndarray) -> float:
    if returns.size < 2:
        raise ValueError(f"sharpe needs at least 2 returns, got {returns.size}")
    std = float(np.std(returns, ddof=1))
    if std == 0.0:
        raise ValueError("returns have zero sample standard deviation")
    return float(np.mean(returns)) / std


def _tail_quantile(returns: np.ndarray) -> float:
    """The ceil(alpha*N)-th smallest return."""
    if returns.size < 1:
        raise ValueError("tail measures need at least 1 return")
    k = math.ceil(TAIL_ALPHA * returns.size)
    if k < 1:
        raise ValueError(f"ceil(alpha*N) must be >= 1, got N={returns.size}")
    return float(np.sort(returns)[k - 1])


def _var(returns: np.ndarray) -> float:
    return -_tail_quantile(returns)


def _es(returns: np.ndarray) -> float:
    q = _tail_quantile(returns)
    return -float(np.mean(returns[returns <= q]))


_RISK_FNS = {"sharpe": _sharpe, "var": _var, "es": _es}


def risk_difference(measure_id: str, pred_windows, truth_windows) -> float:
    name = measure_id.split("_")[0]
    fn = _RISK_FNS[name]
    a = fn(_window_returns(pred_windows))
    b = fn(_window_returns(truth_windows))
    return abs(a - b)


def _window_stack(windows) -> np.ndarray:
    arr = np.asarray(windows, dtype=np.float64)
    if arr.ndim != 3 or arr.shape[0] == 0:
        raise ValueError(f"window set must be a non-empty N x q x d array, got shape {arr.shape}")
    return arr


def marginal_score(real, fake, bins: int = HISTOGRAM_BINS) -> float:
    """Mean over features of the l2 gap between unit-mass histogram vectors.

    Bin edges span the pooled [min, max] of each feature across both sets.
    """
    r, f = _window_stack(real), _window_stack(fake)
    gaps = []
    for j in range(r.shape[2]):
        rv = r[:, :, j].ravel()
        fv = f[:, :, j].ravel()
        lo = float(min(rv.min(), fv.min()))
        hi = float(max(rv.max(), fv.max()))
        if hi <= lo:
            gaps.append(0.0)
            continue
        hr, _ = np.histogram(rv, bins=bins, range=(lo, hi))
        hf, _ = np.histogram(fv, bins=bins, range=(lo, hi))
        gaps.append(float(np.linalg.norm(hr / hr.sum() - hf / hf.sum())))
    return float(np.mean(gaps))


def _pooled_rows(windows: np.ndarray) -> np.ndarray:
    n, q, d = windows.shape
    return windows.reshape(n * q, d)


def correlation_score(real, fake) -> float:
    """Frobenius norm of the gap between cross-feature correlation matrices."""
    r, f = _window_stack(real), _window_stack(fake)
    if r.shape[2] < 2:
        return 0.0
    rows_r, rows_f = _pooled_rows(r), _pooled_rows(f)
    for name, rows in (("real", rows_r), ("fake", rows_f)):
        if np.any(rows.std(axis=0) == 0):
            raise ValueError(f"{name} set has a zero-variance feature")
    cr = np.corrcoef(rows_r, rowvar=False)
    cf = np.corrcoef(rows_f, rowvar=False)
    return float(np.linalg.norm(cr - cf))


def covariance_score(real, fake) -> float:
    """Frobenius norm of the gap between sample covariance matrices (N-1 divisor)."""
    r, f = _window_stack(real), _window_stack(fake)
    rows_r, rows_f = _pooled_rows(r), _pooled_rows(f)
    if rows_r.shape[0] < 2 or rows_f.shape[0] < 2:
        raise ValueError("covariance needs at least 2 pooled rows per set")
    cr = np.atleast_2d(np.cov(rows_r, rowvar=False, ddof=1))
    cf = np.atleast_2d(np.cov(rows_f, rowvar=False, ddof=1))
    return float(np.linalg.norm(cr - cf))


def _acf_profile(windows: np.ndarray, lags: range) -> np.ndarray:
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


def autocorrelation_score(real, fake) -> float:
    """Mean over features of the l2 gap between lag profiles of window ACFs."""
    r, f = _window_stack(real), _window_stack(fake)
    q = r.shape[1]
    if q < 2:
        raise ValueError(f"windows of length {q} have no lags")
    lags = range(1, q)
    per_feature = np.linalg.norm(_acf_profile(r, lags) - _acf_profile(f, lags), axis=0)
    return float(per_feature.mean())


def forecast_measure(measure_id: str, pred: np.ndarray, truth: np.ndarray) -> float:
    if measure_id == "mse":
        return mse(pred, truth)
    if measure_id == "rmse":
        return rmse(pred, truth)
    if measure_id == "mae":
        return mae(pred, truth)
    if measure_id == "mape":
        return mape(pred, truth)
    if measure_id == "smape":
        return smape(pred, truth)
    if measure_id in ("sharpe_diff", "var_diff", "es_diff"):
        return risk_difference(measure_id, pred, truth)
    raise ValueError(f"unknown forecasting measure {measure_id!r}")


def generation_measure(measure_id: str, real: np.ndarray, fake: np.ndarray) -> float:
    if measure_id == "marginal_score":
        return marginal_score(real, fake)
    if measure_id == "correlation_score":
        return correlation_score(real, fake)
    if measure_id == "covariance_score":
        return covariance_score(real, fake)
    if measure_id == "autocorrelation_score":
        return autocorrelation_score(real, fake)
    if measure_id in ("var_diff", "es_diff"):
        name = measure_id.split("_")[0]
        fn = _RISK_FNS[name]
        return abs(fn(_window_returns(fake)) - fn(_window_returns(real)))
    raise ValueError(f"unknown generation measure {measure_id!r}")
