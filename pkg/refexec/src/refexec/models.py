"""Closed-form ridge forecaster and Gaussian window generator.

Both models share the engine's window conventions: stride-1 contiguous
windows, per-feature normalization fitted on training rows only, and
predictions returned in the original scale.
"""

from __future__ import annotations

from typing import Optional

import numpy as np


class Scaler:
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


def make_windows(values: np.ndarray, p: int, q: int) -> tuple[np.ndarray, np.ndarray]:
    """Stride-1 (input, target) pairs: p rows in, the next q rows out."""
    t = values.shape[0]
    if t < p + q:
        raise ValueError(f"series of {t} rows is too short for p={p}, q={q} windows")
    count = t - p - q + 1
    x = np.stack([values[i : i + p] for i in range(count)])
    y = np.stack([values[i + p : i + p + q] for i in range(count)])
    return x, y


def make_segments(values: np.ndarray, q: int) -> np.ndarray:
    """Stride-1 contiguous length-q segments."""
    t = values.shape[0]
    if t < q:
        raise ValueError(f"series of {t} rows is too short for length-{q} segments")
    return np.stack([values[i : i + q] for i in range(t - q + 1)])


def ridge_fit(a: np.ndarray, y: np.ndarray, l2: float) -> np.ndarray:
    """Minimizer of ||AW - Y||_F^2 / n + l2 * ||W'||_F^2, bias row unpenalized.

    The per-sample mean convention matches gradient-descent trainers whose
    loss averages over samples, so the same l2 means the same optimum.
    """
    if l2 < 0:
        raise ValueError(f"l2 must be >= 0, got {l2}")
    n, n_in = a.shape
    if l2 == 0.0:
        w, _, _, _ = np.linalg.lstsq(a, y, rcond=None)
        return w
    penalty = np.eye(n_in)
    penalty[-1, -1] = 0.0  # bias column carries no penalty
    return np.linalg.solve(a.T @ a + n * l2 * penalty, a.T @ y)


def ridge_predictions(
    train: np.ndarray,
    test: np.ndarray,
    p: int,
    q: int,
    l2: float,
    normalize: Optional[str],
) -> np.ndarray:
    """Forecasts for all test windows, already back in original scale."""
    d = train.shape[1]
    scaler = Scaler(normalize, train)
    x_tr, y_tr = make_windows(scaler.transform(train), p, q)
    x_te, _ = make_windows(scaler.transform(test), p, q)
    n = x_tr.shape[0]
    a = np.concatenate([x_tr.reshape(n, -1), np.ones((n, 1))], axis=1)
    w = ridge_fit(a, y_tr.reshape(n, -1), l2)
    m = x_te.shape[0]
    a_te = np.concatenate([x_te.reshape(m, -1), np.ones((m, 1))], axis=1)
    preds = (a_te @ w).reshape(m, q, d)
    return np.stack([scaler.inverse(w_) for w_ in preds])


def gaussian_samples(
    train: np.ndarray,
    q: int,
    shrinkage: float,
    seed: int,
    n_samples: int,
    normalize: Optional[str],
) -> np.ndarray:
    """n_samples windows drawn from a Gaussian fitted on training segments.

    Mean and covariance (N-1 divisor) come from the flattened segments;
    shrinkage blends the covariance toward its diagonal before the
    eigendecomposition that builds the sampling factor.
    """
    if not 0.0 <= shrinkage <= 1.0:
        raise ValueError(f"cov_shrinkage lambda must be in [0, 1], got {shrinkage}")
    d = train.shape[1]
    scaler = Scaler(normalize, train)
    segs = make_segments(scaler.transform(train), q)
    if segs.shape[0] < 2:
        raise ValueError("gaussian model needs at least 2 training segments")
    flat = segs.reshape(segs.shape[0], q * d)
    mu = flat.mean(axis=0)
    cov = np.atleast_2d(np.cov(flat, rowvar=False, ddof=1))
    if shrinkage > 0:
        cov = (1.0 - shrinkage) * cov + shrinkage * np.diag(np.diag(cov))
    evals, evecs = np.linalg.eigh(cov)
    factor = evecs @ np.diag(np.sqrt(np.clip(evals, 0.0, None)))
    z = np.random.default_rng(seed).standard_normal((n_samples, q * d))
    samples = (mu + z @ factor.T).reshape(n_samples, q, d)
    return np.stack([scaler.inverse(s) for s in samples])
