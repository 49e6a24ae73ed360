from __future__ import annotations

import numpy as np
import pytest

from refexec.models import Scaler, gaussian_samples, make_segments, make_windows, ridge_fit, ridge_predictions


def wavy(t, d, seed=3):
    rng = np.random.default_rng(seed)
    base = np.arange(t)[:, None] * 0.05
    return base + np.sin(0.3 * np.arange(t))[:, None] + rng.normal(0, 0.2, size=(t, d))


def test_make_windows_matches_hand_slices():
    values = np.arange(18.0).reshape(9, 2)
    x, y = make_windows(values, p=3, q=2)
    assert x.shape == (5, 3, 2) and y.shape == (5, 2, 2)
    assert np.array_equal(x[0], values[0:3]) and np.array_equal(y[0], values[3:5])
    assert np.array_equal(x[4], values[4:7]) and np.array_equal(y[4], values[7:9])


def test_make_windows_too_short():
    with pytest.raises(ValueError, match="too short"):
        make_windows(np.zeros((4, 1)), p=3, q=2)


def test_make_segments_contiguous():
    values = np.arange(12.0).reshape(6, 2)
    segs = make_segments(values, q=4)
    assert segs.shape == (3, 4, 2)
    assert np.array_equal(segs[1], values[1:5])


def test_scaler_roundtrip_and_degenerate_feature():
    rows = np.column_stack([np.linspace(1, 9, 7), np.full(7, 4.0)])
    for kind in ("zscore", "minmax", None):
        sc = Scaler(kind, rows)
        back = sc.inverse(sc.transform(rows))
        assert np.allclose(back, rows, atol=1e-12)
    assert np.all(np.isfinite(Scaler("zscore", rows).transform(rows)))


def test_ridge_zero_penalty_equals_lstsq_oracle():
    train = wavy(60, 2)
    test = wavy(20, 2, seed=9)
    preds = ridge_predictions(train, test, p=4, q=2, l2=0.0, normalize=None)
    # independent assembly of the same least-squares problem
    x_tr, y_tr = make_windows(train, 4, 2)
    n = x_tr.shape[0]
    a = np.hstack([x_tr.reshape(n, -1), np.ones((n, 1))])
    w, _, _, _ = np.linalg.lstsq(a, y_tr.reshape(n, -1), rcond=None)
    x_te, _ = make_windows(test, 4, 2)
    m = x_te.shape[0]
    a_te = np.hstack([x_te.reshape(m, -1), np.ones((m, 1))])
    expected = (a_te @ w).reshape(m, 2, 2)
    assert np.allclose(preds, expected, atol=1e-10)


def test_ridge_penalty_matches_normal_equations_oracle():
    rng = np.random.default_rng(0)
    a = np.hstack([rng.normal(size=(40, 5)), np.ones((40, 1))])
    y = rng.normal(size=(40, 3))
    l2 = 0.3
    w = ridge_fit(a, y, l2)
    penalty = np.eye(6)
    penalty[-1, -1] = 0.0
    expected = np.linalg.inv(a.T @ a + a.shape[0] * l2 * penalty) @ (a.T @ y)
    assert np.allclose(w, expected, atol=1e-10)


def test_ridge_penalty_shrinks_weights():
    rng = np.random.default_rng(1)
    a = np.hstack([rng.normal(size=(50, 6)), np.ones((50, 1))])
    y = rng.normal(size=(50, 2))
    w0 = ridge_fit(a, y, 0.0)
    w1 = ridge_fit(a, y, 1.0)
    assert np.linalg.norm(w1[:-1]) < np.linalg.norm(w0[:-1])


def test_ridge_negative_penalty_rejected():
    with pytest.raises(ValueError, match=">= 0"):
        ridge_fit(np.ones((3, 2)), np.ones((3, 1)), -0.1)


def test_ols_predictions_invariant_under_normalization():
    train = wavy(80, 3)
    test = wavy(24, 3, seed=5)
    raw = ridge_predictions(train, test, p=3, q=2, l2=0.0, normalize=None)
    scaled = ridge_predictions(train, test, p=3, q=2, l2=0.0, normalize="zscore")
    assert np.allclose(raw, scaled, atol=1e-8)


def test_gaussian_deterministic_and_moment_match():
    rng = np.random.default_rng(7)
    train = rng.multivariate_normal([0.2, -0.1], [[1.0, 0.4], [0.4, 0.9]], size=500)
    a = gaussian_samples(train, q=3, shrinkage=0.0, seed=13, n_samples=4000, normalize=None)
    b = gaussian_samples(train, q=3, shrinkage=0.0, seed=13, n_samples=4000, normalize=None)
    assert np.array_equal(a, b)
    segs = make_segments(train, 3).reshape(-1, 6)
    flat = a.reshape(-1, 6)
    assert np.allclose(flat.mean(axis=0), segs.mean(axis=0), atol=0.1)
    assert np.allclose(np.cov(flat, rowvar=False), np.cov(segs, rowvar=False), atol=0.15)


def test_gaussian_full_shrinkage_decorrelates():
    rng = np.random.default_rng(8)
    shared = rng.normal(size=(600, 1))
    train = np.hstack([shared, shared * 0.9 + rng.normal(0, 0.1, size=(600, 1))])
    samples = gaussian_samples(train, q=2, shrinkage=1.0, seed=3, n_samples=6000, normalize=None)
    flat = samples.reshape(-1, 4)
    corr = np.corrcoef(flat, rowvar=False)
    off = corr[~np.eye(4, dtype=bool)]
    assert np.max(np.abs(off)) < 0.06


def test_gaussian_shrinkage_out_of_range():
    with pytest.raises(ValueError, match="lambda"):
        gaussian_samples(np.ones((10, 2)), q=2, shrinkage=1.5, seed=0, n_samples=2, normalize=None)
