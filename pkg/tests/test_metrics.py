import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.optimize import minimize
from scipy.spatial.transform import Rotation

from mhformer import metrics


def random_similarity(rng):
    R = Rotation.random(random_state=rng.integers(1 << 31)).as_matrix()
    return float(rng.uniform(0.3, 3.0)), R, rng.normal(0, 500, size=3)


def test_mpjpe_basics(rng):
    p = rng.normal(size=(4, 17, 3))
    assert metrics.mpjpe(p, p) == 0.0
    gt = np.zeros((1, 1, 3))
    assert metrics.mpjpe(gt + [3.0, 4.0, 0.0], gt) == 5.0
    q = rng.normal(size=(4, 17, 3))
    oracle = np.mean([np.sqrt(sum((p[b, j, c] - q[b, j, c]) ** 2 for c in range(3))) for b in range(4) for j in range(17)])
    assert abs(metrics.mpjpe(p, q) - oracle) < 1e-10
    with pytest.raises(ValueError):
        metrics.mpjpe(p, q[:, :5])


def test_procrustes_recovers_similarity(rng):
    pred = rng.normal(0, 200, size=(17, 3))
    s, R, t = random_similarity(rng)
    gt = s * pred @ R.T + t
    np.testing.assert_allclose(metrics.procrustes_align(pred, gt), gt, atol=1e-9)
    np.testing.assert_allclose(metrics.procrustes_align(gt, gt), gt, atol=1e-9)
    assert metrics.p_mpjpe(pred, gt) < 1e-6


def test_procrustes_never_reflects(rng):
    pred = rng.normal(0, 200, size=(17, 3))
    mirrored = pred * [-1, 1, 1]
    aligned = metrics.procrustes_align(pred, mirrored)
    a0 = aligned - aligned.mean(0)
    p0 = pred - pred.mean(0)
    R, *_ = np.linalg.lstsq(p0, a0, rcond=None)
    assert np.linalg.det(R) > 0


def minimizer_residual(pred, gt):
    """Best similarity fit found by a generic optimizer over (axis-angle, log-scale, translation)."""
    def cost(v):
        R = Rotation.from_rotvec(v[:3]).as_matrix()
        return np.sum((np.exp(v[3]) * pred @ R.T + v[4:] - gt) ** 2)

    best = None
    r = np.random.default_rng(0)
    for _ in range(8):
        x0 = np.concatenate([r.normal(0, 1.5, 3), [0.0], gt.mean(0) - pred.mean(0)])
        res = minimize(cost, x0, method="BFGS", options={"gtol": 1e-12, "maxiter": 5000})
        if best is None or res.fun < best.fun:
            best = res
    v = best.x
    R = Rotation.from_rotvec(v[:3]).as_matrix()
    return np.linalg.norm(np.exp(v[3]) * pred @ R.T + v[4:] - gt, axis=-1)


def test_procrustes_matches_numerical_minimizer(rng):
    pred = rng.normal(0, 1, size=(5, 3))
    gt = rng.normal(0, 1, size=(5, 3))
    ours = np.linalg.norm(metrics.procrustes_align(pred, gt) - gt, axis=-1)
    ref = minimizer_residual(pred, gt)
    assert abs(np.sum(ours ** 2) - np.sum(ref ** 2)) <= 1e-6 * np.sum(ref ** 2)
    assert abs(metrics.p_mpjpe(pred, gt) - ref.mean()) <= 1e-6 * ref.mean()


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2 ** 31 - 1))
def test_p_mpjpe_never_exceeds_centred_mpjpe(seed):
    r = np.random.default_rng(seed)
    pred, gt = r.normal(0, 100, size=(2, 8, 3))
    pred, gt = pred - pred.mean(0), gt - gt.mean(0)
    assert metrics.p_mpjpe(pred, gt) <= metrics.mpjpe(pred, gt) + 1e-9


def test_degenerate_ground_truth_rejected():
    with pytest.raises(metrics.DegeneratePoseError):
        metrics.procrustes_align(np.ones((5, 3)), np.zeros((5, 3)))
    with pytest.raises(ValueError):
        metrics.procrustes_align(np.ones((2, 3)), np.zeros((2, 3)))


def test_pck_and_auc(rng):
    g = rng.normal(size=(3, 4, 3))
    assert metrics.pck(g, g) == 100.0 and metrics.auc(g, g) == 100.0
    off = g + [200.0, 0, 0]
    assert metrics.pck(off, g) == 0.0 and metrics.auc(off, g) == 0.0
    assert metrics.pck(g + 1.0, g, threshold=0.0) == 0.0
    pred = g + rng.uniform(0, 180, size=(3, 4, 1)) * np.array([1.0, 0, 0])
    err = np.linalg.norm(pred - g, axis=-1).ravel()
    count = sum(1 for e in err if e < 150) / len(err) * 100
    assert metrics.pck(pred, g) == pytest.approx(count, abs=1e-12)
    avg = sum(sum(1 for e in err if e < t) / len(err) * 100 for t in range(5, 155, 5)) / 30
    assert metrics.auc(pred, g) == pytest.approx(avg, abs=1e-12)
    assert metrics.AUC_THRESHOLDS[0] == 5 and metrics.AUC_THRESHOLDS[-1] == 150 and len(metrics.AUC_THRESHOLDS) == 30


def test_pck_is_strict_at_threshold():
    gt = np.zeros((1, 1, 3))
    assert metrics.pck(gt + [150.0, 0, 0], gt) == 0.0


def test_pck_monotone_in_threshold(rng):
    pred, gt = rng.normal(0, 100, size=(2, 10, 17, 3))
    vals = [metrics.pck(pred, gt, t) for t in np.linspace(0, 400, 41)]
    assert all(a <= b for a, b in zip(vals, vals[1:]))


def test_evaluate_report(rng):
    gt = rng.normal(0, 100, size=(6, 17, 3))
    rep = metrics.evaluate(gt + 1.0, gt, {"tag": "x"})
    assert set(rep) == {"count", "mpjpe_mm", "p_mpjpe_mm", "pck150", "auc", "config"}
    assert rep["count"] == 6 and rep["config"]["tag"] == "x"
    assert rep["mpjpe_mm"] == pytest.approx(np.sqrt(3.0))
    assert rep["p_mpjpe_mm"] < 1e-9
