import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from moco_priors.metrics import (
    EvalReport,
    SsimParams,
    aggregate,
    evaluate,
    gaussian_window,
    ssim,
    ssim_torch,
)
from moco_priors.priors import SliceSample


def brute_force_ssim(x, y, p=SsimParams()):
    """Explicit per-pixel windows with direct weighted sums (no separable filtering)."""
    r = p.window_size // 2
    g = gaussian_window(p.window_size, p.sigma)
    w2 = np.outer(g, g)
    xp = np.pad(np.asarray(x, float), r, mode="symmetric")
    yp = np.pad(np.asarray(y, float), r, mode="symmetric")
    h, w = x.shape
    out = np.empty((h, w))
    for i in range(h):
        for j in range(w):
            px = xp[i:i + 2 * r + 1, j:j + 2 * r + 1]
            py = yp[i:i + 2 * r + 1, j:j + 2 * r + 1]
            mx = np.sum(w2 * px)
            my = np.sum(w2 * py)
            vx = np.sum(w2 * (px - mx) ** 2)
            vy = np.sum(w2 * (py - my) ** 2)
            cxy = np.sum(w2 * (px - mx) * (py - my))
            out[i, j] = ((2 * mx * my + p.c1) * (2 * cxy + p.c2)) / ((mx**2 + my**2 + p.c1) * (vx + vy + p.c2))
    return out.mean(), out


def test_window_sums_to_one():
    assert gaussian_window().sum() == pytest.approx(1.0, abs=1e-15)
    assert gaussian_window().shape == (11,)


@pytest.mark.parametrize("seed", range(3))
def test_matches_brute_force(seed):
    rng = np.random.default_rng(seed)
    x, y = rng.random((32, 32)), rng.random((32, 32))
    mean, smap = ssim(x, y)
    bmean, bmap = brute_force_ssim(x, y)
    assert abs(mean - bmean) < 1e-6
    assert np.abs(smap - bmap).max() < 1e-6


def test_identity(rng):
    x = rng.random((24, 40))
    assert ssim(x, x)[0] == pytest.approx(1.0, abs=1e-9)


def test_constant_images_analytic():
    p = SsimParams()
    value = ssim(np.zeros((16, 16)), np.ones((16, 16)), p)[0]
    assert value == pytest.approx(p.c1 / (1 + p.c1), abs=1e-9)
    assert value == pytest.approx(1e-4 / 1.0001, abs=1e-12)


def test_map_shape_and_shape_mismatch(rng):
    _, smap = ssim(rng.random((20, 30)), rng.random((20, 30)))
    assert smap.shape == (20, 30)
    with pytest.raises(ValueError):
        ssim(np.zeros((4, 4)), np.zeros((4, 5)))


@settings(max_examples=30, deadline=None)
@given(arrays(np.float64, (16, 16), elements=st.floats(0, 1)), arrays(np.float64, (16, 16), elements=st.floats(0, 1)))
def test_symmetric_and_bounded(x, y):
    a = ssim(x, y)[0]
    assert a == pytest.approx(ssim(y, x)[0], abs=1e-9)
    assert -1 <= a <= 1 + 1e-12


def test_monotone_degradation():
    violations = 0
    for seed in range(20):
        rng = np.random.default_rng(seed)
        x = rng.random((32, 32))
        noise = rng.random((32, 32))
        vals = [ssim(x, (1 - t) * x + t * noise)[0] for t in (0, 0.25, 0.5, 1)]
        violations += any(b > a + 1e-12 for a, b in zip(vals, vals[1:]))
    assert violations == 0


def test_mask_option(rng):
    x, y = rng.random((16, 16)), rng.random((16, 16))
    mask = np.zeros((16, 16), bool)
    mask[4:12, 4:12] = True
    mean, smap = ssim(x, y, mask=mask)
    assert mean == pytest.approx(smap[mask].mean())


def test_torch_matches_numpy(rng):
    x, y = rng.random((2, 1, 24, 24)), rng.random((2, 1, 24, 24))
    t = ssim_torch(torch.from_numpy(x), torch.from_numpy(y))
    for b in range(2):
        assert t[b].item() == pytest.approx(ssim(x[b, 0], y[b, 0])[0], abs=1e-10)


def test_torch_ssim_is_differentiable(rng):
    x = torch.tensor(rng.random((1, 1, 16, 16)), requires_grad=True)
    y = torch.tensor(rng.random((1, 1, 16, 16)))
    ssim_torch(x, y).sum().backward()
    assert torch.isfinite(x.grad).all() and x.grad.abs().sum() > 0


# --- reports -------------------------------------------------------------------

def _samples(n, seed=0):
    rng = np.random.default_rng(seed)
    out = []
    for i in range(n):
        target = rng.random((16, 16)).astype(np.float32)
        corrupted = np.clip(target + 0.2 * rng.standard_normal((16, 16)), 0, 1)
        out.append(SliceSample(corrupted, None, target, subject_id="S", slice_index=i))
    return out


def test_identity_predictor():
    r = evaluate(None, _samples(4))
    assert r.ssim_output == r.ssim_corrupted
    r2 = evaluate(lambda s: s.corrupted, _samples(4))
    assert r2.ssim_output == r2.ssim_corrupted


def test_perfect_predictor():
    r = evaluate(lambda s: s.target, _samples(3))
    assert r.ssim_output == pytest.approx([1.0] * 3, abs=1e-9)


def test_three_samples_median():
    r = evaluate(None, _samples(3))
    assert len(r.ssim_output) == 3
    assert r.aggregates["median"] == sorted(r.ssim_output)[1]


def test_evaluate_empty():
    with pytest.raises(ValueError):
        evaluate(None, [])


def test_report_json_round_trip():
    r = evaluate(None, _samples(3), label="x")
    import json

    back = EvalReport.from_dict(json.loads(r.to_json()))
    assert back == r


def test_aggregate_single():
    r = EvalReport("a", ["1", "2", "3"], [0.1, 0.2, 0.3], [0.5, 0.7, 0.6])
    table = aggregate([r])
    assert len(table.rows) == 1
    row = table.rows[0]
    assert row["method"] == "a" and row["median"] == 0.6 and row["min"] == 0.5 and row["max"] == 0.7
    assert table.to_csv().splitlines()[0] == "method,mean,median,q1,q3,min,max"


def test_aggregate_identical_reports():
    r = EvalReport("a", ["1", "2"], [0.1, 0.2], [0.5, 0.7])
    table = aggregate([r, EvalReport("b", r.sample_ids, r.ssim_corrupted, r.ssim_output)])
    assert table.median_differences == {"a - b": 0.0}


def test_aggregate_dominance():
    rng = np.random.default_rng(0)
    base = rng.random(25)
    ids = [str(i) for i in range(25)]
    a = EvalReport("A", ids, list(base), list(base + rng.random(25) * 0.1))
    b = EvalReport("B", ids, list(base), list(base))
    table = aggregate([a, b])
    assert table.rows[0]["median"] >= table.rows[1]["median"]
    assert table.median_differences["A - B"] >= 0


def test_aggregate_rejects_mismatched_samples():
    a = EvalReport("a", ["1", "2"], [0, 0], [0, 0])
    b = EvalReport("b", ["1", "3"], [0, 0], [0, 0])
    with pytest.raises(ValueError):
        aggregate([a, b])


def test_report_length_invariant():
    with pytest.raises(ValueError):
        EvalReport("a", ["1"], [0.1, 0.2], [0.1])
