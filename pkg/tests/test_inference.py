import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from diffuad.denoiser import AnalyticDenoiser
from diffuad.inference import (anoddpm_reconstruct, anomaly_map, anomaly_maps, autoddpm_reconstruct,
                               calibrate_threshold, image_score, inpaint, to_metric_range)
from diffuad.noise import batch_noise
from diffuad.phantom import generate_healthy
from diffuad.schedule import forward_sample, linear_schedule, reverse_step

SCHED = linear_schedule()
DEN = AnalyticDenoiser(0.5, 0.05, SCHED)


def _img(seed=0, res=32):
    p = generate_healthy(seed, 64)
    return p.image[::64 // res, ::64 // res].copy(), p.brain_mask[::64 // res, ::64 // res].copy()


class Counting:
    def __init__(self, inner):
        self.inner, self.calls = inner, 0

    def predict_eps(self, x, t):
        self.calls += 1
        return self.inner.predict_eps(x, t)


# -------------------------------------------------------------------- AnoDDPM

def test_t0_is_identity():
    x, _ = _img()
    den = Counting(DEN)
    res = anoddpm_reconstruct(den, x, 0, sched=SCHED)
    assert np.array_equal(res.final, x) and den.calls == 0


@pytest.mark.parametrize("kind", ["gaussian", "simplex"])
def test_reconstruction_deterministic_and_in_range(kind):
    x, _ = _img()
    xm = 2 * x - 1 if kind == "simplex" else x
    a = anoddpm_reconstruct(DEN, xm, 50, kind, seed=3, sched=SCHED)
    b = anoddpm_reconstruct(DEN, xm, 50, kind, seed=3, sched=SCHED)
    assert np.array_equal(a.final, b.final)
    lo = -1 if kind == "simplex" else 0
    assert a.final.min() >= lo and a.final.max() <= 1
    assert not np.array_equal(a.final, anoddpm_reconstruct(DEN, xm, 50, kind, seed=4, sched=SCHED).final)


def test_reconstruction_independent_of_batching():
    xs = np.stack([_img(s)[0] for s in range(3)])
    full = anoddpm_reconstruct(DEN, xs, 20, seed=1, sched=SCHED).final
    one = anoddpm_reconstruct(DEN, xs[2], 20, seed=1, sched=SCHED, ids=[2]).final
    assert np.array_equal(full[2], one)


def test_trace_has_one_state_per_step():
    x, _ = _img()
    res = anoddpm_reconstruct(DEN, x, 7, sched=SCHED, keep_trace=True)
    assert len(res.trace) == 7 and res.trace[0].shape == x.shape


def test_chain_matches_hand_rolled_loop():
    x, _ = _img()
    eps = batch_noise("gaussian", x.shape, 9, "anoddpm-start", [0], 30)[0]
    xt = forward_sample(x, 30, eps, SCHED)
    for t in range(30, 0, -1):
        z = batch_noise("gaussian", x.shape, 9, "anoddpm-z", [0], t)[0] if t > 1 else 0 * x
        xt = reverse_step(xt, t, DEN.predict_eps(xt, t), z, SCHED)
    assert np.allclose(anoddpm_reconstruct(DEN, x, 30, seed=9, sched=SCHED).final, np.clip(xt, 0, 1), atol=1e-12)


def test_reconstruction_errors():
    x, _ = _img()
    with pytest.raises(ValueError):
        anoddpm_reconstruct(DEN, x, 10)
    with pytest.raises(ValueError):
        anoddpm_reconstruct(DEN, x, 1001, sched=SCHED)
    with pytest.raises(ValueError, match="range"):
        anoddpm_reconstruct(DEN, x - 0.5, 10, sched=SCHED)
    with pytest.raises(ValueError):
        anoddpm_reconstruct(DEN, x, 10, kind="pink", sched=SCHED)

    class Broken:
        def predict_eps(self, x, t):
            return np.full_like(x, np.nan)

    with pytest.raises(FloatingPointError):
        anoddpm_reconstruct(Broken(), x, 3, sched=SCHED)


def test_to_metric_range():
    s = np.array([[-1.0, 0.0, 1.2]])
    assert np.array_equal(to_metric_range(s, "simplex"), [[0.0, 0.5, 1.0]])
    assert np.array_equal(to_metric_range(np.array([[0.2]]), "gaussian"), [[0.2]])


# ----------------------------------------------------------------------- maps

@pytest.mark.parametrize("mode", ["mae", "perc", "product"])
def test_maps_vanish_for_perfect_reconstruction(mode):
    x, brain = _img()
    m = anomaly_maps(x, x, mode, brain_mask=brain)
    assert m.shape == x.shape and not m.any()


def test_single_pixel_mae_map():
    x = np.zeros((16, 16))
    y = x.copy()
    y[3, 4] = 0.7
    m = anomaly_maps(x, y, "mae")
    assert m[3, 4] == pytest.approx(0.7) and np.count_nonzero(m) == 1


def test_product_annihilated_by_either_factor():
    x = np.random.default_rng(0).random((16, 16))
    y = x.copy()
    y[5:9, 5:9] += 0.2
    prod = anomaly_maps(x, y, "product")
    mae = anomaly_maps(x, y, "mae")
    assert not prod[mae == 0].any()
    assert prod.min() >= 0 and prod.max() <= 1


def test_maps_zero_outside_brain():
    x, brain = _img()
    y = np.clip(x + 0.1, 0, 1)
    for mode in ("mae", "perc", "product"):
        assert not anomaly_maps(x, y, mode, brain_mask=brain)[~brain].any()


def test_map_mode_validation():
    with pytest.raises(ValueError, match="map mode"):
        anomaly_maps(np.zeros((8, 8)), np.zeros((8, 8)), "ssim")
    with pytest.raises(ValueError):
        anomaly_maps(np.zeros((8, 8)), np.zeros((8, 9)), "mae")


def test_image_score_examples():
    assert image_score(np.array([[0, 0], [0, 1.0]]), 0.25) == 1.0
    assert image_score(np.full((10, 10), 0.3), 0.01) == pytest.approx(0.3)
    assert image_score(np.arange(4.0).reshape(2, 2), 1.0) == 1.5
    assert image_score(np.arange(4.0).reshape(2, 2), 0.5) == 2.5
    assert image_score(np.arange(4.0).reshape(2, 2), 1.0, mask=np.array([[1, 0], [0, 1]], bool)) == 1.5
    with pytest.raises(ValueError):
        image_score(np.zeros((2, 2)), 0.0)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31), st.floats(0.001, 1.0))
def test_image_score_bounded_by_map(seed, frac):
    m = np.random.default_rng(seed).random((8, 8))
    s = image_score(m, frac)
    assert m.mean() - 1e-12 <= s <= m.max() + 1e-12


def test_anomaly_map_result():
    x, brain = _img()
    r = anomaly_map(x, np.clip(x + 0.05, 0, 1), "mae", brain_mask=brain)
    assert r.mode == "mae" and r.image_score == pytest.approx(0.05, abs=1e-9)


# ------------------------------------------------------------------- AutoDDPM

def test_autoddpm_requires_threshold():
    x, _ = _img()
    with pytest.raises(ValueError, match="threshold"):
        autoddpm_reconstruct(DEN, x, 10, sched=SCHED)


def test_autoddpm_empty_mask_returns_input():
    x, brain = _img()
    res = autoddpm_reconstruct(DEN, x, 10, sched=SCHED, threshold=np.inf, brain_mask=brain)
    assert not res.mask.any() and np.array_equal(res.final, x)


def test_autoddpm_preserves_unmasked_pixels_bitwise():
    xs = np.stack([_img(s)[0] for s in range(2)])
    brain = np.stack([_img(s)[1] for s in range(2)])
    res = autoddpm_reconstruct(DEN, xs, 25, seed=2, sched=SCHED, threshold=0.05, brain_mask=brain, resample_R=2)
    assert res.mask.any() and not res.mask.all()
    assert np.array_equal(res.final[~res.mask], xs[~res.mask])
    assert res.final.min() >= 0 and res.final.max() <= 1
    assert not (res.mask & ~brain).any()


def test_autoddpm_deterministic():
    x, brain = _img()
    kw = dict(seed=5, sched=SCHED, threshold=0.05, brain_mask=brain, resample_R=2)
    assert np.array_equal(autoddpm_reconstruct(DEN, x, 15, **kw).final, autoddpm_reconstruct(DEN, x, 15, **kw).final)


def test_full_mask_single_resample_is_plain_chain():
    x, _ = _img()
    xb = x[None]
    start = forward_sample(xb, 20, np.random.default_rng(0).standard_normal(xb.shape), SCHED)
    out = inpaint(DEN, start, xb, np.ones_like(xb, bool), 20, 4, SCHED, [0], resample_R=1)
    ref = start
    for t in range(20, 0, -1):
        z = batch_noise("gaussian", x.shape, 4, "autoddpm-z", [0], t, 0) if t > 1 else 0 * xb
        ref = reverse_step(ref, t, DEN.predict_eps(ref, t), z, SCHED)
    assert np.array_equal(out, ref)


def test_resampling_multiplies_model_calls():
    x, _ = _img()
    xb = x[None]
    mask = np.zeros_like(xb, bool)
    mask[:, 8:16, 8:16] = True
    den = Counting(DEN)
    inpaint(den, forward_sample(xb, 10, np.zeros_like(xb), SCHED), xb, mask, 10, 0, SCHED, [0], resample_R=3)
    assert den.calls == 30
    with pytest.raises(ValueError):
        inpaint(den, xb, xb, mask, 10, 0, SCHED, [0], resample_R=0)


def test_calibrated_threshold_is_quantile():
    xs = np.stack([_img(s)[0] for s in range(3)])
    brain = np.stack([_img(s)[1] for s in range(3)])
    thr = calibrate_threshold(DEN, xs, 10, SCHED, q=0.9, seed=1, brain_masks=brain)
    coarse = anoddpm_reconstruct(DEN, xs, 10, seed=1, sched=SCHED).final
    vals = anomaly_maps(xs, coarse, "product", brain_mask=brain)[brain]
    assert thr == pytest.approx(np.quantile(vals, 0.9))
    assert 0.08 < np.mean(vals > thr) < 0.12
    with pytest.raises(ValueError):
        calibrate_threshold(DEN, xs, 10, SCHED, q=1.0)
