import struct

import numpy as np
import pytest

from diffuad.autodiff import Tensor, ops
from diffuad.checkpoint import (CheckpointError, dumps_checkpoint, load_unet, loads_checkpoint, save_unet)
from diffuad.denoiser import AnalyticDenoiser, UNet, UNetConfig, init_params, param_shapes, unet_forward
from diffuad.schedule import forward_sample, linear_schedule

SCHED = linear_schedule()
TINY = UNetConfig(base_channels=4, depth=1, res_blocks=1, time_dim=8, groups=2)


def _randomized(config, seed=0, dtype=np.float64):
    params = init_params(config, seed, dtype)
    rng = np.random.default_rng(seed)
    for k in params:  # break the zero/one init so every path carries gradient
        params[k] = (params[k] + 0.1 * rng.standard_normal(params[k].shape)).astype(dtype)
    return params


@pytest.mark.parametrize("res", [64, 128])
def test_output_shape_and_zero_init(res):
    cfg = UNetConfig(base_channels=8, depth=2, res_blocks=1, time_dim=16, groups=4)
    net = UNet(cfg, seed=1)
    x = np.random.default_rng(0).random((2, res, res)).astype(np.float32)
    out = net.predict_eps(x, 10)
    assert out.shape == x.shape
    assert not out.any()
    assert net.predict_eps(x[0], 10).shape == (res, res)


def test_indivisible_extent_rejected():
    with pytest.raises(ValueError, match="divisible"):
        UNet(TINY).predict_eps(np.zeros((1, 15, 16)), 3)


def test_patch_stem_shapes():
    cfg = UNetConfig(base_channels=8, depth=2, res_blocks=1, time_dim=16, patch=4)
    net = UNet(cfg, params=_randomized(cfg, dtype=np.float32))
    assert cfg.divisor == 16
    assert net.predict_eps(np.zeros((3, 64, 64), np.float32), 5).shape == (3, 64, 64)


def test_loss_gradient_matches_finite_differences():
    cfg = UNetConfig(base_channels=4, depth=1, res_blocks=1, time_dim=8, groups=2)
    params = _randomized(cfg, 3)
    rng = np.random.default_rng(4)
    x0 = rng.random((2, 16, 16))
    eps = rng.standard_normal((2, 16, 16))
    t = np.array([30, 700])
    xt = forward_sample(x0, t, eps, SCHED)

    def loss_value(arrs):
        out = unet_forward({k: Tensor(v) for k, v in arrs.items()}, Tensor(xt[:, None]), t, cfg)
        return float(((out.data - eps[:, None]) ** 2).mean())

    leaves = {k: Tensor(v.copy(), requires_grad=True) for k, v in params.items()}
    ops.mse(unet_forward(leaves, Tensor(xt[:, None]), t, cfg), Tensor(eps[:, None])).backward()
    h = 1e-6
    for name, arr in params.items():
        flat = arr.reshape(-1)
        picks = rng.choice(flat.size, size=min(3, flat.size), replace=False)
        for i in picks:
            old = flat[i]
            flat[i] = old + h
            up = loss_value(params)
            flat[i] = old - h
            down = loss_value(params)
            flat[i] = old
            num = (up - down) / (2 * h)
            ana = leaves[name].grad.reshape(-1)[i]
            assert abs(num - ana) <= 1e-3 * max(abs(num), abs(ana)) + 1e-9, name


def test_shift_covariance_with_circular_padding():
    cfg = UNetConfig(base_channels=4, depth=1, res_blocks=1, time_dim=8, groups=2, padding_mode="circular")
    net = UNet(cfg, params=_randomized(cfg, 5))
    x = np.random.default_rng(6).random((1, 16, 16))
    out = net.predict_eps(x, 100)
    shifted = net.predict_eps(np.roll(x, 2, axis=-1), 100)
    assert np.abs(np.roll(out, 2, axis=-1) - shifted)[:, 2:-2, 2:-2].mean() < 1e-3


def test_param_name_validation():
    params = init_params(TINY)
    params.pop("out.conv.b")
    with pytest.raises(ValueError, match="missing"):
        UNet(TINY, params=params)
    bad = init_params(TINY)
    bad["in_conv.w"] = np.zeros((1, 1, 3, 3), np.float32)
    with pytest.raises(ValueError, match="shape"):
        UNet(TINY, params=bad)


# -------------------------------------------------------------------- analytic

def test_analytic_point_mass_limit():
    den = AnalyticDenoiser(0.4, 0.0, SCHED)
    xt = np.linspace(-2, 2, 7)
    ab = SCHED.alpha_bar[250]
    assert np.allclose(den.predict_eps(xt, 250), (xt - np.sqrt(ab) * 0.4) / np.sqrt(1 - ab), atol=1e-12)


def test_analytic_standard_normal_case():
    den = AnalyticDenoiser(0.0, 1.0, SCHED)
    xt = np.linspace(-3, 3, 9)
    for t in (1, 500, 1000):
        assert np.allclose(den.predict_eps(xt, t), np.sqrt(1 - SCHED.alpha_bar[t]) * xt, atol=1e-12)


@pytest.mark.parametrize("m,s2,t,xt", [(0.5, 0.01, 40, 0.3), (-0.2, 0.5, 300, 1.1), (0.0, 2.0, 900, -0.7)])
def test_analytic_matches_grid_quadrature(m, s2, t, xt):
    ab = SCHED.alpha_bar[t]
    sd = np.sqrt(s2)
    grid = np.linspace(m - 12 * sd, m + 12 * sd, 2001)
    logw = -((grid - m) ** 2) / (2 * s2) - (xt - np.sqrt(ab) * grid) ** 2 / (2 * (1 - ab))
    w = np.exp(logw - logw.max())
    post = (w * grid).sum() / w.sum()
    eps_ref = (xt - np.sqrt(ab) * post) / np.sqrt(1 - ab)
    assert abs(AnalyticDenoiser(m, s2, SCHED).predict_eps(np.array(xt), t) - eps_ref) < 1e-6


def test_analytic_rejects_t0_and_negative_variance():
    with pytest.raises(ValueError):
        AnalyticDenoiser(0.0, 1.0, SCHED).predict_eps(np.zeros(2), 0)
    with pytest.raises(ValueError):
        AnalyticDenoiser(0.0, -1.0, SCHED)


# ------------------------------------------------------------------ checkpoint

def test_checkpoint_roundtrip_bit_exact(tmp_path):
    net = UNet(TINY, params=_randomized(TINY, 2, np.float32))
    path = tmp_path / "m.uadc"
    save_unet(path, net)
    back, cfg = load_unet(path)
    assert back.config == TINY
    for k, v in net.arrays().items():
        assert np.array_equal(v, back.arrays()[k])
    save_unet(tmp_path / "again.uadc", back)
    assert path.read_bytes() == (tmp_path / "again.uadc").read_bytes()


def _blob():
    return dumps_checkpoint({"kind": "unet", "unet": TINY.to_dict()}, init_params(TINY))


def test_checkpoint_bad_magic():
    with pytest.raises(CheckpointError, match="magic"):
        loads_checkpoint(b"NOPE" + _blob()[4:])


def test_checkpoint_bad_version():
    raw = _blob()
    with pytest.raises(CheckpointError, match="version"):
        loads_checkpoint(raw[:4] + struct.pack("<H", 9) + raw[6:])


def test_checkpoint_truncated():
    with pytest.raises(CheckpointError, match="truncated"):
        loads_checkpoint(_blob()[:-10])


def test_checkpoint_unknown_tensor(tmp_path):
    params = init_params(TINY)
    params["stray.w"] = np.zeros(3, np.float32)
    (tmp_path / "x.uadc").write_bytes(dumps_checkpoint({"kind": "unet", "unet": TINY.to_dict()}, params))
    with pytest.raises(CheckpointError, match="unknown"):
        load_unet(tmp_path / "x.uadc")


def test_checkpoint_config_mismatch(tmp_path):
    deep = UNetConfig(base_channels=4, depth=3, res_blocks=1, time_dim=8, groups=2)
    save_unet(tmp_path / "deep.uadc", UNet(deep))
    shallow = UNetConfig(base_channels=4, depth=2, res_blocks=1, time_dim=8, groups=2)
    with pytest.raises(CheckpointError, match="match"):
        load_unet(tmp_path / "deep.uadc", expected=shallow)
    assert set(param_shapes(deep)) != set(param_shapes(shallow))
