import numpy as np
import pytest
from scipy.integrate import quad

from diffuad.autodiff import Tensor
from diffuad.checkpoint import save_unet
from diffuad.denoiser import AnalyticDenoiser, UNet, UNetConfig
from diffuad.phantom import generate_healthy
from diffuad.schedule import linear_schedule
from diffuad.training import (Adam, TrainConfig, dihedral, epoch_images, kl_diagnostic, simplified_loss, train,
                              write_log)

SCHED = linear_schedule()
TINY = UNetConfig(base_channels=4, depth=1, res_blocks=1, time_dim=8, groups=2, patch=2)


class Oracle:
    """Knows x0, so it recovers the exact noise from x_t."""

    def __init__(self, x0):
        self.x0 = x0

    def predict_eps(self, x_t, t):
        ab = SCHED.alpha_bar[t]
        return (x_t - np.sqrt(ab) * self.x0) / np.sqrt(1 - ab)


class Zero:
    def predict_eps(self, x_t, t):
        return np.zeros_like(x_t)


def test_perfect_predictor_has_zero_loss():
    x0 = generate_healthy(0, 64).image
    assert simplified_loss(Oracle(x0), x0[None], SCHED, np.random.default_rng(0)) < 1e-12


def test_zero_predictor_loss_is_noise_variance():
    x0 = np.zeros((10_000, 1, 1))
    loss = simplified_loss(Zero(), x0, SCHED, np.random.default_rng(1))
    assert abs(loss - 1.0) < 0.02


def test_simplex_loss_draws_standardized_noise():
    x0 = np.zeros((4, 16, 16))
    assert simplified_loss(Zero(), x0, SCHED, np.random.default_rng(2), kind="simplex") == pytest.approx(1.0, abs=1e-9)


def test_loss_independent_of_batch_order():
    rng = np.random.default_rng(3)
    x0 = rng.random((400, 1, 1))
    # a mismatched prior keeps the loss data dependent while its error stays bounded at small t
    den = AnalyticDenoiser(0.5, 0.05, SCHED)
    a = np.mean([simplified_loss(den, x0, SCHED, np.random.default_rng(10 + i)) for i in range(100)])
    b = np.mean([simplified_loss(den, x0[rng.permutation(400)], SCHED, np.random.default_rng(500 + i))
                 for i in range(100)])
    assert abs(a - b) < 0.1 * max(a, b)


def test_empty_batch_rejected():
    with pytest.raises(ValueError):
        simplified_loss(Zero(), np.zeros((0, 4, 4)), SCHED, np.random.default_rng(0))


# -------------------------------------------------------------------------- KL

def test_kl_zero_for_exact_model():
    x0 = generate_healthy(1, 64).image
    eps = np.random.default_rng(4).standard_normal(x0.shape)
    for t in (1, 2, 500):
        assert kl_diagnostic(Oracle(x0), x0, t, SCHED, eps) < 1e-16


def test_kl_closed_form_offset():
    # a constant eps offset shifts the model mean by delta = beta/sqrt(alpha (1-ab)) * offset
    x0 = np.zeros((8, 8))
    eps = np.zeros((8, 8))
    t, off = 300, 0.2

    class Offset(Oracle):
        def predict_eps(self, x_t, tt):
            return super().predict_eps(x_t, tt) + off

    delta = SCHED.beta[t] / np.sqrt(SCHED.alpha[t] * (1 - SCHED.alpha_bar[t])) * off
    expected = delta**2 / (2 * SCHED.beta_tilde[t])
    assert kl_diagnostic(Offset(x0), x0, t, SCHED, eps) == pytest.approx(expected, rel=1e-10)


def test_kl_matches_quadrature():
    m1, m2, v = 0.3, 0.31, SCHED.beta_tilde[40]
    p = lambda x: np.exp(-(x - m1) ** 2 / (2 * v)) / np.sqrt(2 * np.pi * v)  # noqa: E731
    integrand = lambda x: p(x) * ((x - m2) ** 2 - (x - m1) ** 2) / (2 * v)  # noqa: E731
    sd = np.sqrt(v)
    numeric = quad(integrand, m1 - 40 * sd, m1 + 40 * sd, epsabs=1e-14, limit=200)[0]
    assert abs(numeric - (m1 - m2) ** 2 / (2 * v)) < 1e-8


def test_kl_rejects_out_of_range_step():
    with pytest.raises(ValueError):
        kl_diagnostic(Zero(), np.zeros((2, 2)), 0, SCHED, np.zeros((2, 2)))


# ------------------------------------------------------------------- optimizer

def test_adam_first_step_is_lr_times_sign():
    p = Tensor(np.array([1.0, -2.0]), requires_grad=True)
    p.grad = np.array([0.5, -3.0])
    opt = Adam({"p": p}, lr=0.1)
    opt.step()
    assert np.allclose(p.data, [0.9, -1.9], atol=1e-7)


# ------------------------------------------------------------------------ loop

def test_config_validation():
    for bad in ({"epochs": 0}, {"batch_size": 0}, {"learning_rate": 0.0}, {"noise_kind": "pink"}):
        with pytest.raises(ValueError):
            TrainConfig(**bad)


def test_augmentation_superset_and_range():
    imgs = np.random.default_rng(5).random((5, 8, 8))
    pool = epoch_images(imgs, 1, 0, True)
    assert len(pool) == 10 and np.array_equal(pool[:5], imgs)
    assert pool.min() >= imgs.min() and pool.max() <= imgs.max()
    for k in range(8):
        assert np.array_equal(np.sort(dihedral(imgs[0], k).ravel()), np.sort(imgs[0].ravel()))
    assert len({dihedral(imgs[0], k).tobytes() for k in range(8)}) == 8


def test_two_epoch_runs_are_bit_identical(tmp_path):
    imgs = np.stack([generate_healthy(i, 64).image for i in range(6)]).astype(np.float32)
    cfg = TrainConfig(epochs=2, batch_size=4, learning_rate=1e-3, seed=7, unet=TINY)
    for name in ("a", "b"):
        train(cfg, imgs, SCHED, checkpoint_path=tmp_path / f"{name}.uadc", log_path=tmp_path / f"{name}.csv")
    assert (tmp_path / "a.uadc").read_bytes() == (tmp_path / "b.uadc").read_bytes()
    assert (tmp_path / "a.csv").read_text().splitlines()[0] == "epoch,loss,kl,seconds"


def test_training_does_not_mutate_inputs():
    imgs = np.stack([generate_healthy(i, 64).image for i in range(3)]).astype(np.float32)
    before = imgs.copy()
    train(TrainConfig(epochs=1, batch_size=2, unet=TINY, log_kl=True), imgs, SCHED)
    assert np.array_equal(imgs, before)


def test_non_finite_loss_aborts_with_dump(tmp_path):
    imgs = np.stack([generate_healthy(i, 64).image for i in range(2)]).astype(np.float32)
    model = UNet(TINY)
    model.params["out.conv.b"].data[:] = np.nan
    with pytest.raises(FloatingPointError, match="non-finite"):
        train(TrainConfig(epochs=1, batch_size=2, unet=TINY), imgs, SCHED, model=model,
              dump_path=tmp_path / "dump.npz")
    assert set(np.load(tmp_path / "dump.npz").files) >= {"epoch", "t", "loss"}


def test_range_check():
    with pytest.raises(ValueError, match="range"):
        train(TrainConfig(epochs=1, unet=TINY), np.full((2, 16, 16), 1.5, np.float32), SCHED)


def test_overfit_single_image():
    img = generate_healthy(0, 64).image.astype(np.float32)
    imgs = np.repeat(img[None], 16, axis=0)
    cfg = TrainConfig(epochs=200, batch_size=16, learning_rate=5e-3, seed=0, augment=False,
                      unet=UNetConfig(base_channels=16, depth=2, res_blocks=1, time_dim=32, patch=2))
    _, log = train(cfg, imgs, SCHED)  # one batch per epoch: 200 optimizer steps
    assert np.mean([r.loss for r in log[-20:]]) < 0.05


def test_loss_halves_within_twenty_epochs():
    imgs = np.stack([generate_healthy(1000 + i, 64).image for i in range(128)]).astype(np.float32)
    cfg = TrainConfig(epochs=20, batch_size=16, learning_rate=5e-4, seed=0,
                      unet=UNetConfig(base_channels=32, depth=2, res_blocks=1, time_dim=32, patch=4))
    _, log = train(cfg, imgs, SCHED)
    assert log[-1].loss < 0.5 * log[0].loss


def test_log_writer(tmp_path):
    from diffuad.training import TrainLogRow

    write_log(tmp_path / "l.csv", [TrainLogRow(1, 0.5, None, 1.0), TrainLogRow(2, 0.25, 0.1, 1.0)])
    lines = (tmp_path / "l.csv").read_text().splitlines()
    assert lines[1] == "1,0.5,,1.000" and lines[2] == "2,0.25,0.1,1.000"


def test_checkpoint_written_after_training(tmp_path):
    imgs = np.stack([generate_healthy(i, 64).image for i in range(2)]).astype(np.float32)
    model, _ = train(TrainConfig(epochs=1, batch_size=2, unet=TINY), imgs, SCHED,
                     checkpoint_path=tmp_path / "m.uadc")
    save_unet(tmp_path / "n.uadc", model, {"train": TrainConfig(epochs=1, batch_size=2, unet=TINY).to_dict()})
    assert (tmp_path / "m.uadc").read_bytes() == (tmp_path / "n.uadc").read_bytes()


def test_weight_average_tracks_parameters():
    from diffuad.training import WeightAverage

    p = {"w": Tensor(np.zeros(3), requires_grad=True)}
    avg = WeightAverage(p, 0.5)
    p["w"].data[:] = 1.0
    avg.update(p)  # warm-up decay min(0.5, 2/11)
    assert np.allclose(avg.shadow["w"], 1 - 2 / 11)
    avg.copy_to(p)
    assert np.allclose(p["w"].data, 1 - 2 / 11)
    with pytest.raises(ValueError):
        TrainConfig(ema_decay=1.0)


def test_averaged_training_is_deterministic(tmp_path):
    imgs = np.stack([generate_healthy(i, 64).image for i in range(4)]).astype(np.float32)
    cfg = TrainConfig(epochs=2, batch_size=2, learning_rate=1e-3, ema_decay=0.9, unet=TINY)
    a, _ = train(cfg, imgs, SCHED)
    b, _ = train(cfg, imgs, SCHED)
    raw, _ = train(TrainConfig(epochs=2, batch_size=2, learning_rate=1e-3, unet=TINY), imgs, SCHED)
    assert all(np.array_equal(a.arrays()[k], b.arrays()[k]) for k in a.arrays())
    assert any(not np.array_equal(a.arrays()[k], raw.arrays()[k]) for k in a.arrays())
