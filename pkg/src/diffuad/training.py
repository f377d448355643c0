"""Noise-prediction training with Adam, plus the per-step KL diagnostic."""

from __future__ import annotations

import csv
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from .autodiff import Tensor, ops
from .denoiser import UNet, UNetConfig
from .noise import NOISE_KINDS, batch_noise, derive_seed, keyed_rng
from .phantom import model_range
from .schedule import NoiseSchedule, forward_sample, posterior_mean, reverse_mean


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 20
    batch_size: int = 16
    learning_rate: float = 1e-4
    betas: tuple = (0.9, 0.999)
    seed: int = 0
    noise_kind: str = "gaussian"
    resolution: int = 64
    augment: bool = True
    log_kl: bool = False
    ema_decay: float = 0.0  # 0 keeps the raw weights; otherwise the returned model holds the weight average
    unet: UNetConfig = field(default_factory=UNetConfig)

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be > 0")
        if len(self.betas) != 2 or not all(0 <= b < 1 for b in self.betas):
            raise ValueError("betas must be two values in [0, 1)")
        if not 0 <= self.ema_decay < 1:
            raise ValueError("ema_decay must lie in [0, 1)")
        if self.noise_kind not in NOISE_KINDS:
            raise ValueError(f"unknown noise kind {self.noise_kind!r}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["betas"] = list(self.betas)
        return d


@dataclass
class TrainLogRow:
    epoch: int
    loss: float
    kl: Optional[float]
    seconds: float


# ---------------------------------------------------------------- objectives

def simplified_loss(denoiser, x0, sched: NoiseSchedule, rng: np.random.Generator,
                    kind: str = "gaussian") -> float:
    """Monte-Carlo estimate of E ||eps - eps_hat(x_t, t)||^2 with t ~ U{1..T}."""
    x0 = np.asarray(x0, dtype=np.float64)
    if x0.ndim == 2:
        x0 = x0[None]
    if not len(x0):
        raise ValueError("empty batch")
    t = rng.integers(1, sched.T + 1, size=len(x0))
    if kind == "gaussian":
        eps = rng.standard_normal(x0.shape)
    else:
        eps = batch_noise(kind, x0.shape[1:], int(rng.integers(2**63)), "loss", range(len(x0)))
    x_t = forward_sample(x0, t, eps, sched)
    total = 0.0
    for i in range(len(x0)):
        pred = np.asarray(denoiser.predict_eps(x_t[i], int(t[i])), dtype=np.float64)
        total += float(((eps[i] - pred) ** 2).sum())
    return total / eps.size


def _kl_variance(t: int, sched: NoiseSchedule) -> float:
    # beta_tilde_1 is 0: the t=1 term borrows beta_tilde_2 so the diagnostic stays finite
    return float(sched.beta_tilde[t] if t > 1 else sched.beta_tilde[2])


def kl_diagnostic(denoiser, x0, t: int, sched: NoiseSchedule, eps) -> float:
    """Per-pixel mean KL(q(x_{t-1}|x_t,x0) || p(x_{t-1}|x_t)) with shared variance."""
    t = sched.check_t(t, lo=1)
    x0 = np.asarray(x0, dtype=np.float64)
    x_t = forward_sample(x0, t, np.asarray(eps, dtype=np.float64), sched)
    eps_hat = np.asarray(denoiser.predict_eps(x_t, t), dtype=np.float64)
    delta = posterior_mean(x0, x_t, t, sched) - reverse_mean(x_t, t, eps_hat, sched)
    return float((delta * delta).mean() / (2.0 * _kl_variance(t, sched)))


# ----------------------------------------------------------------- optimizer

class Adam:
    def __init__(self, params: dict[str, Tensor], lr: float = 1e-4, betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = params
        self.lr, self.b1, self.b2, self.eps = lr, betas[0], betas[1], eps
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.step_count = 0

    def step(self) -> None:
        self.step_count += 1
        c1 = 1.0 - self.b1 ** self.step_count
        c2 = 1.0 - self.b2 ** self.step_count
        for k, p in self.params.items():
            g = p.grad
            if g is None:
                continue
            m, v = self.m[k], self.v[k]
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            p.data -= (self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(p.data.dtype)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None


class WeightAverage:
    """Exponential moving average of parameters with a short warm-up.

    The effective decay at update ``n`` is ``min(decay, (1 + n) / (10 + n))``
    so early averages are not dominated by the initial weights.
    """

    def __init__(self, params: dict[str, Tensor], decay: float):
        self.decay = decay
        self.shadow = {k: p.data.copy() for k, p in params.items()}
        self.updates = 0

    def update(self, params: dict[str, Tensor]) -> None:
        self.updates += 1
        d = min(self.decay, (1.0 + self.updates) / (10.0 + self.updates))
        for k, p in params.items():
            s = self.shadow[k]
            s *= d
            s += (1.0 - d) * p.data

    def copy_to(self, params: dict[str, Tensor]) -> None:
        for k, p in params.items():
            p.data[...] = self.shadow[k]


# ---------------------------------------------------------------------- loop

def dihedral(image: np.ndarray, k: int) -> np.ndarray:
    """Element ``k`` in 0..7 of the square's symmetry group: k % 4 quarter turns, flipped if k >= 4."""
    out = np.rot90(image, k % 4, axes=(-2, -1))
    return np.flip(out, axis=-1) if k >= 4 else out


def epoch_images(images: np.ndarray, epoch: int, seed: int, augment: bool) -> np.ndarray:
    """Originals plus (with augmentation) one random non-identity dihedral copy of each."""
    if not augment:
        return images
    rng = keyed_rng(seed, "augment", epoch)
    ks = rng.integers(1, 8, size=len(images))
    copies = np.stack([dihedral(img, int(k)) for img, k in zip(images, ks)])
    return np.concatenate([images, copies])


def _batch_noise_eps(kind: str, shape, seed: int, epoch: int, positions: np.ndarray, dtype) -> np.ndarray:
    return batch_noise(kind, shape, seed, "train-eps", positions, epoch, dtype=dtype)


def _dump_state(path: Optional[Path], **state) -> str:
    if path is None:
        return ""
    path.parent.mkdir(parents=True, exist_ok=True)
    np.savez(path, **{k: np.asarray(v) for k, v in state.items()})
    return f"; state dumped to {path}"


def train_step(model: UNet, opt: Adam, x0: np.ndarray, t: np.ndarray, eps: np.ndarray,
               sched: NoiseSchedule) -> float:
    x_t = forward_sample(x0, t, eps, sched)
    opt.zero_grad()
    pred = model.forward(Tensor(x_t[:, None]), t)
    loss = ops.mse(pred, eps[:, None])
    loss.backward()
    opt.step()
    return float(loss.data)


def train(config: TrainConfig, images: np.ndarray, sched: NoiseSchedule, model: Optional[UNet] = None,
          log_path=None, checkpoint_path=None, dump_path=None,
          on_epoch: Optional[Callable[[TrainLogRow, UNet], None]] = None) -> tuple[UNet, list[TrainLogRow]]:
    """Fit ``model`` (fresh if omitted) to healthy ``images`` in the model range.

    Item ``i`` of epoch ``e``'s presentation order draws its step and noise
    from streams keyed by ``(seed, e, i)``, so the batch size only changes how
    gradients are grouped, never which noise is drawn.
    """
    images = np.asarray(images)
    if images.ndim != 3 or not len(images):
        raise ValueError("images must be a non-empty (N, H, W) array")
    lo, hi = model_range(config.noise_kind)
    if images.min() < lo or images.max() > hi:
        raise ValueError(f"training images outside the {config.noise_kind} model range [{lo}, {hi}]")
    model = model or UNet(config.unet, seed=derive_seed(config.seed, "unet"))
    dtype = model.dtype
    data = images.astype(dtype)  # private copy; callers' arrays are never touched
    opt = Adam(model.params, config.learning_rate, config.betas)
    ema = WeightAverage(model.params, config.ema_decay) if config.ema_decay > 0 else None
    log: list[TrainLogRow] = []
    probe = data[: min(8, len(data))]
    for epoch in range(1, config.epochs + 1):
        start = time.perf_counter()
        pool = epoch_images(data, epoch, config.seed, config.augment)
        order = keyed_rng(config.seed, "shuffle", epoch).permutation(len(pool))
        t_all = keyed_rng(config.seed, "train-t", epoch).integers(1, sched.T + 1, size=len(pool))
        losses = []
        for b in range(0, len(pool), config.batch_size):
            pos = np.arange(b, min(b + config.batch_size, len(pool)))
            x0 = pool[order[pos]]
            eps = _batch_noise_eps(config.noise_kind, x0.shape[1:], config.seed, epoch, pos, dtype)
            t = t_all[pos]
            loss = train_step(model, opt, x0, t, eps, sched)
            if not np.isfinite(loss):
                where = _dump_state(Path(dump_path) if dump_path else None, epoch=epoch, batch_start=b,
                                    t=t, items=order[pos], loss=loss, step=opt.step_count)
                raise FloatingPointError(f"non-finite loss {loss} at epoch {epoch}, step {opt.step_count}, "
                                         f"t={t.tolist()}{where}")
            if ema is not None:
                ema.update(model.params)
            losses.append(loss * len(pos))
        kl = None
        if config.log_kl:
            rng = keyed_rng(config.seed, "kl-probe", epoch)
            ts = rng.integers(1, sched.T + 1, size=len(probe))
            kl = float(np.mean([kl_diagnostic(model, probe[i], int(ts[i]), sched,
                                              rng.standard_normal(probe[i].shape)) for i in range(len(probe))]))
        row = TrainLogRow(epoch, float(np.sum(losses) / len(pool)), kl, time.perf_counter() - start)
        log.append(row)
        if log_path is not None:
            write_log(log_path, log)
        if on_epoch is not None:
            on_epoch(row, model)
    if ema is not None:
        ema.copy_to(model.params)
    if checkpoint_path is not None:
        from .checkpoint import save_unet

        save_unet(checkpoint_path, model, {"train": config.to_dict()})
    return model, log


def write_log(path, rows: list[TrainLogRow]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "loss", "kl", "seconds"])
        for r in rows:
            w.writerow([r.epoch, repr(r.loss), "" if r.kl is None else repr(r.kl), f"{r.seconds:.3f}"])
