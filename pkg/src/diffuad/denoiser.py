"""Noise predictors: a time-conditioned U-Net and a closed-form Gaussian oracle."""

from __future__ import annotations

from dataclasses import asdict, dataclass
from math import gcd
from typing import Optional, Protocol

import numpy as np

from .autodiff import Tensor, ops
from .noise import keyed_rng
from .schedule import NoiseSchedule


class Denoiser(Protocol):
    def predict_eps(self, x_t: np.ndarray, t) -> np.ndarray: ...


@dataclass(frozen=True)
class UNetConfig:
    base_channels: int = 32
    depth: int = 3
    res_blocks: int = 2
    time_dim: int = 128
    groups: int = 8
    patch: int = 1  # space-to-depth factor of the input stem; 1 = full-resolution network
    padding_mode: str = "zeros"

    def __post_init__(self):
        for name in ("base_channels", "depth", "res_blocks", "time_dim", "groups", "patch"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.padding_mode not in ("zeros", "circular"):
            raise ValueError("padding_mode must be 'zeros' or 'circular'")
        if self.time_dim % 2:
            raise ValueError("time_dim must be even")

    @property
    def divisor(self) -> int:
        return self.patch * 2 ** self.depth

    def level_channels(self, level: int) -> int:
        return self.base_channels * 2 ** level

    def to_dict(self) -> dict:
        return asdict(self)


def timestep_embedding(t, dim: int, dtype=np.float32) -> np.ndarray:
    """Sinusoidal embedding ``[sin(t w_k), cos(t w_k)]`` with ``w_k = 10000^(-k/(dim/2))``."""
    t = np.atleast_1d(np.asarray(t, dtype=np.float64))
    half = dim // 2
    freqs = np.exp(-np.log(10000.0) * np.arange(half) / half)
    args = t[:, None] * freqs[None, :]
    return np.concatenate([np.sin(args), np.cos(args)], axis=1).astype(dtype)


def _groups_for(channels: int, groups: int) -> int:
    return gcd(channels, groups)


# ------------------------------------------------------------------ parameters

def _block_shapes(prefix: str, c_in: int, c_out: int, time_dim: int) -> dict[str, tuple]:
    shapes = {
        f"{prefix}.gn1.g": (c_in,), f"{prefix}.gn1.b": (c_in,),
        f"{prefix}.conv1.w": (c_out, c_in, 3, 3), f"{prefix}.conv1.b": (c_out,),
        f"{prefix}.temb.w": (c_out, time_dim), f"{prefix}.temb.b": (c_out,),
        f"{prefix}.gn2.g": (c_out,), f"{prefix}.gn2.b": (c_out,),
        f"{prefix}.conv2.w": (c_out, c_out, 3, 3), f"{prefix}.conv2.b": (c_out,),
    }
    if c_in != c_out:
        shapes[f"{prefix}.skip.w"] = (c_out, c_in, 1, 1)
        shapes[f"{prefix}.skip.b"] = (c_out,)
    return shapes


def param_shapes(config: UNetConfig) -> dict[str, tuple]:
    """Ordered name -> shape map of every weight in the network."""
    c, d = config.base_channels, config.time_dim
    shapes: dict[str, tuple] = {
        "time.fc1.w": (d, d), "time.fc1.b": (d,),
        "time.fc2.w": (d, d), "time.fc2.b": (d,),
        "in_conv.w": (c, config.patch ** 2, 3, 3), "in_conv.b": (c,),
    }
    ch = c
    for level in range(config.depth):
        out = config.level_channels(level)
        for r in range(config.res_blocks):
            shapes.update(_block_shapes(f"down{level}.res{r}", ch, out, d))
            ch = out
    shapes.update(_block_shapes("mid.res0", ch, ch, d))
    for level in reversed(range(config.depth)):
        out = config.level_channels(level)
        for r in range(config.res_blocks):
            c_in = ch + out if r == 0 else out
            shapes.update(_block_shapes(f"up{level}.res{r}", c_in, out, d))
            ch = out
    shapes.update({
        "out.gn.g": (ch,), "out.gn.b": (ch,),
        "out.conv.w": (config.patch ** 2, ch, 3, 3), "out.conv.b": (config.patch ** 2,),
    })
    return shapes


def init_params(config: UNetConfig, seed: int = 0, dtype=np.float32) -> dict[str, np.ndarray]:
    """He-normal conv/dense weights, unit norm gains, zero biases, zero output conv."""
    params = {}
    for idx, (name, shape) in enumerate(param_shapes(config).items()):
        kind = name.rsplit(".", 1)[1]
        if name.startswith("out.conv"):
            arr = np.zeros(shape)
        elif kind == "g":
            arr = np.ones(shape)
        elif kind == "b":
            arr = np.zeros(shape)
        else:
            fan_in = int(np.prod(shape[1:]))
            arr = keyed_rng(seed, "unet-init", idx).standard_normal(shape) * np.sqrt(2.0 / fan_in)
        params[name] = arr.astype(dtype)
    return params


# --------------------------------------------------------------------- forward

def _res_block(p: dict[str, Tensor], prefix: str, h: Tensor, temb: Tensor, groups: int, pad: str) -> Tensor:
    c_in = h.shape[1]
    c_out = p[f"{prefix}.conv1.w"].shape[0]
    x = ops.silu(ops.group_norm(h, _groups_for(c_in, groups), p[f"{prefix}.gn1.g"], p[f"{prefix}.gn1.b"]))
    x = ops.conv2d(x, p[f"{prefix}.conv1.w"], p[f"{prefix}.conv1.b"], padding=1, padding_mode=pad)
    x = ops.add_channel_bias(x, ops.dense(temb, p[f"{prefix}.temb.w"], p[f"{prefix}.temb.b"]))
    x = ops.silu(ops.group_norm(x, _groups_for(c_out, groups), p[f"{prefix}.gn2.g"], p[f"{prefix}.gn2.b"]))
    x = ops.conv2d(x, p[f"{prefix}.conv2.w"], p[f"{prefix}.conv2.b"], padding=1, padding_mode=pad)
    skip = h
    if f"{prefix}.skip.w" in p:
        skip = ops.conv2d(h, p[f"{prefix}.skip.w"], p[f"{prefix}.skip.b"])
    return ops.add(skip, x)


def unet_forward(params: dict[str, Tensor], x_t: Tensor, t, config: UNetConfig) -> Tensor:
    """Predict the noise in ``x_t`` of shape ``(N, 1, H, W)`` at steps ``t``."""
    n, _, h, w = x_t.shape
    if h % config.divisor or w % config.divisor:
        raise ValueError(f"spatial extents {h}x{w} not divisible by {config.divisor}")
    t = np.broadcast_to(np.asarray(t), (n,))
    emb = Tensor(timestep_embedding(t, config.time_dim, dtype=x_t.dtype))
    temb = ops.dense(emb, params["time.fc1.w"], params["time.fc1.b"])
    temb = ops.dense(ops.silu(temb), params["time.fc2.w"], params["time.fc2.b"])
    temb = ops.silu(temb)

    g, pad = config.groups, config.padding_mode
    x_in = ops.space_to_depth(x_t, config.patch) if config.patch > 1 else x_t
    hcur = ops.conv2d(x_in, params["in_conv.w"], params["in_conv.b"], padding=1, padding_mode=pad)
    skips = []
    for level in range(config.depth):
        for r in range(config.res_blocks):
            hcur = _res_block(params, f"down{level}.res{r}", hcur, temb, g, pad)
        skips.append(hcur)
        hcur = ops.down2(hcur)
    hcur = _res_block(params, "mid.res0", hcur, temb, g, pad)
    for level in reversed(range(config.depth)):
        hcur = ops.concat([ops.up2(hcur), skips[level]], axis=1)
        for r in range(config.res_blocks):
            hcur = _res_block(params, f"up{level}.res{r}", hcur, temb, g, pad)
    c = hcur.shape[1]
    hcur = ops.silu(ops.group_norm(hcur, _groups_for(c, g), params["out.gn.g"], params["out.gn.b"]))
    out = ops.conv2d(hcur, params["out.conv.w"], params["out.conv.b"], padding=1, padding_mode=pad)
    return ops.depth_to_space(out, config.patch) if config.patch > 1 else out


class UNet:
    """Trainable noise predictor; ``params`` hold leaf tensors shared with the optimizer."""

    def __init__(self, config: UNetConfig = UNetConfig(), params: Optional[dict] = None,
                 seed: int = 0, dtype=np.float32):
        self.config = config
        arrays = params if params is not None else init_params(config, seed, dtype)
        expected = param_shapes(config)
        if set(arrays) != set(expected):
            missing = sorted(set(expected) - set(arrays))
            extra = sorted(set(arrays) - set(expected))
            raise ValueError(f"parameter names do not match config (missing {missing[:3]}, extra {extra[:3]})")
        self.params: dict[str, Tensor] = {}
        for name, shape in expected.items():
            arr = np.asarray(arrays[name].data if isinstance(arrays[name], Tensor) else arrays[name])
            if arr.shape != shape:
                raise ValueError(f"{name}: shape {arr.shape} does not match config {shape}")
            self.params[name] = Tensor(arr, requires_grad=True)

    @property
    def dtype(self):
        return next(iter(self.params.values())).dtype

    def arrays(self) -> dict[str, np.ndarray]:
        return {k: v.data for k, v in self.params.items()}

    def forward(self, x_t: Tensor, t) -> Tensor:
        return unet_forward(self.params, x_t, t, self.config)

    def predict_eps(self, x_t: np.ndarray, t) -> np.ndarray:
        x = np.asarray(x_t)
        single = x.ndim == 2
        batch = x[None, None] if single else x[:, None]
        inference = {k: Tensor(v.data) for k, v in self.params.items()}
        out = unet_forward(inference, Tensor(batch.astype(self.dtype, copy=False)), t, self.config).data
        return out[0, 0] if single else out[:, 0]

    __call__ = predict_eps


class AnalyticDenoiser:
    """Optimal noise predictor for data distributed as N(m, s2 I).

    Uses the Gaussian posterior mean
    ``E[x0|x_t] = (sqrt(ab) s2 x_t + (1 - ab) m) / (ab s2 + 1 - ab)``.
    """

    def __init__(self, mean, s2: float, sched: NoiseSchedule):
        if s2 < 0:
            raise ValueError("s2 must be non-negative")
        self.mean = np.asarray(mean, dtype=np.float64)
        self.s2 = float(s2)
        self.sched = sched

    def posterior_x0(self, x_t: np.ndarray, t) -> np.ndarray:
        ab = self._ab(x_t, t)
        return (np.sqrt(ab) * self.s2 * x_t + (1 - ab) * self.mean) / (ab * self.s2 + 1 - ab)

    def _ab(self, x_t, t):
        t_arr = np.asarray(t)
        if np.any(t_arr < 1) or np.any(t_arr > self.sched.T):
            raise ValueError("analytic denoiser is defined for 1 <= t <= T")
        ab = self.sched.alpha_bar[t_arr.astype(np.int64)]
        if t_arr.ndim:
            ab = ab.reshape((-1,) + (1,) * (np.ndim(x_t) - 1))
        return ab

    def predict_eps(self, x_t: np.ndarray, t) -> np.ndarray:
        ab = self._ab(x_t, t)
        return (x_t - np.sqrt(ab) * self.posterior_x0(x_t, t)) / np.sqrt(1 - ab)

    __call__ = predict_eps


def analytic_denoiser(m, s2: float, sched: NoiseSchedule) -> AnalyticDenoiser:
    return AnalyticDenoiser(m, s2, sched)
