"""Reconstruction and classification metrics."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
from scipy.stats import rankdata

from .autodiff import Tensor, ops
from .noise import keyed_rng


def _same_shape(x: np.ndarray, y: np.ndarray) -> None:
    if x.shape != y.shape:
        raise ValueError(f"shape mismatch: {x.shape} vs {y.shape}")


def mae(x, y, mask: Optional[np.ndarray] = None) -> float:
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    _same_shape(x, y)
    diff = np.abs(x - y)
    if mask is not None:
        diff = diff[np.broadcast_to(np.asarray(mask, dtype=bool), diff.shape)]
        if not diff.size:
            raise ValueError("mask selects no pixels")
    return float(diff.mean())


# ------------------------------------------------------------------------ SSIM

def gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    r = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(r * r) / (2.0 * sigma * sigma))
    return g / g.sum()


def _filter_valid(img: np.ndarray, g: np.ndarray) -> np.ndarray:
    k = len(g)
    rows = np.lib.stride_tricks.sliding_window_view(img, k, axis=-2)
    tmp = np.einsum("...ijk,k->...ij", rows, g)
    cols = np.lib.stride_tricks.sliding_window_view(tmp, k, axis=-1)
    return cols @ g


def ssim_map(x, y, window_size: int = 11, sigma: float = 1.5, C1: float = 1e-4, C2: float = 9e-4) -> np.ndarray:
    """Per-window SSIM over every window that fits entirely inside the image."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    _same_shape(x, y)
    if x.ndim < 2 or min(x.shape[-2:]) < window_size:
        raise ValueError(f"window {window_size} larger than image {x.shape[-2:]}")
    g = gaussian_window(window_size, sigma)
    mx, my = _filter_valid(x, g), _filter_valid(y, g)
    sxx = _filter_valid(x * x, g) - mx * mx
    syy = _filter_valid(y * y, g) - my * my
    sxy = _filter_valid(x * y, g) - mx * my
    num = (2.0 * mx * my + C1) * (2.0 * sxy + C2)
    den = (mx * mx + my * my + C1) * (sxx + syy + C2)
    return num / den


def ssim(x, y, window_size: int = 11, sigma: float = 1.5, C1: float = 1e-4, C2: float = 9e-4,
         mask: Optional[np.ndarray] = None) -> float:
    """Mean SSIM; with ``mask``, only windows centred on masked pixels count."""
    m = ssim_map(x, y, window_size, sigma, C1, C2)
    if mask is None:
        return float(m.mean())
    h = window_size // 2
    centres = np.asarray(mask, dtype=bool)[..., h : h + m.shape[-2], h : h + m.shape[-1]]
    if not centres.any():
        raise ValueError("mask selects no complete window")
    return float(m[np.broadcast_to(centres, m.shape)].mean())


# ----------------------------------------------------------------- perceptual

class FeatureExtractor:
    """Frozen conv stack: per level a 3x3 conv + relu, with 2x average pooling between levels."""

    def __init__(self, weights: Sequence[tuple[np.ndarray, np.ndarray]], source: str = "loaded-from-file"):
        self.levels = []
        c_prev = 1
        for w, b in weights:
            w = np.array(w, dtype=np.float64)
            b = np.array(b, dtype=np.float64)
            if w.ndim != 4 or w.shape[1] != c_prev or b.shape != (w.shape[0],):
                raise ValueError(f"bad extractor level shapes {w.shape}, {b.shape}")
            w.setflags(write=False)
            b.setflags(write=False)
            self.levels.append((w, b))
            c_prev = w.shape[0]
        if not self.levels:
            raise ValueError("extractor needs at least one level")
        self.source = source

    @classmethod
    def seeded(cls, seed: int = 0, channels: Sequence[int] = (16, 32, 64), kernel: int = 3) -> "FeatureExtractor":
        weights, c_in = [], 1
        for level, c_out in enumerate(channels):
            fan_in = c_in * kernel * kernel
            w = keyed_rng(seed, "extractor", level).standard_normal((c_out, c_in, kernel, kernel))
            weights.append((w * np.sqrt(2.0 / fan_in), np.zeros(c_out)))
            c_in = c_out
        return cls(weights, source="seeded-random")

    @classmethod
    def load(cls, path) -> "FeatureExtractor":
        from .checkpoint import CheckpointError, load_checkpoint

        config, tensors = load_checkpoint(path)
        if config.get("kind") != "extractor":
            raise CheckpointError(f"{path} does not hold extractor weights")
        n = int(config["levels"])
        try:
            weights = [(tensors[f"level{i}.w"], tensors[f"level{i}.b"]) for i in range(n)]
        except KeyError as exc:
            raise CheckpointError(f"extractor file misses tensor {exc}") from exc
        return cls(weights, source="loaded-from-file")

    def save(self, path) -> None:
        from .checkpoint import save_checkpoint

        tensors = {}
        for i, (w, b) in enumerate(self.levels):
            tensors[f"level{i}.w"], tensors[f"level{i}.b"] = w, b
        save_checkpoint(path, {"kind": "extractor", "levels": len(self.levels)}, tensors)

    @property
    def downsampling(self) -> int:
        return 2 ** (len(self.levels) - 1)

    def features(self, images: np.ndarray) -> list[np.ndarray]:
        """Channel-unit-normalized features per level for ``(N, H, W)`` images."""
        x = np.asarray(images, dtype=np.float64)
        if x.ndim == 2:
            x = x[None]
        h, w = x.shape[-2:]
        if h % self.downsampling or w % self.downsampling:
            raise ValueError(f"extents {h}x{w} not divisible by {self.downsampling}")
        cur = Tensor(x[:, None])
        out = []
        for level, (wt, b) in enumerate(self.levels):
            if level:
                cur = ops.down2(cur)
            cur = ops.relu(ops.conv2d(cur, Tensor(wt), Tensor(b), padding=wt.shape[-1] // 2))
            f = cur.data
            norm = np.sqrt((f * f).sum(axis=1, keepdims=True))
            out.append(f / (norm + 1e-10))
        return out


def perceptual_map(x, y, extractor: FeatureExtractor) -> np.ndarray:
    """Per-pixel level-summed squared feature distance, upsampled to input size."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    _same_shape(x, y)
    single = x.ndim == 2
    fx, fy = extractor.features(x), extractor.features(y)
    total = np.zeros((fx[0].shape[0],) + x.shape[-2:])
    for a, b in zip(fx, fy):
        d = ((a - b) ** 2).sum(axis=1)
        f = x.shape[-2] // d.shape[-2]
        total += np.repeat(np.repeat(d, f, axis=-2), f, axis=-1) if f > 1 else d
    return total[0] if single else total


def perceptual_distance(x, y, extractor: FeatureExtractor) -> tuple[float, np.ndarray]:
    """Scalar distance (sum over levels of spatial means) and its spatial map.

    Nearest upsampling preserves means, so the scalar is the mean of the map.
    """
    m = perceptual_map(x, y, extractor)
    return float(m.mean()), m


# ------------------------------------------------------------ classification

@dataclass(frozen=True, eq=False)
class ScoredLabels:
    scores: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        s = np.asarray(self.scores, dtype=np.float64).ravel()
        y = np.asarray(self.labels).ravel()
        if s.shape != y.shape:
            raise ValueError(f"{s.size} scores but {y.size} labels")
        if not np.isin(y, (0, 1)).all():
            raise ValueError("labels must be 0 (healthy) or 1 (pathological)")
        if not np.isfinite(s).all():
            raise ValueError("scores must be finite")
        object.__setattr__(self, "scores", s)
        object.__setattr__(self, "labels", y.astype(np.int64))


def _scored(scores, labels) -> ScoredLabels:
    if isinstance(scores, ScoredLabels):
        return scores
    return ScoredLabels(scores, labels)


def auroc(scores, labels=None) -> float:
    """P(score_pos > score_neg) + 0.5 P(tie), via average ranks."""
    s = _scored(scores, labels)
    pos = s.labels == 1
    n_pos, n_neg = int(pos.sum()), int((~pos).sum())
    if not n_pos or not n_neg:
        raise ValueError("auroc needs both classes")
    ranks = rankdata(s.scores)
    u = ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def auprc(scores, labels=None) -> float:
    """Average precision over descending scores.

    Ties keep input order (stable sort), so among equal scores the item listed
    first is ranked first.
    """
    s = _scored(scores, labels)
    n_pos = int(s.labels.sum())
    if not n_pos:
        raise ValueError("auprc needs at least one positive")
    order = np.argsort(-s.scores, kind="stable")
    hits = s.labels[order]
    precision = np.cumsum(hits) / np.arange(1, hits.size + 1)
    return float(precision[hits == 1].sum() / n_pos)
