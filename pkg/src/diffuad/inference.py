"""Pseudo-healthy reconstruction by partial diffusion and anomaly-map assembly.

All routines take a single ``(H, W)`` image or an ``(N, H, W)`` batch. Noise
for item ``i`` is keyed by ``(seed, image id, step)`` where the image id
defaults to the batch position, so results never depend on how a set of
images is split into batches.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Literal, Optional, Sequence

import numpy as np

from .metrics import FeatureExtractor, perceptual_map
from .noise import NOISE_KINDS, batch_noise
from .phantom import from_model_range, model_range
from .schedule import NoiseSchedule, forward_sample, reverse_step

MapMode = Literal["mae", "perc", "product"]
MAP_MODES = ("mae", "perc", "product")

_default_extractor: Optional[FeatureExtractor] = None


def default_extractor() -> FeatureExtractor:
    global _default_extractor
    if _default_extractor is None:
        _default_extractor = FeatureExtractor.seeded(0)
    return _default_extractor


@dataclass(eq=False)
class ReconstructionResult:
    x0: np.ndarray
    t_level: int
    kind: str
    final: np.ndarray
    coarse: Optional[np.ndarray] = None
    mask: Optional[np.ndarray] = None
    trace: list = field(default_factory=list, repr=False)


@dataclass(eq=False)
class AnomalyResult:
    map: np.ndarray
    mode: str
    image_score: float


def _as_batch(x0) -> tuple[np.ndarray, bool]:
    x = np.asarray(x0)
    if x.ndim == 2:
        return x[None], True
    if x.ndim != 3:
        raise ValueError(f"expected (H, W) or (N, H, W), got shape {x.shape}")
    return x, False


def _ids(ids: Optional[Sequence[int]], n: int) -> list[int]:
    ids = list(range(n)) if ids is None else [int(i) for i in ids]
    if len(ids) != n:
        raise ValueError(f"{len(ids)} ids for {n} images")
    return ids


def _check_range(x: np.ndarray, kind: str) -> None:
    lo, hi = model_range(kind)
    if x.size and (x.min() < lo or x.max() > hi):
        raise ValueError(f"input outside the {kind} model range [{lo}, {hi}]")


def _predict(denoiser, x: np.ndarray, t: int) -> np.ndarray:
    eps = np.asarray(denoiser.predict_eps(x, t))
    if eps.shape != x.shape:
        raise ValueError(f"denoiser returned shape {eps.shape} for input {x.shape}")
    if not np.isfinite(eps).all():
        raise FloatingPointError(f"denoiser produced non-finite output at t={t}; check the checkpoint")
    return eps.astype(x.dtype, copy=False)


def _gauss(shape, seed, tag, ids, *index, dtype):
    return batch_noise("gaussian", shape, seed, tag, ids, *index, dtype=dtype)


def _reverse_chain(denoiser, x_t: np.ndarray, t_level: int, seed: int, sched: NoiseSchedule,
                   ids: list[int], tag: str, trace: Optional[list]) -> np.ndarray:
    shape = x_t.shape[1:]
    for t in range(t_level, 0, -1):
        eps_hat = _predict(denoiser, x_t, t)
        z = _gauss(shape, seed, tag, ids, t, dtype=x_t.dtype) if t > 1 else np.zeros_like(x_t)
        x_t = reverse_step(x_t, t, eps_hat, z, sched)
        if trace is not None:
            trace.append(x_t.copy())
    return x_t


def anoddpm_reconstruct(denoiser, x0, t_level: int, kind: str = "gaussian", seed: int = 0,
                        sched: Optional[NoiseSchedule] = None, ids: Optional[Sequence[int]] = None,
                        keep_trace: bool = False) -> ReconstructionResult:
    """Noise ``x0`` to ``t_level`` with noise of ``kind`` and run the reverse chain back to 0."""
    if sched is None:
        raise ValueError("a noise schedule is required")
    if kind not in NOISE_KINDS:
        raise ValueError(f"unknown noise kind {kind!r}")
    t_level = sched.check_t(t_level)
    x, single = _as_batch(x0)
    _check_range(x, kind)
    dtype = x.dtype if x.dtype in (np.float32, np.float64) else np.float64
    x = x.astype(dtype, copy=False)
    ids = _ids(ids, len(x))
    trace: Optional[list] = [] if keep_trace else None
    if t_level == 0:
        final = x.copy()
    else:
        eps = batch_noise(kind, x.shape[1:], seed, "anoddpm-start", ids, t_level, dtype=dtype)
        x_t = forward_sample(x, t_level, eps, sched)
        final = np.clip(_reverse_chain(denoiser, x_t, t_level, seed, sched, ids, "anoddpm-z", trace),
                        *model_range(kind))
    return ReconstructionResult(
        x0=x[0] if single else x, t_level=t_level, kind=kind, final=final[0] if single else final,
        trace=[s[0] for s in trace] if (trace and single) else (trace or []),
    )


# ---------------------------------------------------------------------- maps

def _minmax(m: np.ndarray) -> np.ndarray:
    lo = m.min(axis=(-2, -1), keepdims=True)
    span = m.max(axis=(-2, -1), keepdims=True) - lo
    # a constant map carries no localisation; it normalizes to zero
    return np.divide(m - lo, span, out=np.zeros_like(m), where=span > 0)


def anomaly_maps(x0, xhat, mode: str = "product", extractor: Optional[FeatureExtractor] = None,
                 brain_mask: Optional[np.ndarray] = None) -> np.ndarray:
    """Anomaly maps for images in [0, 1]; pixels outside ``brain_mask`` score 0."""
    if mode not in MAP_MODES:
        raise ValueError(f"unknown map mode {mode!r}; choose from {MAP_MODES}")
    x0 = np.asarray(x0, dtype=np.float64)
    xhat = np.asarray(xhat, dtype=np.float64)
    if x0.shape != xhat.shape:
        raise ValueError(f"shape mismatch: {x0.shape} vs {xhat.shape}")
    keep = np.ones(x0.shape, dtype=bool) if brain_mask is None else np.broadcast_to(brain_mask, x0.shape)
    if mode in ("mae", "product"):
        mae_map = np.where(keep, np.abs(x0 - xhat), 0.0)
        if mode == "mae":
            return mae_map
    perc = np.where(keep, perceptual_map(x0, xhat, extractor or default_extractor()), 0.0)
    if mode == "perc":
        return perc
    return _minmax(mae_map) * _minmax(perc)


def image_score(amap, top_fraction: float = 0.01, mask: Optional[np.ndarray] = None) -> float:
    """Mean of the top ``ceil(top_fraction * N)`` values (inside ``mask`` if given)."""
    if not 0 < top_fraction <= 1:
        raise ValueError("top_fraction must lie in (0, 1]")
    vals = np.asarray(amap, dtype=np.float64)
    vals = vals[np.asarray(mask, dtype=bool)] if mask is not None else vals.ravel()
    if not vals.size:
        raise ValueError("empty map")
    k = int(np.ceil(top_fraction * vals.size - 1e-9))
    return float(np.partition(vals, vals.size - k)[vals.size - k :].mean())


def anomaly_map(x0, xhat, mode: str = "product", extractor: Optional[FeatureExtractor] = None,
                brain_mask: Optional[np.ndarray] = None, top_fraction: float = 0.01) -> AnomalyResult:
    m = anomaly_maps(x0, xhat, mode, extractor, brain_mask)
    if m.ndim != 2:
        raise ValueError("anomaly_map scores one image; use anomaly_maps for batches")
    return AnomalyResult(map=m, mode=mode, image_score=image_score(m, top_fraction, brain_mask))


# ------------------------------------------------------------------ AutoDDPM

def calibrate_threshold(denoiser, healthy, t_level: int, sched: NoiseSchedule, q: float = 0.95,
                        seed: int = 0, extractor: Optional[FeatureExtractor] = None,
                        brain_masks: Optional[np.ndarray] = None, ids: Optional[Sequence[int]] = None) -> float:
    """q-quantile of PRODUCT-map values on healthy validation images at ``t_level``."""
    if not 0 < q < 1:
        raise ValueError("q must lie in (0, 1)")
    x, _ = _as_batch(healthy)
    coarse = anoddpm_reconstruct(denoiser, x, t_level, "gaussian", seed, sched, ids).final
    maps = anomaly_maps(x, coarse, "product", extractor, brain_masks)
    vals = maps[np.broadcast_to(brain_masks, maps.shape)] if brain_masks is not None else maps.ravel()
    return float(np.quantile(vals, q))


def inpaint(denoiser, x_start: np.ndarray, x0: np.ndarray, mask: np.ndarray, t_level: int, seed: int,
            sched: NoiseSchedule, ids: list[int], resample_R: int = 4) -> np.ndarray:
    """Masked reverse chain: model samples inside ``mask``, noised ``x0`` outside.

    Each step is repeated ``resample_R`` times; between repeats the merged
    sample is pushed back one step with fresh noise so both regions agree.
    """
    if resample_R < 1:
        raise ValueError("resample_R must be >= 1")
    shape, dtype = x0.shape[1:], x0.dtype
    x_t = x_start
    for t in range(t_level, 0, -1):
        for r in range(resample_R):
            eps_hat = _predict(denoiser, x_t, t)
            z = _gauss(shape, seed, "autoddpm-z", ids, t, r, dtype=dtype) if t > 1 else np.zeros_like(x_t)
            unknown = reverse_step(x_t, t, eps_hat, z, sched)
            if t > 1:
                known = forward_sample(x0, t - 1, _gauss(shape, seed, "autoddpm-known", ids, t, r, dtype=dtype), sched)
            else:
                known = x0
            x_prev = np.where(mask, unknown, known)
            if r < resample_R - 1:
                fresh = _gauss(shape, seed, "autoddpm-renoise", ids, t, r, dtype=dtype)
                x_t = (np.sqrt(1.0 - sched.beta[t]) * x_prev + np.sqrt(sched.beta[t]) * fresh).astype(dtype)
        x_t = x_prev
    return x_t


def autoddpm_reconstruct(denoiser, x0, t_level: int, seed: int = 0, sched: Optional[NoiseSchedule] = None,
                         threshold: Optional[float] = None, mask_threshold_q: float = 0.95,
                         resample_R: int = 4, extractor: Optional[FeatureExtractor] = None,
                         brain_mask: Optional[np.ndarray] = None,
                         ids: Optional[Sequence[int]] = None) -> ReconstructionResult:
    """Coarse reconstruction, thresholded PRODUCT mask, stitch, then masked resampling.

    ``threshold`` is the calibrated map value (see :func:`calibrate_threshold`
    with ``mask_threshold_q``); it must be supplied explicitly.
    """
    if sched is None:
        raise ValueError("a noise schedule is required")
    if not 0 < mask_threshold_q < 1:
        raise ValueError("mask_threshold_q must lie in (0, 1)")
    if threshold is None:
        raise ValueError("no mask threshold: calibrate on healthy validation maps with calibrate_threshold()")
    t_level = sched.check_t(t_level)
    x, single = _as_batch(x0)
    _check_range(x, "gaussian")
    dtype = x.dtype if x.dtype in (np.float32, np.float64) else np.float64
    x = x.astype(dtype, copy=False)
    ids = _ids(ids, len(x))
    coarse = anoddpm_reconstruct(denoiser, x, t_level, "gaussian", seed, sched, ids).final
    maps = anomaly_maps(x, coarse, "product", extractor, brain_mask)
    mask = maps > threshold
    if t_level == 0 or not mask.any():
        final = x.copy()
    else:
        stitched = np.where(mask, coarse, x)
        eps = _gauss(x.shape[1:], seed, "autoddpm-start", ids, t_level, dtype=dtype)
        x_start = forward_sample(stitched, t_level, eps, sched)
        out = np.clip(inpaint(denoiser, x_start, x, mask, t_level, seed, sched, ids, resample_R), 0.0, 1.0)
        final = np.where(mask, out, x)
    pick = (lambda a: a[0]) if single else (lambda a: a)
    return ReconstructionResult(x0=pick(x), t_level=t_level, kind="gaussian", final=pick(final),
                                coarse=pick(coarse), mask=pick(mask))


def to_metric_range(image: np.ndarray, kind: str) -> np.ndarray:
    """Map a model-range image to [0, 1] for metrics (identity for gaussian)."""
    return from_model_range(np.clip(image, *model_range(kind)), kind)
