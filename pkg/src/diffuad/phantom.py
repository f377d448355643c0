"""Synthetic fetal-head phantoms with known brain and lesion masks."""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Literal, Optional

import numpy as np
from scipy import ndimage

from .noise import keyed_rng

AnomalyKind = Literal["hypoechoic-lesion", "hyperechoic-lesion", "ventricle-dilation"]
ANOMALY_KINDS: tuple[str, ...] = ("hypoechoic-lesion", "hyperechoic-lesion", "ventricle-dilation")

SPECKLE_SHAPE = 16.0
LESION_AMPLITUDE = 0.395
MIN_CONTRAST = 0.3  # lesion-vs-ring contrast per unit severity
SPLIT_STRIDE = 1_000_000
SPLITS = ("train", "val", "test")


@dataclass(frozen=True, eq=False)
class Phantom:
    image: np.ndarray
    brain_mask: np.ndarray
    anomaly_mask: np.ndarray
    seed: int
    anomaly_kind: Optional[str] = None
    severity: float = 0.0
    geometry: dict = field(default_factory=dict, repr=False)

    @property
    def healthy(self) -> bool:
        return not self.anomaly_mask.any()

    @property
    def label(self) -> int:
        return 0 if self.healthy else 1


def normalize_percentile(image: np.ndarray, mask: Optional[np.ndarray] = None, q: float = 98.0) -> np.ndarray:
    """Scale so the q-th percentile of ``image[mask]`` maps to 1, then clip to [0, 1].

    The percentile is taken with ``method="higher"`` so it is an actual pixel
    value; that pixel lands exactly on 1.0 after scaling.
    """
    vals = image[mask] if mask is not None else image.ravel()
    ref = np.percentile(vals, q, method="higher")
    if not ref > 0:
        raise ValueError("percentile reference is not positive")
    return np.clip(image / ref, 0.0, 1.0)


def _block_mean(x: np.ndarray, f: int) -> np.ndarray:
    h, w = x.shape
    return x.reshape(h // f, f, w // f, f).mean(axis=(1, 3))


def _ellipse_coords(xx, yy, cx, cy, a, b, theta):
    c, s = np.cos(theta), np.sin(theta)
    dx, dy = xx - cx, yy - cy
    return (dx * c + dy * s) / a, (-dx * s + dy * c) / b


def _render(seed: int, res: int, speckle: bool = True):
    """Phantom before normalization at ``res``: (image, clean image, brain mask, geometry)."""
    rng = keyed_rng(seed, "phantom")
    hi = 2 * res
    lin = (np.arange(hi) + 0.5) / hi * 2.0 - 1.0
    yy, xx = np.meshgrid(lin, lin, indexing="ij")

    cx, cy = rng.uniform(-0.06, 0.06, size=2)
    a = rng.uniform(0.70, 0.82)
    b = rng.uniform(0.56, 0.68)
    theta = rng.uniform(-0.35, 0.35)
    u, v = _ellipse_coords(xx, yy, cx, cy, a, b, theta)
    rho = np.sqrt(u * u + v * v)
    rim_w = 0.06

    tissue = rng.uniform(0.26, 0.30) * (1.0 + 0.12 * u * rng.choice([-1.0, 1.0]))
    img = np.where(rho < 1.0, tissue, 0.0)
    img = np.maximum(img, rng.uniform(0.85, 1.0) * np.exp(-(((rho - 1.0) / (rim_w / 1.5)) ** 2)))
    # midline (falx) along the long axis
    mid = (np.abs(v * b) < 0.012) & (np.abs(u) < 0.88)
    img = np.where(mid, 0.6, img)
    structures = mid.copy()
    # two bright symmetric blobs
    u0 = rng.uniform(0.2, 0.4) * rng.choice([-1.0, 1.0])
    v0 = rng.uniform(0.3, 0.42)
    blob_a, blob_b = rng.uniform(0.12, 0.18), rng.uniform(0.06, 0.09)
    for side in (-1.0, 1.0):
        bu = (u - u0) * a / blob_a
        bv = (v - side * v0) * b / blob_b
        blob = bu * bu + bv * bv < 1.0
        img = np.where(blob, 0.7, img)
        structures |= blob

    head = rho < 1.0 + rim_w
    img = np.where(head, img, 0.02)
    img = ndimage.gaussian_filter(img, 1.2)
    clean = img
    if speckle:
        factor = rng.gamma(SPECKLE_SHAPE, 1.0 / SPECKLE_SHAPE, size=img.shape)
        img = ndimage.gaussian_filter(img * factor, 1.3)
    # the brain is the intracranial tissue; the bright skull rim is excluded
    brain = _block_mean((rho < 1.0 - 1.5 * rim_w).astype(float), 2) >= 0.5
    geometry = {"cx": cx, "cy": cy, "a": a, "b": b, "theta": theta, "u0": u0, "v0": v0,
                "structures": _block_mean(structures.astype(float), 2) > 0}
    return _block_mean(img, 2), _block_mean(clean, 2), brain, geometry


def generate_healthy(seed: int, res: int = 64) -> Phantom:
    if res not in (64, 128):
        raise ValueError("res must be 64 or 128")
    raw, _, brain, geometry = _render(seed, res)
    image = normalize_percentile(raw, brain)
    return Phantom(image=image, brain_mask=brain, anomaly_mask=np.zeros_like(brain),
                   seed=int(seed), geometry=geometry)


def _pixel_grid(res: int):
    lin = (np.arange(res) + 0.5) / res * 2.0 - 1.0
    return np.meshgrid(lin, lin, indexing="ij")


def _lesion_weight(res, cx, cy, a, b, theta):
    yy, xx = _pixel_grid(res)
    u, v = _ellipse_coords(xx, yy, cx, cy, a, b, theta)
    inside = (u * u + v * v <= 1.0).astype(float)
    w = np.clip(ndimage.gaussian_filter(inside, 0.7) / 0.35, 0.0, 1.0)
    mask = w >= 0.5
    return np.where(mask, w, 0.0), mask


def inject_anomaly(phantom: Phantom, kind: str, severity: float, seed: int,
                   max_tries: int = 50) -> Phantom:
    """Return a pathological copy of a healthy phantom.

    Lesions are blurred ellipses in the parenchyma whose intensity shifts by
    ``LESION_AMPLITUDE * severity``; ventricle dilation is a dark region
    elongated along the long head axis whose extent also grows with severity.
    Pixels outside the returned mask are untouched.
    """
    if not phantom.healthy:
        raise ValueError("inject_anomaly expects a healthy phantom")
    if kind not in ANOMALY_KINDS:
        raise ValueError(f"unknown anomaly kind {kind!r}")
    if not 0 < severity <= 1:
        raise ValueError("severity must lie in (0, 1]")
    res = phantom.image.shape[0]
    g = phantom.geometry
    rng = keyed_rng(seed, "anomaly", ANOMALY_KINDS.index(kind))
    interior = ndimage.binary_erosion(phantom.brain_mask, iterations=max(2, res // 16))
    # focal lesions keep their contrast ring clear of the bright structures
    margin = 1 if kind == "ventricle-dilation" else 4
    forbidden = ~interior | ndimage.binary_dilation(g["structures"], iterations=margin)
    clearance = ndimage.distance_transform_edt(~forbidden)
    yy, xx = _pixel_grid(res)
    sign = 1.0 if kind == "hyperechoic-lesion" else -1.0
    best, best_contrast = None, -1.0
    for attempt in range(max_tries):
        shrink = 0.97 ** attempt
        if kind == "ventricle-dilation":
            scale = 0.6 + 0.4 * severity
            la, lb = 0.2 * scale * shrink, 0.1 * scale * shrink
            ang = g["theta"] + rng.uniform(-0.15, 0.15)
        else:
            la, lb = rng.uniform(0.10, 0.16, size=2) * shrink
            ang = rng.uniform(0, np.pi)
        radius_px = max(la, lb) * res / 2.0
        candidates = np.flatnonzero(clearance > radius_px)
        if kind == "ventricle-dilation" and candidates.size:
            # prefer spots close to a blob, like an enlarged lateral ventricle
            near = ndimage.distance_transform_edt(~g["structures"]).ravel()[candidates]
            candidates = candidates[near <= np.percentile(near, 25)]
        if not candidates.size:
            continue
        pick = candidates[rng.integers(candidates.size)]
        w, mask = _lesion_weight(res, xx.flat[pick], yy.flat[pick], la, lb, ang)
        if not mask.any() or (mask & forbidden).any():
            continue
        image = phantom.image.copy()
        image[mask] = np.clip(image[mask] + sign * LESION_AMPLITUDE * severity * w[mask], 0.0, 1.0)
        out = replace(phantom, image=image, anomaly_mask=mask, anomaly_kind=kind, severity=float(severity))
        contrast = lesion_contrast(out)
        if contrast > best_contrast:
            best, best_contrast = out, contrast
        # local texture can mask a faint lesion; redraw until it reads at the calibrated contrast
        if contrast >= MIN_CONTRAST * severity:
            break
    if best is None:
        raise RuntimeError(f"could not place {kind} inside the brain after {max_tries} tries")
    return best


def lesion_contrast(phantom: Phantom, ring_width: int = 3) -> float:
    """|mean inside anomaly mask - mean of the surrounding ring inside the brain|."""
    mask = phantom.anomaly_mask
    ring = ndimage.binary_dilation(mask, iterations=ring_width) & ~mask & phantom.brain_mask
    return float(abs(phantom.image[mask].mean() - phantom.image[ring].mean()))


# ------------------------------------------------------------------ model range

def _range_check(image: np.ndarray, lo: float, hi: float) -> None:
    if image.size and (image.min() < lo or image.max() > hi):
        raise ValueError(f"image values outside [{lo}, {hi}]")


def to_model_range(image: np.ndarray, kind: str) -> np.ndarray:
    """[0, 1] -> model range: identity for gaussian, ``2x - 1`` for simplex."""
    image = np.asarray(image)
    _range_check(image, 0.0, 1.0)
    if kind == "gaussian":
        return image.copy()
    if kind == "simplex":
        return image * 2.0 - 1.0
    raise ValueError(f"unknown noise kind {kind!r}")


def from_model_range(image: np.ndarray, kind: str) -> np.ndarray:
    image = np.asarray(image)
    if kind == "gaussian":
        _range_check(image, 0.0, 1.0)
        return image.copy()
    if kind == "simplex":
        _range_check(image, -1.0, 1.0)
        return (image + 1.0) / 2.0
    raise ValueError(f"unknown noise kind {kind!r}")


def model_range(kind: str) -> tuple[float, float]:
    return (0.0, 1.0) if kind == "gaussian" else (-1.0, 1.0)


# --------------------------------------------------------------------- dataset

@dataclass(eq=False)
class Split:
    images: np.ndarray
    brain_masks: np.ndarray
    anomaly_masks: np.ndarray
    labels: np.ndarray
    seeds: np.ndarray
    kinds: list = field(default_factory=list)
    severities: np.ndarray = None

    def __len__(self) -> int:
        return len(self.images)

    def subset(self, idx) -> "Split":
        idx = np.asarray(idx)
        return Split(self.images[idx], self.brain_masks[idx], self.anomaly_masks[idx],
                     self.labels[idx], self.seeds[idx], [self.kinds[i] for i in idx],
                     self.severities[idx])


@dataclass(eq=False)
class Dataset:
    train: Split
    val: Split
    test: Split
    res: int
    seed: int


def _stack(phantoms: list[Phantom]) -> Split:
    return Split(
        images=np.stack([p.image for p in phantoms]),
        brain_masks=np.stack([p.brain_mask for p in phantoms]),
        anomaly_masks=np.stack([p.anomaly_mask for p in phantoms]),
        labels=np.array([p.label for p in phantoms], dtype=np.int64),
        seeds=np.array([p.seed for p in phantoms], dtype=np.int64),
        kinds=[p.anomaly_kind or "" for p in phantoms],
        severities=np.array([p.severity for p in phantoms]),
    )


def phantom_seed(seed: int, split: str, index: int) -> int:
    """Seed ranges are disjoint per split: ``seed * 4M + split_offset + index``."""
    if not 0 <= index < SPLIT_STRIDE:
        raise ValueError("index out of range")
    return int(seed) * (len(SPLITS) + 1) * SPLIT_STRIDE + SPLITS.index(split) * SPLIT_STRIDE + index


def make_pathological(seed: int, res: int, severity_range=(0.6, 1.0), kind: Optional[str] = None,
                      index: int = 0) -> Phantom:
    healthy = generate_healthy(seed, res)
    rng = keyed_rng(seed, "pathology")
    kind = kind or ANOMALY_KINDS[index % len(ANOMALY_KINDS)]
    severity = float(rng.uniform(*severity_range))
    return inject_anomaly(healthy, kind, severity, seed)


def make_dataset(n_train: int = 252, n_val: int = 30, n_test_healthy: int = 12, n_test_path: int = 18,
                 seed: int = 0, res: int = 64, severity_range=(0.6, 1.0)) -> Dataset:
    """Healthy train/val splits and a labelled test split (healthy first, then pathological)."""
    if min(n_train, n_val, n_test_healthy, n_test_path) < 1:
        raise ValueError("all split counts must be >= 1")
    train = [generate_healthy(phantom_seed(seed, "train", i), res) for i in range(n_train)]
    val = [generate_healthy(phantom_seed(seed, "val", i), res) for i in range(n_val)]
    test = [generate_healthy(phantom_seed(seed, "test", i), res) for i in range(n_test_healthy)]
    test += [make_pathological(phantom_seed(seed, "test", n_test_healthy + i), res, severity_range, index=i)
             for i in range(n_test_path)]
    return Dataset(train=_stack(train), val=_stack(val), test=_stack(test), res=res, seed=seed)
