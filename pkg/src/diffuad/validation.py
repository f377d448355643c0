"""Input checks shared by the estimator and the command line."""

from __future__ import annotations

from typing import Optional

import numpy as np


def check_images(X, *, name: str = "X", lo: float = 0.0, hi: float = 1.0, divisor: int = 1) -> np.ndarray:
    """Return ``X`` as a float ``(N, H, W)`` array after shape and range checks."""
    arr = np.asarray(X)
    if arr.dtype == object or not np.issubdtype(arr.dtype, np.number):
        raise TypeError(f"{name} must be numeric, got dtype {arr.dtype}")
    if arr.ndim == 2:
        arr = arr[None]
    if arr.ndim != 3:
        raise ValueError(f"{name} must have shape (N, H, W) or (H, W), got {arr.shape}")
    if not arr.size:
        raise ValueError(f"{name} is empty")
    arr = arr.astype(np.float32) if arr.dtype != np.float64 else arr
    if not np.isfinite(arr).all():
        raise ValueError(f"{name} contains NaN or infinite values")
    if arr.min() < lo or arr.max() > hi:
        raise ValueError(f"{name} values must lie in [{lo}, {hi}], got [{arr.min():.4g}, {arr.max():.4g}]")
    h, w = arr.shape[1:]
    if h % divisor or w % divisor:
        raise ValueError(f"{name} extents {h}x{w} must be divisible by {divisor}")
    return arr


def check_masks(masks, images: np.ndarray, *, name: str = "brain_masks") -> Optional[np.ndarray]:
    if masks is None:
        return None
    m = np.asarray(masks)
    if m.ndim == 2:
        m = np.broadcast_to(m, images.shape)
    if m.shape != images.shape:
        raise ValueError(f"{name} shape {m.shape} does not match images {images.shape}")
    if m.dtype != bool:
        if not np.isin(m, (0, 1)).all():
            raise ValueError(f"{name} must be binary")
        m = m.astype(bool)
    if not m.reshape(len(m), -1).any(axis=1).all():
        raise ValueError(f"every entry of {name} must select at least one pixel")
    return m


def check_labels(y, n: int) -> np.ndarray:
    y = np.asarray(y).ravel()
    if y.size != n:
        raise ValueError(f"{y.size} labels for {n} images")
    if not np.isin(y, (0, 1)).all():
        raise ValueError("labels must be 0 (healthy) or 1 (pathological)")
    return y.astype(np.int64)


def check_fraction(value: float, name: str, *, closed_right: bool = False) -> float:
    value = float(value)
    ok = 0 < value <= 1 if closed_right else 0 < value < 1
    if not ok:
        raise ValueError(f"{name} must lie in (0, 1{']' if closed_right else ')'}, got {value}")
    return value
