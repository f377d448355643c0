"""DDPM variance schedule and the closed-form forward/reverse kernels."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Union

import numpy as np


@dataclass(frozen=True, eq=False)
class NoiseSchedule:
    """Per-step arrays indexed by ``t`` in ``0..T``.

    Index 0 is the clean-data step: ``alpha_bar[0] = 1`` and ``beta[0]``,
    ``alpha[0]``, ``beta_tilde[0]`` are padding zeros/ones that no kernel reads.
    """

    T: int
    beta: np.ndarray
    alpha: np.ndarray
    alpha_bar: np.ndarray
    beta_tilde: np.ndarray

    def check_t(self, t: int, lo: int = 0) -> int:
        t = int(t)
        if not lo <= t <= self.T:
            raise ValueError(f"t={t} outside [{lo}, {self.T}]")
        return t

    def to_csv(self, path: Union[str, Path]) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["t", "beta", "alpha_bar", "beta_tilde"])
            for t in range(1, self.T + 1):
                w.writerow([t, repr(float(self.beta[t])), repr(float(self.alpha_bar[t])),
                            repr(float(self.beta_tilde[t]))])


def linear_schedule(T: int = 1000, beta_1: float = 1e-4, beta_T: float = 0.02) -> NoiseSchedule:
    if T < 2:
        raise ValueError("T must be at least 2")
    if not 0 < beta_1 <= beta_T < 1:
        raise ValueError(f"need 0 < beta_1 <= beta_T < 1, got {beta_1}, {beta_T}")
    beta = np.zeros(T + 1)
    beta[1:] = beta_1 + np.arange(T) * (beta_T - beta_1) / (T - 1)
    alpha = 1.0 - beta
    alpha_bar = np.cumprod(alpha)
    beta_tilde = np.zeros(T + 1)
    beta_tilde[1:] = (1.0 - alpha_bar[:-1]) / (1.0 - alpha_bar[1:]) * beta[1:]
    for arr in (beta, alpha, alpha_bar, beta_tilde):
        arr.setflags(write=False)
    return NoiseSchedule(T=T, beta=beta, alpha=alpha, alpha_bar=alpha_bar, beta_tilde=beta_tilde)


def _per_item(values: np.ndarray, t, ndim: int) -> np.ndarray:
    # scalar t -> scalar coefficient; array t (one per batch item) -> broadcastable column
    if np.ndim(t) == 0:
        return values[int(t)]
    return values[np.asarray(t, dtype=np.int64)].reshape((-1,) + (1,) * (ndim - 1))


def _check_steps(sched: NoiseSchedule, t, lo: int) -> None:
    ts = np.atleast_1d(np.asarray(t))
    if ts.size and (ts.min() < lo or ts.max() > sched.T):
        raise ValueError(f"t outside [{lo}, {sched.T}]")


def forward_sample(x0: np.ndarray, t, eps: np.ndarray, sched: NoiseSchedule) -> np.ndarray:
    """``x_t = sqrt(alpha_bar_t) x0 + sqrt(1 - alpha_bar_t) eps``.

    ``t`` may be a scalar or an array with one step per leading-axis item.
    """
    _check_steps(sched, t, 0)
    if np.shape(eps) != np.shape(x0):
        raise ValueError(f"eps shape {np.shape(eps)} != x0 shape {np.shape(x0)}")
    ab = _per_item(sched.alpha_bar, t, np.ndim(x0))
    dtype = np.result_type(x0, eps)
    return (np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * eps).astype(dtype, copy=False)


def predict_x0(x_t: np.ndarray, t, eps_hat: np.ndarray, sched: NoiseSchedule) -> np.ndarray:
    _check_steps(sched, t, 1)
    ab = _per_item(sched.alpha_bar, t, np.ndim(x_t))
    dtype = np.result_type(x_t, eps_hat)
    return ((x_t - np.sqrt(1.0 - ab) * eps_hat) / np.sqrt(ab)).astype(dtype, copy=False)


def reverse_mean(x_t: np.ndarray, t, eps_hat: np.ndarray, sched: NoiseSchedule) -> np.ndarray:
    _check_steps(sched, t, 1)
    nd = np.ndim(x_t)
    a = _per_item(sched.alpha, t, nd)
    b = _per_item(sched.beta, t, nd)
    ab = _per_item(sched.alpha_bar, t, nd)
    return (x_t - b / np.sqrt(1.0 - ab) * eps_hat) / np.sqrt(a)


def reverse_step(x_t: np.ndarray, t, eps_hat: np.ndarray, z: np.ndarray,
                 sched: NoiseSchedule) -> np.ndarray:
    """One ancestral step ``x_{t-1} = mu(x_t, eps_hat) + sqrt(beta_tilde_t) z``."""
    _check_steps(sched, t, 1)
    last = np.asarray(t) == 1
    if last.any() and np.any(np.asarray(z)[last] if last.ndim else z):
        raise ValueError("z must be zero at t = 1")
    mu = reverse_mean(x_t, t, eps_hat, sched)
    bt = _per_item(sched.beta_tilde, t, np.ndim(x_t))
    dtype = np.result_type(x_t, eps_hat)
    return (mu + np.sqrt(bt) * z).astype(dtype, copy=False)


def posterior_mean(x0: np.ndarray, x_t: np.ndarray, t, sched: NoiseSchedule) -> np.ndarray:
    """Mean of q(x_{t-1} | x_t, x0)."""
    _check_steps(sched, t, 1)
    nd = np.ndim(x_t)
    ab = _per_item(sched.alpha_bar, t, nd)
    ab_prev = _per_item(sched.alpha_bar, np.asarray(t) - 1, nd)
    a = _per_item(sched.alpha, t, nd)
    b = _per_item(sched.beta, t, nd)
    return (np.sqrt(ab_prev) * b / (1.0 - ab)) * x0 + (np.sqrt(a) * (1.0 - ab_prev) / (1.0 - ab)) * x_t
