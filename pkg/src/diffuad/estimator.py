"""scikit-learn style wrapper: fit on healthy images, score new ones."""

from __future__ import annotations

from typing import Optional

import numpy as np
from sklearn.base import BaseEstimator, OutlierMixin, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .denoiser import UNet, UNetConfig
from .inference import anoddpm_reconstruct, anomaly_maps, autoddpm_reconstruct, calibrate_threshold, image_score
from .metrics import FeatureExtractor
from .phantom import from_model_range, to_model_range
from .schedule import linear_schedule
from .training import TrainConfig, train
from .validation import check_fraction, check_images, check_masks

METHODS = ("anoddpm", "autoddpm")


class DiffusionAnomalyDetector(TransformerMixin, OutlierMixin, BaseEstimator):
    """Reconstruction-based anomaly detector.

    ``fit`` trains a noise predictor on healthy images in [0, 1].
    ``transform`` returns pseudo-healthy reconstructions, ``score_samples``
    the image-level anomaly score (higher means more anomalous) and
    ``predict`` returns 1 for images scoring above the ``quantile`` of the
    healthy training scores, else 0.
    """

    def __init__(self, method: str = "anoddpm", noise_kind: str = "gaussian", t_level: int = 250,
                 map_mode: str = "product", top_fraction: float = 0.01, quantile: float = 0.95,
                 mask_threshold_q: float = 0.95, resample_R: int = 4, epochs: int = 20,
                 batch_size: int = 16, learning_rate: float = 1e-4, ema_decay: float = 0.0, T: int = 1000,
                 unet: Optional[UNetConfig] = None, extractor_seed: int = 0, seed: int = 0):
        self.method = method
        self.noise_kind = noise_kind
        self.t_level = t_level
        self.map_mode = map_mode
        self.top_fraction = top_fraction
        self.quantile = quantile
        self.mask_threshold_q = mask_threshold_q
        self.resample_R = resample_R
        self.epochs = epochs
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.ema_decay = ema_decay
        self.T = T
        self.unet = unet
        self.extractor_seed = extractor_seed
        self.seed = seed

    # -- helpers
    def _validate_params(self) -> None:
        if self.method not in METHODS:
            raise ValueError(f"method must be one of {METHODS}, got {self.method!r}")
        if self.method == "autoddpm" and self.noise_kind != "gaussian":
            raise ValueError("autoddpm runs on a gaussian model")
        check_fraction(self.top_fraction, "top_fraction", closed_right=True)
        check_fraction(self.quantile, "quantile")
        check_fraction(self.mask_threshold_q, "mask_threshold_q")
        if not 0 <= self.t_level <= self.T:
            raise ValueError(f"t_level must lie in [0, {self.T}]")

    def _divisor(self) -> int:
        return (self.unet or UNetConfig()).divisor

    def _reconstruct(self, X: np.ndarray, masks: Optional[np.ndarray]) -> np.ndarray:
        xm = to_model_range(X, self.noise_kind)
        if self.method == "autoddpm":
            res = autoddpm_reconstruct(self.model_, xm, self.t_level, self.seed, self.schedule_,
                                       threshold=self.mask_threshold_, mask_threshold_q=self.mask_threshold_q,
                                       resample_R=self.resample_R, extractor=self.extractor_, brain_mask=masks)
        else:
            res = anoddpm_reconstruct(self.model_, xm, self.t_level, self.noise_kind, self.seed, self.schedule_)
        return from_model_range(np.clip(res.final, *((0.0, 1.0) if self.noise_kind == "gaussian" else (-1.0, 1.0))),
                                self.noise_kind)

    def _scores(self, X, brain_masks) -> tuple[np.ndarray, np.ndarray]:
        masks = check_masks(brain_masks, X)
        recon = self._reconstruct(X, masks)
        maps = anomaly_maps(X, recon, self.map_mode, self.extractor_, masks)
        scores = np.array([image_score(maps[i], self.top_fraction, None if masks is None else masks[i])
                           for i in range(len(X))])
        return scores, recon

    # -- public API
    def fit(self, X, y=None, brain_masks=None, X_val=None, val_masks=None, model: Optional[UNet] = None):
        """Train on healthy ``X``; pass ``model`` to skip training and reuse weights.

        AutoDDPM calibrates its mask threshold on ``X_val`` (``X`` when omitted).
        """
        self._validate_params()
        X = check_images(X, divisor=self._divisor())
        self.schedule_ = linear_schedule(self.T)
        self.extractor_ = FeatureExtractor.seeded(self.extractor_seed)
        if model is None:
            cfg = TrainConfig(epochs=self.epochs, batch_size=self.batch_size, learning_rate=self.learning_rate,
                              ema_decay=self.ema_decay, seed=self.seed, noise_kind=self.noise_kind,
                              resolution=X.shape[-1], unet=self.unet or UNetConfig())
            model, self.train_log_ = train(cfg, to_model_range(X, self.noise_kind), self.schedule_)
        else:
            self.train_log_ = []
        self.model_ = model
        if self.method == "autoddpm":
            Xv = X if X_val is None else check_images(X_val, name="X_val", divisor=self._divisor())
            vm = check_masks(brain_masks if X_val is None else val_masks, Xv)
            self.mask_threshold_ = calibrate_threshold(model, Xv, self.t_level, self.schedule_,
                                                       self.mask_threshold_q, self.seed, self.extractor_, vm)
        else:
            self.mask_threshold_ = None
        train_scores, _ = self._scores(X, brain_masks)
        self.threshold_ = float(np.quantile(train_scores, self.quantile))
        return self

    def transform(self, X, brain_masks=None) -> np.ndarray:
        check_is_fitted(self, "model_")
        X = check_images(X, divisor=self._divisor())
        return self._reconstruct(X, check_masks(brain_masks, X))

    def anomaly_maps(self, X, brain_masks=None) -> np.ndarray:
        check_is_fitted(self, "model_")
        X = check_images(X, divisor=self._divisor())
        masks = check_masks(brain_masks, X)
        return anomaly_maps(X, self._reconstruct(X, masks), self.map_mode, self.extractor_, masks)

    def score_samples(self, X, brain_masks=None) -> np.ndarray:
        check_is_fitted(self, "model_")
        return self._scores(check_images(X, divisor=self._divisor()), brain_masks)[0]

    decision_function = score_samples

    def predict(self, X, brain_masks=None) -> np.ndarray:
        check_is_fitted(self, "threshold_")
        return (self.score_samples(X, brain_masks) > self.threshold_).astype(np.int64)
