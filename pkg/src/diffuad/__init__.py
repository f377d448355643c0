"""Diffusion-model anomaly detection on synthetic fetal-head phantoms."""

from .denoiser import AnalyticDenoiser, UNet, UNetConfig, analytic_denoiser
from .estimator import DiffusionAnomalyDetector
from .inference import (AnomalyResult, ReconstructionResult, anoddpm_reconstruct, anomaly_map,
                        anomaly_maps, autoddpm_reconstruct, calibrate_threshold, image_score)
from .metrics import FeatureExtractor, ScoredLabels, auprc, auroc, mae, perceptual_distance, ssim
from .noise import gaussian_field, noise_field, simplex_field
from .phantom import Phantom, generate_healthy, inject_anomaly, make_dataset
from .schedule import NoiseSchedule, forward_sample, linear_schedule, reverse_step
from .training import TrainConfig, kl_diagnostic, simplified_loss, train

__version__ = "0.1.0"

__all__ = [
    "AnalyticDenoiser", "AnomalyResult", "DiffusionAnomalyDetector", "FeatureExtractor", "NoiseSchedule",
    "Phantom", "ReconstructionResult", "ScoredLabels", "TrainConfig", "UNet", "UNetConfig",
    "analytic_denoiser", "anoddpm_reconstruct", "anomaly_map", "anomaly_maps", "auprc", "auroc",
    "autoddpm_reconstruct", "calibrate_threshold", "forward_sample", "gaussian_field", "generate_healthy",
    "image_score", "inject_anomaly", "kl_diagnostic", "linear_schedule", "mae", "make_dataset",
    "noise_field", "perceptual_distance", "reverse_step", "simplex_field", "simplified_loss", "ssim", "train",
]
