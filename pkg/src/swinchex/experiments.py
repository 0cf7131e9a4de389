"""Desk-scale experiment drivers shared by the scripts and the acceptance suite."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .data import make_batches, make_localization_set, make_synthetic, patient_split, records_for
from .gradcam import grad_cam, quadrant_mass
from .model import ModelConfig, init_model
from .train import EpochRecord, TrainState, fit, make_optimizer, mean_loss, select_best_epoch

# Background noise of the synthetic images.  Textures sit on a near-black field.
SYNTHETIC_NOISE = 0.05


@dataclass
class SyntheticRun:
    state: TrainState
    initial_loss: float                 # train BCE of the untrained model
    history: list[EpochRecord] = field(default_factory=list)

    @property
    def best_epoch(self) -> int:
        return select_best_epoch(self.history)

    @property
    def final_loss(self) -> float:
        return self.history[-1].train_loss


def train_synthetic(config: ModelConfig, n_images: int = 320, epochs: int = 30, lr: float = 3e-4,
                    seed: int = 0, batch_size: int = 32, noise: float = SYNTHETIC_NOISE,
                    on_epoch=None) -> SyntheticRun:
    """Train on a patient-split synthetic set; validation AUROC is scored every epoch."""
    records, images = make_synthetic(n_images, config.image_size, seed=seed, noise=noise)
    manifest = patient_split(records, 0.8, seed)
    train_recs, val_recs = records_for(records, manifest.train), records_for(records, manifest.val)
    state = TrainState(init_model(config, seed), make_optimizer(), seed)
    val_batches = make_batches(val_recs, images, batch_size, shuffle=False)
    initial = mean_loss(state.model, make_batches(train_recs, images, batch_size, shuffle=False))
    fit(state, lambda e: make_batches(train_recs, images, batch_size, seed=(seed << 32) + e),
        val_batches, epochs, lr, on_epoch)
    return SyntheticRun(state, initial, state.history)


def localization_hits(model, n_images: int = 20, seed: int = 0, class_idx: int = 0,
                      threshold: float = 0.5, noise: float = SYNTHETIC_NOISE) -> list[float]:
    """Share of Grad-CAM mass in the true quadrant, one value per test image.

    Each image holds one bright square (class 0's texture) confined to a single quadrant.
    """
    out = []
    for image, quadrant in make_localization_set(n_images, class_idx, model.config.image_size, seed, noise):
        mass = quadrant_mass(grad_cam(model, image, class_idx).values)
        out.append(float(mass[quadrant]) if mass.sum() > 0 else math.nan)
    return out


def hit_rate(shares, threshold: float = 0.5) -> float:
    return float(np.mean([s >= threshold for s in shares]))


def gradcam_config(**overrides) -> ModelConfig:
    """Three-stage desk model: a 4x4 final map leaves room to tell quadrants apart."""
    base = dict(init_std=0.1, depths=(2, 2, 2), num_heads=(2, 4, 8))
    base.update(overrides)
    return ModelConfig.desk(**base)
