"""Shifted-window transformer for multi-label chest X-ray classification, at desk scale."""
from .data import CLASS_NAMES, NUM_CLASSES, PatientRecord, SplitManifest, patient_split
from .model import ModelConfig, SwinModel, forward_logits, init_model, predict_proba
from .tensor import ParamSet, ShapeError, Tensor, backward, grad_check, no_grad

__all__ = [
    "CLASS_NAMES", "NUM_CLASSES", "ModelConfig", "ParamSet", "PatientRecord", "ShapeError",
    "SplitManifest", "SwinModel", "Tensor", "backward", "forward_logits", "grad_check",
    "init_model", "no_grad", "patient_split", "predict_proba",
]

__version__ = "0.1.0"
