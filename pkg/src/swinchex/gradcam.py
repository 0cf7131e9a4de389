"""Grad-CAM on the first-norm activation of the final transformer block."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from matplotlib import colormaps
from PIL import Image

from .data import bilinear_resize
from .model import SwinModel, forward_logits
from .tensor import Tensor, backward, getitem


@dataclass
class Heatmap:
    values: np.ndarray        # (H, W) in [0, 1]
    target_class: int
    dominant: bool            # True when the target was picked as the top logit
    coarse: np.ndarray | None = None   # normalised (hf, wf) map before upsampling
    logits: np.ndarray | None = None


def cam_from_activation(activation: np.ndarray, grad: np.ndarray) -> np.ndarray:
    """ReLU of the gradient-weighted channel sum; channel weights are spatial gradient means.

    ``activation`` and ``grad`` are ``(hf, wf, C)``; returns the unnormalised ``(hf, wf)`` map.
    """
    weights = grad.mean(axis=(0, 1))
    return np.maximum(activation @ weights, 0.0)


def grad_cam(model: SwinModel, image, target_class: int | None = None) -> Heatmap:
    """Saliency of ``target_class`` (default: the largest logit) for one ``(H, W, 3)`` image."""
    arr = image.data if isinstance(image, Tensor) else np.asarray(image, dtype=np.float64)
    n_cls = model.config.num_classes
    if target_class is not None and not 0 <= target_class < n_cls:
        raise ValueError(f"class index {target_class} outside [0, {n_cls})")
    # grads flow from the image side so parameter .grad buffers are never touched
    saved = {p: t.requires_grad for p, t in model.params.items()}
    for _, t in model.params.items():
        t.requires_grad = False
    try:
        x = Tensor(arr[None], requires_grad=True)
        capture: dict = {}
        logits = forward_logits(x, model, capture)
        dominant = target_class is None
        target = int(np.argmax(logits.data[0])) if dominant else int(target_class)
        act = capture["activation"]
        backward(getitem(logits, (0, target)))
    finally:
        for p, t in model.params.items():
            t.requires_grad = saved[p]
    grad = act.grad if act.grad is not None else np.zeros_like(act.data)
    cam = cam_from_activation(act.data[0], grad[0])
    peak = cam.max()
    if peak > 0:
        cam = cam / peak
    h, w = arr.shape[:2]
    up = np.clip(bilinear_resize(cam, h, w), 0.0, 1.0)
    top = up.max()
    if top > 0:
        up = up / top
    return Heatmap(up, target, dominant, cam, logits.data[0].copy())


def quadrant_mass(values: np.ndarray) -> np.ndarray:
    """Share of total heatmap mass in each quadrant (TL, TR, BL, BR)."""
    h, w = values.shape
    q = [values[:h // 2, :w // 2], values[:h // 2, w // 2:], values[h // 2:, :w // 2], values[h // 2:, w // 2:]]
    total = values.sum()
    return np.array([x.sum() for x in q]) / total if total > 0 else np.zeros(4)


def overlay(values: np.ndarray, image: np.ndarray, alpha: float = 0.5, cmap: str = "jet") -> np.ndarray:
    """Alpha-blend the colour-mapped heatmap over the image; float RGB in [0, 1]."""
    img = np.asarray(image, dtype=np.float64)
    if img.ndim == 2:
        img = np.repeat(img[:, :, None], 3, axis=2)
    colour = colormaps[cmap](np.clip(values, 0.0, 1.0))[..., :3]
    return (1.0 - alpha) * img + alpha * colour


def render_heatmap(values: np.ndarray, image: np.ndarray, out_path, alpha: float = 0.5, cmap: str = "jet") -> None:
    """Write ``[image | overlay]`` side by side as an 8-bit RGB PNG."""
    img = np.asarray(image, dtype=np.float64)
    if img.ndim == 2:
        img = np.repeat(img[:, :, None], 3, axis=2)
    if values.shape != img.shape[:2]:
        raise ValueError(f"heatmap {values.shape} does not match image {img.shape[:2]}")
    panel = np.concatenate([img, overlay(values, img, alpha, cmap)], axis=1)
    px = np.round(np.clip(panel, 0.0, 1.0) * 255).astype(np.uint8)
    try:
        Image.fromarray(px, mode="RGB").save(out_path, format="PNG", optimize=False)
    except OSError as exc:
        raise OSError(f"cannot write heatmap to {out_path}: {exc}") from exc
