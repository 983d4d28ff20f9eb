"""Grad-CAM heatmaps on a block's post-ReLU output and colour overlays."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import backward_cached, forward_cached
from .errors import DimensionError, ValidationError
from .model import features
from .tensor import resize_bilinear


@dataclass
class ActivationCapture:
    activations: np.ndarray            # [K, h, w]
    gradients: np.ndarray | None = None  # d logit_c / d activations, same shape
    block_index: int = -1
    class_index: int | None = None

    def channel_weights(self):
        """Spatial mean of the gradient of each feature map."""
        if self.gradients is None:
            raise ValidationError("capture holds no gradients")
        return self.gradients.mean(axis=(1, 2))


def _single(model, x):
    x = np.asarray(x)
    if x.ndim == 3:
        x = x[None]
    if x.ndim != 4 or x.shape[0] != 1:
        raise DimensionError("Grad-CAM works on one image at a time", axis="N")
    return x.astype(model.dtype, copy=False)


def _block(model, block_index):
    n = len(model.blocks)
    if not -n <= block_index < n:
        raise IndexError(f"block index {block_index} out of range for {n} blocks")
    return block_index % n


def capture_activations(model, x, block_index=-1) -> ActivationCapture:
    k = _block(model, block_index)
    acts = features(model, _single(model, x), upto=k)
    return ActivationCapture(acts[0], None, k)


def grad_wrt_activations(model, x, class_index, block_index=-1) -> ActivationCapture:
    """Gradient of the pre-softmax logit ``class_index`` w.r.t. the activations
    of ``block_index``. Works for both train-mode and fused models; batch-norm
    runs on its running statistics."""
    if not 0 <= class_index < model.num_classes:
        raise ValidationError(f"class index must lie in [0, {model.num_classes})")
    cap = capture_activations(model, x, block_index)
    acts = cap.activations[None]
    logits, caches = forward_cached(model, acts, batch_stats=False, start=cap.block_index + 1)
    onehot = np.zeros_like(logits)
    onehot[0, class_index] = 1
    _, dact = backward_cached(model, onehot, caches, stop=cap.block_index, param_grads=False)
    cap.gradients = dact[0]
    cap.class_index = class_index
    return cap


def cam_from_capture(cap: ActivationCapture, out_hw):
    alpha = cap.channel_weights()
    raw = np.maximum(np.tensordot(alpha, cap.activations, axes=1), 0)
    up = resize_bilinear(raw[None, None].astype(np.float64), *out_hw)[0, 0]
    return normalize_heatmap(up)


def normalize_heatmap(m):
    lo, hi = m.min(), m.max()
    if hi > lo:
        return (m - lo) / (hi - lo)
    if hi > 0:
        return np.ones_like(m)
    return np.zeros_like(m)


def gradcam(model, x, class_index, block_index=-1):
    """Heatmap in [0, 1] at the input resolution."""
    cap = grad_wrt_activations(model, x, class_index, block_index)
    return cam_from_capture(cap, model.input_shape[1:])


def jet(t):
    """Piecewise-linear jet colormap: 0 -> dark blue, 0.5 -> green, 1 -> dark red."""
    t = np.asarray(t, dtype=np.float64)[..., None]
    centers = np.array([3.0, 2.0, 1.0])
    return np.clip(1.5 - np.abs(4.0 * t - centers), 0.0, 1.0)


def overlay(original, heatmap, alpha=0.4):
    """Blend a grayscale image with the jet-coloured heatmap; RGB in [0, 1]."""
    gray = np.asarray(original, dtype=np.float64)
    heat = np.asarray(heatmap, dtype=np.float64)
    if gray.shape != heat.shape:
        raise DimensionError(f"image {gray.shape} and heatmap {heat.shape} differ", axis="HW")
    if not 0 <= alpha <= 1:
        raise ValidationError("alpha must lie in [0, 1]")
    rgb = np.repeat(gray[..., None], 3, axis=-1)
    return np.clip((1 - alpha) * rgb + alpha * jet(heat), 0.0, 1.0)
