"""Grad-CAM heatmaps over labeled taps, plus colorized overlays."""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache
from importlib import resources
from typing import Optional

import numpy as np

from .dataio import resize_bilinear
from .errors import ConfigurationError, DimensionError, UsageError, ValidationError
from .model import Model
from .tensor import GradTape, Tensor, backward


@dataclass(frozen=True)
class Heatmap:
    values: np.ndarray  # (h, w) at tap resolution, in [0, 1]
    upsampled: np.ndarray  # (H, W) at input resolution, in [0, 1]
    tap: str
    target_class: int


@lru_cache(maxsize=1)
def colormap() -> np.ndarray:
    """(256, 3) uint8 blue-to-red lookup table."""
    text = resources.files("eamnet").joinpath("data/colormap.txt").read_text()
    rows = [line.split() for line in text.splitlines() if line and not line.startswith("#")]
    lut = np.array(rows, dtype=np.uint8)
    if lut.shape != (256, 3):
        raise RuntimeError(f"colormap table has shape {lut.shape}, expected (256, 3)")
    return lut


def _normalize(cam: np.ndarray) -> np.ndarray:
    peak = cam.max()
    return cam / peak if peak > 0 else np.zeros_like(cam)


def _resolve_tap(model: Model, tap: Optional[str]) -> tuple[str, str]:
    graph = model.graph
    if tap is None:
        if graph.num_blocks < 2:
            raise ConfigurationError("default tap is the second-last block, but the backbone has one block")
        tap = graph.resolve_tap(-2)
    taps = graph.tap_map
    if tap in taps:
        return tap, taps[tap]
    if any(n.name == tap for n in graph.nodes):
        return tap, tap
    raise ConfigurationError(f"unknown tap {tap!r}; available taps: {graph.tap_labels}")


def grad_cam(model: Model, image, target_class: Optional[int] = None, tap: Optional[str] = None) -> Heatmap:
    """Gradient-weighted class activation map of ``target_class`` at ``tap``.

    Channel weights are the spatial means of d(class logit)/d(activation);
    the map is the ReLU of the weighted channel sum, scaled to peak at 1 and
    bilinearly upsampled to the input size.  ``target_class=None`` explains
    the predicted class; ``tap=None`` uses the second-last block.
    """
    x = np.asarray(image.data if isinstance(image, Tensor) else image, dtype=np.float64)
    if x.ndim == 3:
        x = x[None]
    if x.ndim != 4 or x.shape[0] != 1:
        raise DimensionError(f"grad_cam explains one image at a time, got shape {x.shape}")
    label, node = _resolve_tap(model, tap)
    with GradTape() as tape:
        fp = model.forward(Tensor(x, requires_grad=True), keep=(node,))
        k = model.num_classes
        if target_class is None:
            target_class = int(fp.logits.data[0].argmax())
        if not 0 <= target_class < k:
            raise ValidationError(f"class {target_class} outside [0, {k})")
        onehot = np.zeros((1, k))
        onehot[0, target_class] = 1.0
        score = (fp.logits * onehot).sum()
    backward(score, tape)
    act = fp.activations[node]
    if act.grad is None or act.ndim != 4:
        raise UsageError(f"tap {label!r} recorded no spatial activation gradient")
    weights = act.grad[0].mean(axis=(1, 2))
    cam = np.maximum(np.tensordot(weights, act.data[0], axes=1), 0.0)
    tape.clear()
    values = _normalize(cam)
    upsampled = _normalize(np.clip(resize_bilinear(values, x.shape[2:]), 0.0, None))
    return Heatmap(values, upsampled, label, target_class)


def colorize(values: np.ndarray) -> np.ndarray:
    """(H, W) values in [0, 1] -> (3, H, W) colours in [0, 1]."""
    idx = np.rint(np.clip(values, 0.0, 1.0) * 255).astype(np.int64)
    return colormap()[idx].transpose(2, 0, 1) / 255.0


def overlay(heatmap: Heatmap, image, alpha: float = 0.5) -> Tensor:
    """Blend ``alpha * image + (1 - alpha) * colorized heatmap``; returns (1, 3, H, W).

    ``alpha=0`` gives the bare heatmap, ``alpha=1`` the image itself.
    """
    if not 0.0 <= alpha <= 1.0:
        raise ValidationError(f"alpha must lie in [0, 1], got {alpha}")
    img = np.asarray(image.data if isinstance(image, Tensor) else image, dtype=np.float64)
    if img.ndim == 4:
        img = img[0]
    if img.ndim == 2:
        img = img[None]
    if img.shape[1:] != heatmap.upsampled.shape:
        raise DimensionError(f"image {img.shape[1:]} and heatmap {heatmap.upsampled.shape} differ in resolution")
    if img.shape[0] == 1:
        img = np.repeat(img, 3, axis=0)
    color = colorize(heatmap.upsampled)
    return Tensor((alpha * img + (1.0 - alpha) * color)[None])


def mass_inside(heatmap: Heatmap, box: tuple[int, int, int, int]) -> float:
    """Fraction of upsampled heatmap mass inside the (row0, col0, row1, col1) box."""
    total = heatmap.upsampled.sum()
    if total == 0:
        return 0.0
    r0, c0, r1, c1 = box
    return float(heatmap.upsampled[r0:r1, c0:c1].sum() / total)
