"""
Max, Max-Min and average pooling with their backward rules.

Max-Min pooling emits ``window max - window min`` for every pooling
window.  Writing each window's values as ranging from ``c - v_min`` to
``c + v_max`` around its most frequent value ``c`` shows the output is
``v_max + v_min``: the intensity level cancels and only the spread (edge
strength) survives.  With a 5x5 window and stride 2 it behaves as a
down-sampling morphological gradient.

Padding never fabricates edges: max pooling pads with ``-inf``, Max-Min
pooling replicates the border, average pooling pads with zeros.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import DimensionError, ValidationError
from .tensor import Tensor, as_tensor, make_result

POOL_KINDS = ("max", "maxmin", "average")


def output_extent(n: int, f: int, p: int, s: int) -> int:
    """Number of windows of size ``f`` and stride ``s`` over ``n`` cells padded by ``p``."""
    if n < 1 or f < 1 or s < 1 or p < 0:
        raise DimensionError(f"invalid extent arguments n={n}, f={f}, p={p}, s={s}")
    if n + 2 * p < f:
        raise DimensionError(f"window {f} larger than padded input {n} + 2*{p}")
    return (n - f + 2 * p) // s + 1


@dataclass(frozen=True)
class PoolSpec:
    """Pooling rule and geometry.

    ``pool`` is the window extent as (height, width).
    """

    kind: str = "maxmin"
    pool: tuple[int, int] = (5, 5)
    stride: int = 2
    padding: int = 0

    def __post_init__(self):
        pool = self.pool
        if isinstance(pool, (int, np.integer)):
            pool = (pool, pool)
        object.__setattr__(self, "pool", (int(pool[0]), int(pool[1])))
        if self.kind not in POOL_KINDS:
            raise ValidationError(f"pool kind must be one of {POOL_KINDS}, got {self.kind!r}")
        if min(self.pool) < 1 or self.stride < 1 or self.padding < 0:
            raise ValidationError(f"invalid pool geometry {self.pool}|{self.stride} pad {self.padding}")
        if self.padding >= min(self.pool):
            raise ValidationError(f"padding {self.padding} must be smaller than the window {self.pool}")

    def output_hw(self, h: int, w: int) -> tuple[int, int]:
        return (
            output_extent(h, self.pool[0], self.padding, self.stride),
            output_extent(w, self.pool[1], self.padding, self.stride),
        )

    def with_kind(self, kind: str) -> "PoolSpec":
        return PoolSpec(kind, self.pool, self.stride, self.padding)

    def to_dict(self) -> dict:
        return {"kind": self.kind, "pool": list(self.pool), "stride": self.stride, "padding": self.padding}

    @classmethod
    def from_dict(cls, d: dict) -> "PoolSpec":
        return cls(**d)

    def __str__(self) -> str:
        return f"{self.kind} {self.pool[0]}x{self.pool[1]}|{self.stride}"


def _pad(x: np.ndarray, spec: PoolSpec) -> np.ndarray:
    p = spec.padding
    if p == 0:
        return x
    width = ((0, 0), (0, 0), (p, p), (p, p))
    if spec.kind == "max":
        return np.pad(x, width, constant_values=-np.inf)
    if spec.kind == "maxmin":
        return np.pad(x, width, mode="edge")
    return np.pad(x, width)


def _windows(x: np.ndarray, spec: PoolSpec) -> np.ndarray:
    """(N, C, Ho, Wo, fh*fw) copy of every pooling window, row-major inside the window."""
    fh, fw = spec.pool
    s = spec.stride
    ho, wo = spec.output_hw(x.shape[2], x.shape[3])
    view = sliding_window_view(_pad(x, spec), (fh, fw), axis=(2, 3))
    view = view[:, :, : s * (ho - 1) + 1 : s, : s * (wo - 1) + 1 : s]
    return view.reshape(*view.shape[:4], fh * fw)


def _check_input(x: Tensor) -> None:
    if x.ndim != 4:
        raise DimensionError(f"pooling expects a rank-4 (N, C, H, W) tensor, got shape {x.shape}")


def pool_forward(x: np.ndarray, spec: PoolSpec) -> np.ndarray:
    win = _windows(x, spec)
    if spec.kind == "max":
        return win.max(axis=-1)
    if spec.kind == "maxmin":
        return win.max(axis=-1) - win.min(axis=-1)
    return win.mean(axis=-1)


def _scatter(x_shape: tuple[int, ...], spec: PoolSpec, flat_idx: np.ndarray, values: np.ndarray) -> np.ndarray:
    """Add ``values`` at window-local positions ``flat_idx`` into a padded-input grid."""
    n, c, h, w = x_shape
    p, s = spec.padding, spec.stride
    fw = spec.pool[1]
    ho, wo = values.shape[2], values.shape[3]
    rows = (np.arange(ho) * s)[None, None, :, None] + flat_idx // fw
    cols = (np.arange(wo) * s)[None, None, None, :] + flat_idx % fw
    grid = np.zeros((n, c, h + 2 * p, w + 2 * p))
    nn = np.arange(n)[:, None, None, None]
    cc = np.arange(c)[None, :, None, None]
    np.add.at(grid, (nn, cc, rows, cols), values)
    return grid


def _unpad(grid: np.ndarray, x_shape: tuple[int, ...], spec: PoolSpec) -> np.ndarray:
    p = spec.padding
    if p == 0:
        return grid
    h, w = x_shape[2], x_shape[3]
    if spec.kind != "maxmin":
        return grid[:, :, p : p + h, p : p + w]
    # Replicated border cells hand their gradient back to the source pixel.
    src_rows = np.clip(np.arange(h + 2 * p) - p, 0, h - 1)
    src_cols = np.clip(np.arange(w + 2 * p) - p, 0, w - 1)
    folded = np.zeros((grid.shape[0], grid.shape[1], h, grid.shape[3]))
    np.add.at(folded, (slice(None), slice(None), src_rows), grid)
    out = np.zeros(x_shape)
    np.add.at(out, (slice(None), slice(None), slice(None), src_cols), folded)
    return out


def pool_backward(grad_out, x, spec: PoolSpec) -> np.ndarray:
    """Gradient of the pooled output with respect to the pooling input.

    Max routes each upstream gradient to its window argmax; Max-Min routes
    it positively to the argmax and negatively to the argmin.  Ties go to
    the first position in row-major window order, so a constant window
    contributes nothing under Max-Min.
    """
    g = np.asarray(grad_out.data if isinstance(grad_out, Tensor) else grad_out, dtype=np.float64)
    xd = np.asarray(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    expected = (*xd.shape[:2], *spec.output_hw(xd.shape[2], xd.shape[3]))
    if g.shape != expected:
        raise DimensionError(f"grad_out shape {g.shape} does not match pooled shape {expected}")
    win = _windows(xd, spec)
    if spec.kind == "average":
        fh, fw = spec.pool
        grid = np.zeros((xd.shape[0], xd.shape[1], xd.shape[2] + 2 * spec.padding, xd.shape[3] + 2 * spec.padding))
        share = g / (fh * fw)
        for k in range(fh * fw):
            grid += _scatter(xd.shape, spec, np.full(g.shape, k), share)
        return _unpad(grid, xd.shape, spec)
    grid = _scatter(xd.shape, spec, win.argmax(axis=-1), g)
    if spec.kind == "maxmin":
        grid -= _scatter(xd.shape, spec, win.argmin(axis=-1), g)
    return _unpad(grid, xd.shape, spec)


def pool(x: Tensor, spec: PoolSpec) -> Tensor:
    """Differentiable pooling of a rank-4 tensor according to ``spec.kind``."""
    x = as_tensor(x)
    _check_input(x)
    out = pool_forward(x.data, spec)
    return make_result(out, (x,), lambda g: (pool_backward(g, x.data, spec),), f"{spec.kind}_pool")


def max_pool(x: Tensor, spec: PoolSpec = PoolSpec("max", (2, 2), 2)) -> Tensor:
    if spec.kind != "max":
        raise ValidationError(f"max_pool needs kind 'max', got {spec.kind!r}")
    return pool(x, spec)


def maxmin_pool(x: Tensor, spec: PoolSpec = PoolSpec()) -> Tensor:
    if spec.kind != "maxmin":
        raise ValidationError(f"maxmin_pool needs kind 'maxmin', got {spec.kind!r}")
    return pool(x, spec)


def average_pool(x: Tensor, spec: PoolSpec) -> Tensor:
    if spec.kind != "average":
        raise ValidationError(f"average_pool needs kind 'average', got {spec.kind!r}")
    return pool(x, spec)


@dataclass(frozen=True)
class WindowStats:
    """Spread of one pooling window around its modal intensity."""

    mode_value: float
    v_max: float
    v_min: float
    index: tuple[int, int]

    @property
    def window_max(self) -> float:
        return self.mode_value + self.v_max

    @property
    def window_min(self) -> float:
        return self.mode_value - self.v_min

    @property
    def spread(self) -> float:
        return self.v_max + self.v_min


def window_stats(x, spec: PoolSpec = PoolSpec()) -> list[list[WindowStats]]:
    """Per-window modal value and deviations for a single-channel image.

    The mode is an exact histogram over the window; ties go to the smaller
    intensity.
    """
    arr = np.asarray(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    if arr.ndim == 4 and arr.shape[:2] == (1, 1):
        arr = arr[0, 0]
    if arr.ndim != 2:
        raise DimensionError(f"window_stats expects a single-channel 2-D image, got shape {arr.shape}")
    win = _windows(arr[None, None], spec.with_kind("maxmin"))[0, 0]
    grid = []
    for i in range(win.shape[0]):
        row = []
        for j in range(win.shape[1]):
            values, counts = np.unique(win[i, j], return_counts=True)
            mode = float(values[np.argmax(counts)])
            row.append(WindowStats(mode, float(win[i, j].max()) - mode, mode - float(win[i, j].min()), (i, j)))
        grid.append(row)
    return grid


def edge_map(image: Tensor, spec: PoolSpec = PoolSpec(), rescale: bool = True) -> Tensor:
    """Max-Min pooled edge image, optionally rescaled so each image spans [0, 255].

    Rescaling divides by the image's largest response; an edgeless image
    stays all zeros.
    """
    image = as_tensor(image)
    _check_input(image)
    if spec.kind != "maxmin":
        raise ValidationError(f"edge_map needs a maxmin PoolSpec, got {spec.kind!r}")
    raw = pool_forward(image.data, spec)
    if not rescale:
        return Tensor._wrap(raw)
    peak = raw.max(axis=(1, 2, 3), keepdims=True)
    scaled = np.divide(raw * 255.0, peak, out=np.zeros_like(raw), where=peak > 0)
    return Tensor._wrap(scaled)

