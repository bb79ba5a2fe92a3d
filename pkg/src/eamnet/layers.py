"""Differentiable layer primitives: convolution, batch norm, GAP, concat, classifier."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import DimensionError, ValidationError
from .pooling import output_extent
from .tensor import Tensor, as_tensor, make_result, relu

ACTIVATIONS = ("relu", "none")


@dataclass(frozen=True)
class ConvSpec:
    in_channels: int
    out_channels: int
    kernel: tuple[int, int] = (3, 3)
    stride: int = 1
    padding: int = 1
    use_batchnorm: bool = False
    activation: str = "relu"

    def __post_init__(self):
        object.__setattr__(self, "kernel", _pair(self.kernel))
        if self.in_channels < 1 or self.out_channels < 1:
            raise ValidationError(f"channel counts must be positive: {self.in_channels}->{self.out_channels}")
        if min(self.kernel) < 1 or self.stride < 1 or self.padding < 0:
            raise ValidationError(f"invalid kernel/stride/padding: {self.kernel}/{self.stride}/{self.padding}")
        if self.activation not in ACTIVATIONS:
            raise ValidationError(f"activation must be one of {ACTIVATIONS}, got {self.activation!r}")

    @property
    def weight_shape(self) -> tuple[int, int, int, int]:
        return (self.out_channels, self.in_channels, *self.kernel)

    def output_hw(self, h: int, w: int) -> tuple[int, int]:
        return (
            output_extent(h, self.kernel[0], self.padding, self.stride),
            output_extent(w, self.kernel[1], self.padding, self.stride),
        )

    def to_dict(self) -> dict:
        return {
            "in_channels": self.in_channels,
            "out_channels": self.out_channels,
            "kernel": list(self.kernel),
            "stride": self.stride,
            "padding": self.padding,
            "use_batchnorm": self.use_batchnorm,
            "activation": self.activation,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ConvSpec":
        return cls(**{**d, "kernel": tuple(d.get("kernel", (3, 3)))})


def _pair(v) -> tuple[int, int]:
    if isinstance(v, (int, np.integer)):
        return (int(v), int(v))
    a, b = v
    return (int(a), int(b))


def he_uniform(shape: Sequence[int], fan_in: int, rng: np.random.Generator) -> np.ndarray:
    limit = np.sqrt(6.0 / fan_in)
    return rng.uniform(-limit, limit, size=tuple(shape))


def _require_rank4(x: Tensor, what: str) -> None:
    if x.ndim != 4:
        raise DimensionError(f"{what} expects a rank-4 (N, C, H, W) tensor, got shape {x.shape}")


def conv2d(x: Tensor, weight: Tensor, bias: Optional[Tensor], spec: ConvSpec) -> Tensor:
    """Cross-correlation of ``x`` with ``weight`` (no activation), via im2col and one matmul."""
    x, weight = as_tensor(x), as_tensor(weight)
    _require_rank4(x, "conv2d")
    n, c, h, w = x.shape
    if c != spec.in_channels:
        raise DimensionError(f"conv2d input has {c} channels, spec expects {spec.in_channels}")
    if weight.shape != spec.weight_shape:
        raise DimensionError(f"conv2d weight shape {weight.shape} != expected {spec.weight_shape}")
    if bias is not None and bias.shape != (spec.out_channels,):
        raise DimensionError(f"conv2d bias shape {bias.shape} != ({spec.out_channels},)")
    kh, kw = spec.kernel
    s, p = spec.stride, spec.padding
    ho, wo = spec.output_hw(h, w)
    cout = spec.out_channels

    xp = np.pad(x.data, ((0, 0), (0, 0), (p, p), (p, p))) if p else x.data
    view = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, : s * (ho - 1) + 1 : s, : s * (wo - 1) + 1 : s]
    # rows: (n, i, j); columns: (c, ki, kj) to match weight.reshape(cout, -1)
    cols = view.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * kh * kw)
    wmat = weight.data.reshape(cout, -1)
    out = cols @ wmat.T
    if bias is not None:
        out += bias.data
    out = np.ascontiguousarray(out.reshape(n, ho, wo, cout).transpose(0, 3, 1, 2))

    def back(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(-1, cout)
        gw = (g2.T @ cols).reshape(weight.shape) if weight.requires_grad else None
        gb = g2.sum(axis=0) if bias is not None else None
        gx = None
        if x.requires_grad:
            dcols = np.matmul(wmat.T, g.reshape(n, cout, ho * wo)).reshape(n, c, kh, kw, ho, wo)
            gpad = np.zeros(xp.shape)
            for i in range(kh):
                for j in range(kw):
                    gpad[:, :, i : i + s * (ho - 1) + 1 : s, j : j + s * (wo - 1) + 1 : s] += dcols[:, :, i, j]
            gx = gpad[:, :, p : p + h, p : p + w] if p else gpad
        return (gx, gw, gb)

    inputs = (x, weight, bias) if bias is not None else (x, weight)
    return make_result(out, inputs, back, "conv2d")


def batch_norm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool,
    momentum: float = 0.1,
    eps: float = 1e-5,
) -> Tensor:
    """Per-channel batch normalization.

    In training mode ``running_mean``/``running_var`` are updated in place.
    """
    _require_rank4(x, "batch_norm")
    axes = (0, 2, 3)
    shape = (1, -1, 1, 1)
    if training:
        mu = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        m = x.size / x.shape[1]
        running_mean *= 1 - momentum
        running_mean += momentum * mu
        running_var *= 1 - momentum
        running_var += momentum * var * (m / max(m - 1, 1))
    else:
        mu, var = running_mean, running_var
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu.reshape(shape)) * inv.reshape(shape)
    out = xhat * gamma.data.reshape(shape) + beta.data.reshape(shape)

    def back(g):
        gg = (g * xhat).sum(axis=axes)
        gb = g.sum(axis=axes)
        gxhat = g * gamma.data.reshape(shape)
        if training:
            m = x.size / x.shape[1]
            gx = (inv.reshape(shape) / m) * (
                m * gxhat - gxhat.sum(axis=axes).reshape(shape) - xhat * (gxhat * xhat).sum(axis=axes).reshape(shape)
            )
        else:
            gx = gxhat * inv.reshape(shape)
        return (gx, gg, gb)

    return make_result(out, (x, gamma, beta), back, "batch_norm")


def global_average_pool(x: Tensor) -> Tensor:
    x = as_tensor(x)
    _require_rank4(x, "global_average_pool")
    n, c, h, w = x.shape
    out = x.data.mean(axis=(2, 3), keepdims=True)
    return make_result(out, (x,), lambda g: (np.broadcast_to(g / (h * w), x.shape).copy(),), "gap")


def concat_channels(xs: Sequence[Tensor]) -> Tensor:
    xs = [as_tensor(t) for t in xs]
    if not xs:
        raise DimensionError("concat_channels needs at least one input")
    for t in xs:
        _require_rank4(t, "concat_channels")
    ref = xs[0].shape
    for t in xs[1:]:
        if (t.shape[0], t.shape[2], t.shape[3]) != (ref[0], ref[2], ref[3]):
            raise DimensionError(f"concat_channels: shape {t.shape} incompatible with {ref} (N, H, W must match)")
    out = np.concatenate([t.data for t in xs], axis=1)
    bounds = np.cumsum([0] + [t.shape[1] for t in xs])

    def back(g):
        return tuple(g[:, bounds[k] : bounds[k + 1]] for k in range(len(xs)))

    return make_result(out, xs, back, "concat")


def flatten(x: Tensor) -> Tensor:
    return x.reshape(x.shape[0], -1)


def dense(x: Tensor, weight: Tensor, bias: Optional[Tensor]) -> Tensor:
    """Affine map ``x @ weight + bias`` for ``x`` of shape (N, F)."""
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[0]:
        raise DimensionError(f"dense: cannot multiply {x.shape} by {weight.shape}")
    out = x.data @ weight.data
    if bias is not None:
        out = out + bias.data

    def back(g):
        return (g @ weight.data.T, x.data.T @ g, g.sum(axis=0) if bias is not None else None)

    inputs = (x, weight, bias) if bias is not None else (x, weight)
    return make_result(out, inputs, back, "dense")


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def softmax_xent(logits: Tensor, labels) -> tuple[np.ndarray, Tensor]:
    """Softmax probabilities and mean negative log-likelihood."""
    logits = as_tensor(logits)
    if logits.ndim != 2:
        raise DimensionError(f"softmax_xent expects (N, K) logits, got {logits.shape}")
    n, k = logits.shape
    labels = np.asarray(labels)
    if labels.shape != (n,) or not np.issubdtype(labels.dtype, np.integer):
        raise ValidationError(f"labels must be {n} integer class indices")
    if labels.min() < 0 or labels.max() >= k:
        raise ValidationError(f"labels must lie in [0, {k}), got range [{labels.min()}, {labels.max()}]")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    logp = z - lse[:, None]
    probs = np.exp(logp)
    loss = -logp[np.arange(n), labels].mean()

    def back(g):
        d = probs.copy()
        d[np.arange(n), labels] -= 1.0
        return (d * (float(g) / n),)

    return probs, make_result(np.array(loss), (logits,), back, "softmax_xent")


def activation(x: Tensor, kind: str) -> Tensor:
    return relu(x) if kind == "relu" else x
