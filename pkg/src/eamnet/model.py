"""
Desk-scale CNN backbones, the four experimental variants, and a weight store.

Backbone layout::

    input -> [block_i: conv x m -> max 2x2|2] x k -> GAP -> flatten -> head

``block_i`` taps name each block's down-sampled output; attention branches
hang off ``block_{k-1}`` (and ``block_{k-2}`` for the two-branch variant).
"""

from __future__ import annotations

import json
import os
import tempfile
import zlib
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .eam import EamConfig, ablation_swap_pool, attach_branches
from .errors import ConfigurationError, DimensionError, ValidationError
from .graph import NetworkGraph, Node
from .layers import (
    ConvSpec,
    activation,
    batch_norm,
    concat_channels,
    conv2d,
    dense,
    flatten,
    global_average_pool,
    he_uniform,
    softmax,
)
from .pooling import PoolSpec, pool
from .tensor import Tensor

VARIANTS = ("baseline", "eam", "eam2", "eam2_maxpool_ablation")
FORMAT_VERSION = 1


@dataclass(frozen=True)
class BlockSpec:
    convs: tuple[ConvSpec, ...]
    downsample: PoolSpec = field(default_factory=lambda: PoolSpec("max", (2, 2), 2, 0))

    def to_dict(self) -> dict:
        return {"convs": [c.to_dict() for c in self.convs], "downsample": self.downsample.to_dict()}


def default_blocks(
    in_channels: int,
    channels: Sequence[int] = (16, 32, 64, 128),
    convs_per_block: int = 2,
    use_batchnorm: bool = False,
) -> list[BlockSpec]:
    blocks = []
    prev = in_channels
    for c in channels:
        convs = []
        for _ in range(convs_per_block):
            convs.append(ConvSpec(prev, c, (3, 3), 1, 1, use_batchnorm, "relu"))
            prev = c
        blocks.append(BlockSpec(tuple(convs)))
    return blocks


def build_backbone(blocks: Sequence[BlockSpec], num_classes: int, input_shape: Sequence[int]) -> NetworkGraph:
    if not blocks:
        raise ConfigurationError("a backbone needs at least one block")
    if num_classes < 2:
        raise ConfigurationError(f"num_classes must be >= 2, got {num_classes}")
    c, h, w = (int(v) for v in input_shape)
    nodes = [Node("input", "input")]
    taps = []
    prev = "input"
    for b, block in enumerate(blocks, start=1):
        if not block.convs:
            raise ConfigurationError(f"block_{b} has no convolutions")
        for j, spec in enumerate(block.convs, start=1):
            if spec.in_channels != c:
                raise ConfigurationError(f"block_{b} conv {j} expects {spec.in_channels} channels, receives {c}")
            try:
                h, w = spec.output_hw(h, w)
            except DimensionError as exc:
                raise ConfigurationError(f"spatial extent collapses in block_{b} conv {j}: {exc}") from exc
            c = spec.out_channels
            name = f"block_{b}.conv_{j}"
            nodes.append(Node(name, "conv", (prev,), conv=spec))
            prev = name
        try:
            h, w = block.downsample.output_hw(h, w)
        except DimensionError as exc:
            raise ConfigurationError(f"spatial extent collapses below 1 at block_{b} downsample: {exc}") from exc
        name = f"block_{b}.pool"
        nodes.append(Node(name, "pool", (prev,), pool=block.downsample))
        taps.append((f"block_{b}", name))
        prev = name
    nodes.append(Node("gap", "gap", (prev,)))
    nodes.append(Node("features", "flatten", ("gap",)))
    nodes.append(Node("head", "dense", ("features",), units=(c, num_classes)))
    return NetworkGraph(tuple(nodes), tuple(taps), "head", num_classes, (int(input_shape[0]), int(input_shape[1]), int(input_shape[2])))


def variant_configs(variant: str, ratio_denominator: int = 16, min_one_filter: bool = False) -> list[EamConfig]:
    if variant not in VARIANTS:
        raise ConfigurationError(f"unknown variant {variant!r}; choose from {VARIANTS}")
    kw = {"ratio_denominator": ratio_denominator, "min_one_filter": min_one_filter}
    if variant == "baseline":
        return []
    if variant == "eam":
        return [EamConfig(attach_point=-2, **kw)]
    configs = [EamConfig(attach_point=-3, interior_convs=(), **kw), EamConfig(attach_point=-2, **kw)]
    if variant == "eam2_maxpool_ablation":
        configs = [ablation_swap_pool(c) for c in configs]
    return configs


def make_variant(
    backbone: NetworkGraph,
    variant: str,
    ratio_denominator: int = 16,
    min_one_filter: bool = False,
) -> NetworkGraph:
    configs = variant_configs(variant, ratio_denominator, min_one_filter)
    if variant.startswith("eam2") and backbone.num_blocks < 3:
        raise ConfigurationError(
            f"variant {variant!r} needs the third-last block tap, but the backbone has only "
            f"{backbone.num_blocks} blocks (taps {backbone.tap_labels})"
        )
    if variant == "eam" and backbone.num_blocks < 2:
        raise ConfigurationError(f"variant 'eam' needs a second-last block tap; taps are {backbone.tap_labels}")
    return attach_branches(backbone, configs)


def init_params(graph: NetworkGraph, seed: int) -> dict[str, np.ndarray]:
    """He-uniform weights, zero biases, identity batch norm.

    Each parameter draws from its own stream keyed by (seed, name), so
    variants sharing a backbone start from identical backbone weights.
    """
    params = {}
    for name, info in graph.parameters().items():
        if info.role == "weight":
            rng = np.random.default_rng([seed, zlib.crc32(name.encode())])
            params[name] = he_uniform(info.shape, info.fan_in, rng)
        elif info.role in ("bn_gamma", "bn_var"):
            params[name] = np.ones(info.shape)
        else:
            params[name] = np.zeros(info.shape)
    return params


@dataclass
class ForwardPass:
    logits: Tensor
    activations: dict[str, Tensor]
    params: dict[str, Tensor]


class Model:
    """A graph plus the mutable weight store one trainer owns."""

    def __init__(self, graph: NetworkGraph, params: Optional[dict[str, np.ndarray]] = None, seed: int = 0):
        self.graph = graph
        self.params = init_params(graph, seed) if params is None else {k: np.array(v, dtype=np.float64) for k, v in params.items()}
        expected = graph.parameters()
        missing = set(expected) - set(self.params)
        if missing:
            raise ValidationError(f"weights missing for {sorted(missing)}")
        for name, info in expected.items():
            if self.params[name].shape != info.shape:
                raise ValidationError(f"weight {name} has shape {self.params[name].shape}, expected {info.shape}")

    @property
    def num_classes(self) -> int:
        return self.graph.num_classes

    def parameter_count(self) -> int:
        return self.graph.parameter_count()

    def trainable_names(self, frozen_blocks: int = 0) -> list[str]:
        frozen = tuple(f"block_{b}." for b in range(1, frozen_blocks + 1))
        return [n for n, info in self.graph.parameters().items() if info.trainable and not n.startswith(frozen)]

    def forward(
        self,
        x,
        training: bool = False,
        track: Sequence[str] = (),
        keep: Sequence[str] = (),
    ) -> ForwardPass:
        """Run the graph on ``x`` (N, C, H, W).

        Parameters named in ``track`` are wrapped as gradient-requiring
        tensors; record them by calling inside a ``GradTape``.  Node outputs
        named in ``keep`` are returned in ``activations``.
        """
        x = x if isinstance(x, Tensor) else Tensor._wrap(np.asarray(x, dtype=np.float64).copy())
        if x.ndim != 4 or tuple(x.shape[1:]) != tuple(self.graph.input_shape):
            raise DimensionError(f"model expects input (N, {', '.join(map(str, self.graph.input_shape))}), got {x.shape}")
        track = set(track)
        ptens = {name: Tensor._wrap(arr.view(), requires_grad=name in track) for name, arr in self.params.items()}
        keep = set(keep)
        acts: dict[str, Tensor] = {}
        vals: dict[str, Tensor] = {}
        for node in self.graph.nodes:
            if node.op == "input":
                out = x
            elif node.op == "conv":
                out = self._conv(node, vals[node.inputs[0]], ptens, training)
            elif node.op == "pool":
                out = pool(vals[node.inputs[0]], node.pool)
            elif node.op == "gap":
                out = global_average_pool(vals[node.inputs[0]])
            elif node.op == "concat":
                out = concat_channels([vals[i] for i in node.inputs])
            elif node.op == "flatten":
                out = flatten(vals[node.inputs[0]])
            else:
                out = dense(vals[node.inputs[0]], ptens[f"{node.name}.weight"], ptens[f"{node.name}.bias"])
            vals[node.name] = out
            if node.name in keep:
                acts[node.name] = out
        return ForwardPass(vals[self.graph.output], acts, {k: v for k, v in ptens.items() if k in track})

    def _conv(self, node: Node, x: Tensor, ptens: dict[str, Tensor], training: bool) -> Tensor:
        spec = node.conv
        out = conv2d(x, ptens[f"{node.name}.weight"], ptens[f"{node.name}.bias"], spec)
        if spec.use_batchnorm:
            out = batch_norm(
                out,
                ptens[f"{node.name}.bn_gamma"],
                ptens[f"{node.name}.bn_beta"],
                self.params[f"{node.name}.bn_mean"],
                self.params[f"{node.name}.bn_var"],
                training,
            )
        return activation(out, spec.activation)

    def features(self, x) -> np.ndarray:
        """Classifier input (N, F) for ``x``."""
        return self.forward(x, keep=("features",)).activations["features"].data

    def predict_proba(self, x: np.ndarray, batch_size: int = 256) -> np.ndarray:
        chunks = [softmax(self.forward(x[i : i + batch_size]).logits.data) for i in range(0, len(x), batch_size)]
        return np.concatenate(chunks, axis=0)

    def state(self) -> dict[str, np.ndarray]:
        return {k: v.copy() for k, v in self.params.items()}

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        for k, v in state.items():
            self.params[k] = v.copy()

    def save(self, path: str) -> None:
        """Write graph structure and little-endian float64 weights to one ``.npz`` container."""
        header = json.dumps({"format": "eamnet-model", "version": FORMAT_VERSION, "graph": self.graph.to_dict()})
        arrays = {f"w/{k}": np.ascontiguousarray(v, dtype="<f8") for k, v in self.params.items()}
        d = os.path.dirname(os.path.abspath(path))
        fd, tmp = tempfile.mkstemp(dir=d, suffix=".npz.tmp")
        try:
            with os.fdopen(fd, "wb") as fh:
                np.savez(fh, __header__=np.array(header), **arrays)
            os.replace(tmp, path)
        except BaseException:
            if os.path.exists(tmp):
                os.unlink(tmp)
            raise

    @classmethod
    def load(cls, path: str) -> "Model":
        with np.load(path, allow_pickle=False) as z:
            header = json.loads(str(z["__header__"]))
            if header.get("format") != "eamnet-model":
                raise ValidationError(f"{path} is not an eamnet model file")
            params = {k[2:]: z[k].astype(np.float64) for k in z.files if k.startswith("w/")}
        return cls(NetworkGraph.from_dict(header["graph"]), params)
