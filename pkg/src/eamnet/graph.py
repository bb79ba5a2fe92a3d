"""Immutable layer graph with labeled taps and parameter bookkeeping."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Optional, Union

from .errors import ConfigurationError, DimensionError
from .layers import ConvSpec
from .pooling import PoolSpec

NODE_OPS = ("input", "conv", "pool", "gap", "concat", "flatten", "dense")


@dataclass(frozen=True)
class Node:
    name: str
    op: str
    inputs: tuple[str, ...] = ()
    conv: Optional[ConvSpec] = None
    pool: Optional[PoolSpec] = None
    units: Optional[tuple[int, int]] = None  # dense (in_features, out_features)

    def to_dict(self) -> dict:
        d: dict[str, Any] = {"name": self.name, "op": self.op, "inputs": list(self.inputs)}
        if self.conv is not None:
            d["conv"] = self.conv.to_dict()
        if self.pool is not None:
            d["pool"] = self.pool.to_dict()
        if self.units is not None:
            d["units"] = list(self.units)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "Node":
        return cls(
            name=d["name"],
            op=d["op"],
            inputs=tuple(d.get("inputs", ())),
            conv=ConvSpec.from_dict(d["conv"]) if "conv" in d else None,
            pool=PoolSpec.from_dict(d["pool"]) if "pool" in d else None,
            units=tuple(d["units"]) if "units" in d else None,
        )


@dataclass(frozen=True)
class ParamInfo:
    shape: tuple[int, ...]
    fan_in: int
    role: str  # weight | bias | bn_gamma | bn_beta | bn_mean | bn_var
    trainable: bool


@dataclass(frozen=True)
class NetworkGraph:
    """Layers in topological order plus the metadata needed to extend them.

    ``taps`` maps block labels (``block_1`` ... ``block_k``) to the node
    whose output is that block's down-sampled activation.  ``branches``
    records the names of attached attention branches.
    """

    nodes: tuple[Node, ...]
    taps: tuple[tuple[str, str], ...]
    output: str
    num_classes: int
    input_shape: tuple[int, int, int]
    base_features: str = "gap"
    branches: tuple[Any, ...] = field(default=())

    def __post_init__(self):
        seen: set[str] = set()
        for node in self.nodes:
            if node.op not in NODE_OPS:
                raise ConfigurationError(f"unknown op {node.op!r} in node {node.name!r}")
            if node.name in seen:
                raise ConfigurationError(f"duplicate node name {node.name!r}")
            for src in node.inputs:
                if src not in seen:
                    raise ConfigurationError(f"node {node.name!r} reads {src!r} before it is defined")
            seen.add(node.name)
        labels = [t[0] for t in self.taps]
        if len(set(labels)) != len(labels):
            raise ConfigurationError(f"tap labels must be unique: {labels}")
        if self.output not in seen:
            raise ConfigurationError(f"output node {self.output!r} missing")

    @property
    def tap_map(self) -> dict[str, str]:
        return dict(self.taps)

    @property
    def tap_labels(self) -> list[str]:
        return [t[0] for t in self.taps]

    @property
    def num_blocks(self) -> int:
        return len(self.taps)

    def node(self, name: str) -> Node:
        for n in self.nodes:
            if n.name == name:
                return n
        raise KeyError(name)

    def resolve_tap(self, point: Union[int, str]) -> str:
        """Tap label for a label string, a 1-based block number, or a negative offset from the end."""
        labels = self.tap_labels
        if isinstance(point, str):
            if point not in labels:
                raise ConfigurationError(f"tap {point!r} does not exist; available taps: {labels}")
            return point
        k = len(labels)
        idx = point - 1 if point > 0 else k + point
        if point == 0 or not 0 <= idx < k:
            raise ConfigurationError(f"attach point {point} is invalid for a backbone with {k} blocks (taps {labels})")
        return labels[idx]

    def shapes(self) -> dict[str, tuple[int, ...]]:
        """Per-sample output shape of every node (batch axis omitted)."""
        out: dict[str, tuple[int, ...]] = {}
        for node in self.nodes:
            if node.op == "input":
                out[node.name] = tuple(self.input_shape)
                continue
            src = [out[i] for i in node.inputs]
            try:
                if node.op == "conv":
                    c, h, w = src[0]
                    if c != node.conv.in_channels:
                        raise DimensionError(f"{c} channels feed a conv expecting {node.conv.in_channels}")
                    out[node.name] = (node.conv.out_channels, *node.conv.output_hw(h, w))
                elif node.op == "pool":
                    c, h, w = src[0]
                    out[node.name] = (c, *node.pool.output_hw(h, w))
                elif node.op == "gap":
                    out[node.name] = (src[0][0], 1, 1)
                elif node.op == "concat":
                    if len({s[1:] for s in src}) != 1:
                        raise DimensionError(f"concat inputs disagree on spatial extent: {src}")
                    out[node.name] = (sum(s[0] for s in src), *src[0][1:])
                elif node.op == "flatten":
                    n = 1
                    for e in src[0]:
                        n *= e
                    out[node.name] = (n,)
                elif node.op == "dense":
                    if src[0] != (node.units[0],):
                        raise DimensionError(f"dense expects {node.units[0]} features, got {src[0]}")
                    out[node.name] = (node.units[1],)
            except DimensionError as exc:
                raise ConfigurationError(f"node {node.name!r}: {exc}") from exc
        return out

    def parameters(self) -> dict[str, ParamInfo]:
        params: dict[str, ParamInfo] = {}
        for node in self.nodes:
            if node.op == "conv":
                spec = node.conv
                fan_in = spec.in_channels * spec.kernel[0] * spec.kernel[1]
                params[f"{node.name}.weight"] = ParamInfo(spec.weight_shape, fan_in, "weight", True)
                params[f"{node.name}.bias"] = ParamInfo((spec.out_channels,), fan_in, "bias", True)
                if spec.use_batchnorm:
                    c = (spec.out_channels,)
                    params[f"{node.name}.bn_gamma"] = ParamInfo(c, fan_in, "bn_gamma", True)
                    params[f"{node.name}.bn_beta"] = ParamInfo(c, fan_in, "bn_beta", True)
                    params[f"{node.name}.bn_mean"] = ParamInfo(c, fan_in, "bn_mean", False)
                    params[f"{node.name}.bn_var"] = ParamInfo(c, fan_in, "bn_var", False)
            elif node.op == "dense":
                fin, fout = node.units
                params[f"{node.name}.weight"] = ParamInfo((fin, fout), fin, "weight", True)
                params[f"{node.name}.bias"] = ParamInfo((fout,), fin, "bias", True)
        return params

    def parameter_count(self) -> int:
        total = 0
        for info in self.parameters().values():
            if info.trainable:
                n = 1
                for e in info.shape:
                    n *= e
                total += n
        return total

    def to_dict(self) -> dict:
        return {
            "nodes": [n.to_dict() for n in self.nodes],
            "taps": [list(t) for t in self.taps],
            "output": self.output,
            "num_classes": self.num_classes,
            "input_shape": list(self.input_shape),
            "base_features": self.base_features,
            "branches": [b.to_dict() for b in self.branches],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkGraph":
        from .eam import EamBranch

        return cls(
            nodes=tuple(Node.from_dict(n) for n in d["nodes"]),
            taps=tuple((a, b) for a, b in d["taps"]),
            output=d["output"],
            num_classes=int(d["num_classes"]),
            input_shape=tuple(d["input_shape"]),
            base_features=d.get("base_features", "gap"),
            branches=tuple(EamBranch.from_dict(b) for b in d.get("branches", [])),
        )
