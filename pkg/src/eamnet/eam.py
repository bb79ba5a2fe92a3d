"""
Edge Attention Module branches.

A branch taps a backbone block output, down-samples it with Max-Min
pooling (5x5, stride 2), runs optional 3x3 convolutions, ends in one final
convolution and global average pooling, and is concatenated with the
backbone's pooled features right before the classifier.  The final
convolution's width is the backbone's final channel count divided by the
ratio denominator (16 by default), so edge features stay a small share of
the classifier input.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Optional, Sequence, Union

from .errors import ConfigurationError, DimensionError, ValidationError
from .graph import NetworkGraph, Node
from .layers import ConvSpec
from .pooling import PoolSpec

DEFAULT_INTERIOR_CONVS = 2


@dataclass(frozen=True)
class EamConfig:
    """Declarative description of one attention branch.

    ``interior_convs=None`` requests the default interior stack; an empty
    tuple requests none.  ``final_filters=None`` derives the width from the
    ratio rule.
    """

    attach_point: Union[int, str] = -2
    pool: PoolSpec = PoolSpec("maxmin", (5, 5), 2, 0)
    interior_convs: Optional[tuple[ConvSpec, ...]] = None
    final_filters: Optional[int] = None
    ratio_denominator: int = 16
    min_one_filter: bool = False
    use_batchnorm: bool = False
    activation: str = "relu"

    def __post_init__(self):
        if self.pool.kind not in ("maxmin", "max"):
            raise ConfigurationError(f"EAM pooling must be 'maxmin' (or 'max' for the ablation), got {self.pool.kind!r}")
        if self.ratio_denominator < 1:
            raise ConfigurationError(f"ratio_denominator must be positive, got {self.ratio_denominator}")
        if self.final_filters is not None and self.final_filters < 1:
            raise ConfigurationError(f"final_filters must be positive, got {self.final_filters}")
        if self.interior_convs is not None:
            object.__setattr__(self, "interior_convs", tuple(self.interior_convs))

    def resolve_final_filters(self, base_final_channels: int) -> int:
        if self.final_filters is not None:
            return self.final_filters
        k = base_final_channels // self.ratio_denominator
        if k == 0:
            if not self.min_one_filter:
                raise ConfigurationError(
                    f"{base_final_channels} base channels / ratio {self.ratio_denominator} leaves 0 attention "
                    "filters; set min_one_filter to clamp to 1"
                )
            k = 1
        return k

    def to_dict(self) -> dict:
        d = {
            "attach_point": self.attach_point,
            "pool": self.pool.to_dict(),
            "final_filters": self.final_filters,
            "ratio_denominator": self.ratio_denominator,
            "min_one_filter": self.min_one_filter,
            "use_batchnorm": self.use_batchnorm,
            "activation": self.activation,
        }
        d["interior_convs"] = None if self.interior_convs is None else [c.to_dict() for c in self.interior_convs]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "EamConfig":
        d = dict(d)
        if "pool" in d:
            d["pool"] = PoolSpec.from_dict(d["pool"])
        if d.get("interior_convs") is not None:
            d["interior_convs"] = tuple(ConvSpec.from_dict(c) for c in d["interior_convs"])
        return cls(**d)


@dataclass(frozen=True)
class EamBranch:
    name: str
    attach: str
    pool: PoolSpec
    interior: tuple[ConvSpec, ...]
    final: ConvSpec

    @property
    def out_channels(self) -> int:
        return self.final.out_channels

    @property
    def convs(self) -> tuple[ConvSpec, ...]:
        return (*self.interior, self.final)

    @property
    def layers(self) -> list[str]:
        return [f"{self.pool.kind}_pool"] + ["conv"] * len(self.convs) + ["gap"]

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "attach": self.attach,
            "pool": self.pool.to_dict(),
            "interior": [c.to_dict() for c in self.interior],
            "final": self.final.to_dict(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "EamBranch":
        return cls(
            name=d["name"],
            attach=d["attach"],
            pool=PoolSpec.from_dict(d["pool"]),
            interior=tuple(ConvSpec.from_dict(c) for c in d["interior"]),
            final=ConvSpec.from_dict(d["final"]),
        )


def default_interior(in_channels: int, final_filters: int, count: int = DEFAULT_INTERIOR_CONVS, **conv_kw) -> tuple[ConvSpec, ...]:
    """3x3 'same' convolutions whose widths shrink geometrically toward ``final_filters``."""
    specs = []
    prev = in_channels
    for i in range(1, count + 1):
        width = max(1, round(in_channels * (final_filters / in_channels) ** (i / (count + 1))))
        specs.append(ConvSpec(prev, width, (3, 3), 1, 1, **conv_kw))
        prev = width
    return tuple(specs)


def build_eam(
    base_channels_at_attach: int,
    base_final_channels: int,
    config: EamConfig = EamConfig(),
    name: str = "eam1",
    attach_label: str = "",
) -> EamBranch:
    if base_channels_at_attach < 1 or base_final_channels < 1:
        raise ValidationError("channel counts must be positive")
    k = config.resolve_final_filters(base_final_channels)
    conv_kw = {"use_batchnorm": config.use_batchnorm, "activation": config.activation}
    if config.interior_convs is None:
        interior = default_interior(base_channels_at_attach, k, **conv_kw)
    else:
        interior = config.interior_convs
    prev = base_channels_at_attach
    for i, spec in enumerate(interior):
        if spec.in_channels != prev:
            raise ConfigurationError(f"{name} interior conv {i + 1} expects {spec.in_channels} channels, receives {prev}")
        prev = spec.out_channels
    final = ConvSpec(prev, k, (3, 3), 1, 1, **conv_kw)
    return EamBranch(name, attach_label or str(config.attach_point), config.pool, tuple(interior), final)


def attach_branches(backbone: NetworkGraph, configs: Sequence[EamConfig]) -> NetworkGraph:
    """Return a graph whose classifier sees [GAP(backbone), GAP(branch_1), ...]."""
    if not configs:
        return backbone
    if backbone.branches:
        raise ConfigurationError("backbone already carries attention branches; strip them first")
    shapes = backbone.shapes()
    base_c = shapes[backbone.base_features][0]
    core = [n for n in backbone.nodes if n.name not in ("features", backbone.output)]
    taps = backbone.tap_map
    branches = []
    nodes = list(core)
    for i, cfg in enumerate(configs, start=1):
        label = backbone.resolve_tap(cfg.attach_point)
        src = taps[label]
        c, h, w = shapes[src]
        name = f"eam{i}"
        branch = build_eam(c, base_c, cfg, name, label)
        try:
            ph, pw = branch.pool.output_hw(h, w)
            for spec in branch.convs:
                nh, nw = spec.output_hw(ph, pw)
                if nh > ph or nw > pw:
                    raise ConfigurationError(f"{name}: convolutions may not enlarge the spatial extent")
                ph, pw = nh, nw
        except DimensionError as exc:
            raise ConfigurationError(f"{name} at {label} ({h}x{w}): {exc}") from exc
        nodes.append(Node(f"{name}.pool", "pool", (src,), pool=branch.pool))
        prev = f"{name}.pool"
        for j, spec in enumerate(branch.interior, start=1):
            nodes.append(Node(f"{name}.conv_{j}", "conv", (prev,), conv=spec))
            prev = f"{name}.conv_{j}"
        nodes.append(Node(f"{name}.final", "conv", (prev,), conv=branch.final))
        nodes.append(Node(f"{name}.gap", "gap", (f"{name}.final",)))
        branches.append(branch)
    width = base_c + sum(b.out_channels for b in branches)
    nodes.append(Node("concat", "concat", (backbone.base_features, *(f"{b.name}.gap" for b in branches))))
    nodes.append(Node("features", "flatten", ("concat",)))
    nodes.append(Node(backbone.output, "dense", ("features",), units=(width, backbone.num_classes)))
    return replace(backbone, nodes=tuple(nodes), branches=tuple(branches))


def strip_branches(graph: NetworkGraph) -> NetworkGraph:
    """Remove every attention branch, restoring the plain backbone."""
    if not graph.branches:
        return graph
    prefixes = tuple(f"{b.name}." for b in graph.branches)
    keep = [n for n in graph.nodes if not n.name.startswith(prefixes) and n.name not in ("concat", "features", graph.output)]
    base_c = graph.shapes()[graph.base_features][0]
    keep.append(Node("features", "flatten", (graph.base_features,)))
    keep.append(Node(graph.output, "dense", ("features",), units=(base_c, graph.num_classes)))
    return replace(graph, nodes=tuple(keep), branches=())


def ablation_swap_pool(config: EamConfig) -> EamConfig:
    """Same branch with Max-Min pooling replaced by max pooling of identical geometry."""
    if config.pool.kind != "maxmin":
        raise ConfigurationError(f"ablation swap expects a maxmin branch, got {config.pool.kind!r}")
    return replace(config, pool=config.pool.with_kind("max"))
