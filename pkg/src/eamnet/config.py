"""
Run configuration files (YAML or JSON) with strict key checking.

Example::

    seed: 0
    output_dir: runs/shapes-eam
    variant: eam                    # baseline | eam | eam2 | eam2_maxpool_ablation
    dataset:
      synthetic: {samples_per_class: 200, resolution: 28, noise: 0.05}
      # or: path: data/caltech-tree
      #     resolution: [224, 224]
    model:
      channels: [8, 16, 32]
      convs_per_block: 2
      ratio_denominator: 16
    train: {base_lr: 1.0e-4, max_epochs: 30, patience: 5, batch_size: 32}
    split: {ratios: [0.65, 0.15, 0.20]}
    crossval: {k: 5, val_fraction: 0.15}

A single top-level ``seed`` drives data generation, splitting,
initialization and batch order.  Unknown keys are errors.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field, fields, replace
from typing import Any, Optional

import yaml

from .dataio import SyntheticShapesSpec, generate_shapes, load_dataset, scan_dataset
from .eam import EamConfig, attach_branches
from .errors import ConfigurationError
from .graph import NetworkGraph
from .model import VARIANTS, build_backbone, default_blocks, make_variant
from .training import ArrayDataset, SplitSpec, TrainConfig


def _plain(obj, exclude=("seed",)) -> dict:
    out = {}
    for f in fields(obj):
        if f.name in exclude:
            continue
        v = getattr(obj, f.name)
        out[f.name] = list(v) if isinstance(v, tuple) else v
    return out


def _check_keys(d: Any, allowed, where: str) -> dict:
    if d is None:
        return {}
    if not isinstance(d, dict):
        raise ConfigurationError(f"{where} must be a mapping, got {type(d).__name__}")
    unknown = sorted(set(d) - set(allowed))
    if unknown:
        raise ConfigurationError(f"unknown key(s) {unknown} in {where}; allowed: {sorted(allowed)}")
    return dict(d)


def _dataclass_from(cls, d: Any, where: str, exclude=("seed",), **extra):
    allowed = [f.name for f in fields(cls) if f.name not in exclude]
    d = _check_keys(d, allowed, where)
    for k, v in list(d.items()):
        if isinstance(v, list):
            d[k] = tuple(v)
    try:
        return cls(**d, **extra)
    except (TypeError, ValueError) as exc:
        raise ConfigurationError(f"{where}: {exc}") from exc


@dataclass(frozen=True)
class ModelSection:
    channels: tuple[int, ...] = (16, 32, 64, 128)
    convs_per_block: int = 2
    use_batchnorm: bool = False
    ratio_denominator: int = 16
    min_one_filter: bool = False
    eam: Optional[tuple[dict, ...]] = None  # explicit branch configs override the variant's


@dataclass(frozen=True)
class CrossvalSection:
    k: int = 5
    val_fraction: float = 0.15


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    output_dir: str = "runs/default"
    variant: str = "eam"
    dataset_path: Optional[str] = None
    resolution: tuple[int, int] = (64, 64)
    synthetic: Optional[SyntheticShapesSpec] = None
    model: ModelSection = field(default_factory=ModelSection)
    train: TrainConfig = field(default_factory=TrainConfig)
    split: SplitSpec = field(default_factory=SplitSpec)
    crossval: CrossvalSection = field(default_factory=CrossvalSection)

    @classmethod
    def from_dict(cls, raw: Any) -> "RunConfig":
        top = _check_keys(raw, ["seed", "output_dir", "variant", "dataset", "model", "train", "split", "crossval"], "run config")
        seed = int(top.get("seed", 0))
        variant = top.get("variant", "eam")
        if variant not in VARIANTS:
            raise ConfigurationError(f"variant must be one of {VARIANTS}, got {variant!r}")
        ds = _check_keys(top.get("dataset"), ["path", "synthetic", "resolution"], "dataset")
        if ("path" in ds) == ("synthetic" in ds):
            raise ConfigurationError("dataset needs exactly one of 'path' or 'synthetic'")
        synthetic = None
        resolution = tuple(ds.get("resolution", (64, 64)))
        if "synthetic" in ds:
            synthetic = _dataclass_from(SyntheticShapesSpec, ds["synthetic"] or {}, "dataset.synthetic", seed=seed)
            resolution = (synthetic.resolution, synthetic.resolution)
        if len(resolution) != 2:
            raise ConfigurationError(f"dataset.resolution must be [H, W], got {resolution}")
        model = _dataclass_from(ModelSection, top.get("model"), "model", exclude=())
        if model.eam is not None:
            for i, e in enumerate(model.eam):
                _check_keys(e, [f.name for f in fields(EamConfig)], f"model.eam[{i}]")
        return cls(
            seed=seed,
            output_dir=str(top.get("output_dir", "runs/default")),
            variant=variant,
            dataset_path=ds.get("path"),
            resolution=(int(resolution[0]), int(resolution[1])),
            synthetic=synthetic,
            model=model,
            train=_dataclass_from(TrainConfig, top.get("train"), "train", seed=seed),
            split=_dataclass_from(SplitSpec, top.get("split"), "split", seed=seed),
            crossval=_dataclass_from(CrossvalSection, top.get("crossval"), "crossval", exclude=()),
        )

    @classmethod
    def load(cls, path: str) -> "RunConfig":
        try:
            with open(path) as fh:
                raw = yaml.safe_load(fh)
        except OSError as exc:
            raise ConfigurationError(f"cannot read config {path!r}: {exc.strerror}") from exc
        except yaml.YAMLError as exc:
            raise ConfigurationError(f"config {path!r} is not valid YAML/JSON: {exc}") from exc
        cfg = cls.from_dict(raw)
        if cfg.dataset_path is not None and not os.path.isabs(cfg.dataset_path):
            cfg = replace(cfg, dataset_path=os.path.join(os.path.dirname(os.path.abspath(path)), cfg.dataset_path))
        return cfg

    def with_overrides(self, seed: Optional[int] = None, output_dir: Optional[str] = None, variant: Optional[str] = None) -> "RunConfig":
        cfg = self
        if seed is not None:
            cfg = replace(
                cfg,
                seed=seed,
                train=replace(cfg.train, seed=seed),
                split=replace(cfg.split, seed=seed),
                synthetic=replace(cfg.synthetic, seed=seed) if cfg.synthetic else None,
            )
        if output_dir is not None:
            cfg = replace(cfg, output_dir=output_dir)
        if variant is not None:
            cfg = replace(cfg, variant=variant)
        return cfg

    def to_dict(self) -> dict:
        ds: dict[str, Any] = {}
        if self.synthetic is not None:
            ds["synthetic"] = _plain(self.synthetic)
        else:
            ds["path"] = self.dataset_path
            ds["resolution"] = list(self.resolution)

        return {
            "seed": self.seed,
            "output_dir": self.output_dir,
            "variant": self.variant,
            "dataset": ds,
            "model": _plain(self.model, ()),
            "train": _plain(self.train),
            "split": _plain(self.split),
            "crossval": _plain(self.crossval, ()),
        }

    # -- materialization ---------------------------------------------------

    def load_data(self) -> ArrayDataset:
        if self.synthetic is not None:
            return generate_shapes(self.synthetic)
        return load_dataset(scan_dataset(self.dataset_path, self.resolution))

    def build_graph(self, num_classes: int, in_channels: int) -> NetworkGraph:
        h, w = self.resolution
        blocks = default_blocks(in_channels, self.model.channels, self.model.convs_per_block, self.model.use_batchnorm)
        backbone = build_backbone(blocks, num_classes, (in_channels, h, w))
        if self.model.eam is not None and self.variant != "baseline":
            return attach_branches(backbone, [EamConfig.from_dict(e) for e in self.model.eam])
        return make_variant(backbone, self.variant, self.model.ratio_denominator, self.model.min_one_filter)
