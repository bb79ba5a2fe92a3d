"""
Command-line interface.

    eamnet edge-extract IMAGE... --out DIR [--pool 2 5] [--stride 2]
    eamnet train     --config run.yaml [--seed N] [--out DIR]
    eamnet ablate    --config run.yaml [--seed N] [--out DIR]
    eamnet crossval  --config run.yaml [--k 5] [--seed N] [--out DIR]
    eamnet gradcam   --model model.npz IMAGE... [--class K] [--tap block_2] [--alpha 0 0.5] --out DIR

Exit status is 0 on success, 2 for configuration/validation errors, 3 for
dataset and I/O errors, 4 for diverged training and 1 otherwise.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
import tempfile
import time
from typing import Optional, Sequence

import numpy as np

from . import __version__
from .config import RunConfig
from .dataio import load_image, resize_bilinear, to_samples, write_pnm
from .errors import ConfigurationError, DatasetError, EamError, TrainingDivergedError
from .explain import grad_cam, overlay
from .metrics import METRIC_NAMES
from .model import VARIANTS, Model
from .pooling import PoolSpec, edge_map
from .training import ArrayDataset, EpochRecord, crossval, evaluate, stratified_split, train

log = logging.getLogger("eamnet")


def write_json_atomic(path: str, payload) -> None:
    d = os.path.dirname(os.path.abspath(path))
    os.makedirs(d, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=d, suffix=".tmp")
    with os.fdopen(fd, "w") as fh:
        json.dump(payload, fh, indent=2, default=_json_default)
        fh.write("\n")
    os.replace(tmp, path)


def _json_default(obj):
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    raise TypeError(f"cannot serialize {type(obj).__name__}")


def _digest(*arrays: np.ndarray) -> str:
    h = hashlib.sha256()
    for a in arrays:
        h.update(np.ascontiguousarray(a, dtype="<i8").tobytes())
        h.update(b"|")
    return h.hexdigest()[:16]


def _stem(path: str) -> str:
    return os.path.splitext(os.path.basename(path))[0]


# ---------------------------------------------------------------------------
# edge-extract
# ---------------------------------------------------------------------------


def cmd_edge_extract(inputs: Sequence[str], pools: Sequence[int], stride: int, out_dir: str) -> dict:
    """Max-Min edge maps for every input and pool size; returns the summary written to ``edges.json``."""
    os.makedirs(out_dir, exist_ok=True)
    rows = []
    for path in inputs:
        img = load_image(path)
        for f in pools:
            spec = PoolSpec("maxmin", (f, f), stride, 0)
            raw = edge_map(img[None], spec, rescale=False).data[0]
            peak = raw.max()
            scaled = edge_map(img[None], spec).data[0]
            ext = ".ppm" if raw.shape[0] == 3 else ".pgm"
            target = os.path.join(out_dir, f"{_stem(path)}_maxmin_{f}x{f}s{stride}{ext}")
            write_pnm(target, np.rint(scaled).astype(np.int64).transpose(1, 2, 0))
            rows.append(
                {
                    "input": path,
                    "output": target,
                    "pool": f,
                    "stride": stride,
                    "shape": list(raw.shape),
                    "mean_before_rescale": float(raw.mean() * 255.0),
                    "max_before_rescale": float(peak * 255.0),
                }
            )
            log.info("%s -> %s (mean %.3f)", path, target, rows[-1]["mean_before_rescale"])
    summary = {"tool": "eamnet", "version": __version__, "maps": rows}
    write_json_atomic(os.path.join(out_dir, "edges.json"), summary)
    return summary


# ---------------------------------------------------------------------------
# train / ablate / crossval
# ---------------------------------------------------------------------------


def _prepare(cfg: RunConfig):
    data = cfg.load_data()
    graph = cfg.build_graph(data.num_classes, data.x.shape[1])
    return data, graph


def run_training(cfg: RunConfig, data: Optional[ArrayDataset] = None) -> dict:
    """Train one variant; writes ``history.jsonl``, ``model.npz`` and ``manifest.json`` under ``cfg.output_dir``."""
    if data is None:
        data = cfg.load_data()
    graph = cfg.build_graph(data.num_classes, data.x.shape[1])
    out = cfg.output_dir
    os.makedirs(out, exist_ok=True)
    tr, va, te = stratified_split(data.y, cfg.split)
    model = Model(graph, seed=cfg.seed)
    hist_path = os.path.join(out, "history.jsonl")
    with open(hist_path + ".tmp", "w") as fh:

        def on_epoch(rec: EpochRecord):
            fh.write(json.dumps(rec.to_dict()) + "\n")
            fh.flush()
            log.info(
                "epoch %d lr %.3g loss %.4f acc %.3f val_loss %s (%.1fs)",
                rec.epoch, rec.lr, rec.train_loss, rec.train_accuracy,
                "n/a" if rec.val_loss is None else f"{rec.val_loss:.4f}", rec.seconds,
            )

        _, history = train(model, data.subset(tr), data.subset(va) if len(va) else None, cfg.train, on_epoch)
    os.replace(hist_path + ".tmp", hist_path)
    report = evaluate(model, data.subset(te))
    report.epoch_seconds = [r.seconds for r in history.records]
    model_path = os.path.join(out, "model.npz")
    model.save(model_path)
    manifest = {
        "tool": "eamnet",
        "version": __version__,
        "seed": cfg.seed,
        "config": cfg.to_dict(),
        "variant": cfg.variant,
        "parameter_count": model.parameter_count(),
        "classes": data.class_names,
        "split": {"train": len(tr), "val": len(va), "test": len(te), "digest": _digest(tr, va, te)},
        "history": history.to_dict(),
        "metrics": report.to_dict(),
        "secs_per_epoch": history.secs_per_epoch,
        "artifacts": [hist_path, model_path, os.path.join(out, "manifest.json")],
    }
    write_json_atomic(os.path.join(out, "manifest.json"), manifest)
    return manifest


def cmd_train(config_path: str, seed: Optional[int] = None, out: Optional[str] = None) -> dict:
    cfg = RunConfig.load(config_path).with_overrides(seed=seed, output_dir=out)
    return run_training(cfg)


def cmd_ablate(config_path: str, seed: Optional[int] = None, out: Optional[str] = None) -> dict:
    """Run every variant on one dataset and split; writes ``comparison.json`` and ``comparison.md``."""
    base = RunConfig.load(config_path).with_overrides(seed=seed, output_dir=out)
    data = base.load_data()
    # fail on configuration problems before any training starts
    for v in VARIANTS:
        base.with_overrides(variant=v).build_graph(data.num_classes, data.x.shape[1])
    rows = []
    for v in VARIANTS:
        cfg = base.with_overrides(variant=v, output_dir=os.path.join(base.output_dir, v))
        m = run_training(cfg, data)
        rows.append(
            {
                "variant": v,
                "accuracy": m["metrics"]["accuracy"],
                "f1": m["metrics"]["f1"],
                "auc": m["metrics"]["auc"],
                "epochs": len(m["history"]["records"]),
                "secs_per_epoch": m["secs_per_epoch"],
                "parameter_count": m["parameter_count"],
                "split_digest": m["split"]["digest"],
                "manifest": os.path.join(cfg.output_dir, "manifest.json"),
            }
        )
    comparison = {"tool": "eamnet", "version": __version__, "seed": base.seed, "config": base.to_dict(), "rows": rows}
    write_json_atomic(os.path.join(base.output_dir, "comparison.json"), comparison)
    lines = [
        "| variant | accuracy | macro F1 | AUC | epochs | secs/epoch | parameters |",
        "|---|---|---|---|---|---|---|",
    ]
    for r in rows:
        lines.append(
            f"| {r['variant']} | {r['accuracy']:.4f} | {r['f1']:.4f} | {r['auc']:.4f} | {r['epochs']} "
            f"| {r['secs_per_epoch']:.2f} | {r['parameter_count']} |"
        )
    with open(os.path.join(base.output_dir, "comparison.md"), "w") as fh:
        fh.write("\n".join(lines) + "\n")
    return comparison


def cmd_crossval(config_path: str, k: Optional[int] = None, seed: Optional[int] = None, out: Optional[str] = None) -> dict:
    """Stratified k-fold run; writes ``crossval.json`` and a fold table ``crossval.md``."""
    cfg = RunConfig.load(config_path).with_overrides(seed=seed, output_dir=out)
    k = k or cfg.crossval.k
    data, graph = _prepare(cfg)
    os.makedirs(cfg.output_dir, exist_ok=True)

    def on_fold(f, report, history):
        log.info("fold %d/%d accuracy %.4f f1 %.4f", f, k, report.accuracy, report.f1)

    folds = crossval(lambda f: Model(graph, seed=cfg.seed + f), data, k, cfg.train, cfg.crossval.val_fraction, on_fold)
    table = folds.table()
    doc = {
        "tool": "eamnet",
        "version": __version__,
        "seed": cfg.seed,
        "k": k,
        "variant": cfg.variant,
        "config": cfg.to_dict(),
        "folds": folds.to_dict(),
        "table": table,
    }
    write_json_atomic(os.path.join(cfg.output_dir, "crossval.json"), doc)
    lines = ["| fold | " + " | ".join(METRIC_NAMES) + " |", "|---" * (len(METRIC_NAMES) + 1) + "|"]
    for row in table:
        cells = [row[m] if isinstance(row[m], str) else f"{row[m]:.4f}" for m in METRIC_NAMES]
        lines.append(f"| {row['fold']} | " + " | ".join(cells) + " |")
    with open(os.path.join(cfg.output_dir, "crossval.md"), "w") as fh:
        fh.write("\n".join(lines) + "\n")
    return doc


# ---------------------------------------------------------------------------
# gradcam
# ---------------------------------------------------------------------------


def _fit_image(img: np.ndarray, model: Model) -> np.ndarray:
    c, h, w = model.graph.input_shape
    img = resize_bilinear(img, (h, w))
    if img.shape[0] != c:
        img = img.mean(axis=0, keepdims=True) if c == 1 else np.repeat(img[:1], c, axis=0)
    return img


def cmd_gradcam(
    model_path: str,
    images: Sequence[str],
    out_dir: str,
    target_class: Optional[int] = None,
    tap: Optional[str] = None,
    alphas: Sequence[float] = (0.0,),
) -> dict:
    """Heatmap PPMs per image and alpha; ``alpha=0`` is the bare heatmap."""
    model = Model.load(model_path)
    os.makedirs(out_dir, exist_ok=True)
    rows = []
    for path in images:
        img = _fit_image(load_image(path), model)
        hm = grad_cam(model, img, target_class, tap)
        for alpha in alphas:
            blended = overlay(hm, img, alpha).data[0]
            target = os.path.join(out_dir, f"{_stem(path)}_gradcam_{hm.tap}_c{hm.target_class}_a{alpha:g}.ppm")
            write_pnm(target, to_samples(blended))
            rows.append({"input": path, "output": target, "tap": hm.tap, "class": hm.target_class, "alpha": alpha})
    summary = {"tool": "eamnet", "version": __version__, "model": model_path, "heatmaps": rows}
    write_json_atomic(os.path.join(out_dir, "gradcam.json"), summary)
    return summary


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="eamnet", description="Max-Min pooling / Edge Attention Module toolkit")
    p.add_argument("--version", action="version", version=f"eamnet {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    e = sub.add_parser("edge-extract", help="write Max-Min pooled edge maps of PGM/PPM images")
    e.add_argument("images", nargs="+")
    e.add_argument("--pool", type=int, nargs="+", default=[2, 5], help="square pool sizes (default: 2 5)")
    e.add_argument("--stride", type=int, default=2)
    e.add_argument("--out", required=True)

    for name, text in (("train", "train one variant"), ("ablate", "train all four variants"), ("crossval", "stratified k-fold")):
        s = sub.add_parser(name, help=text)
        s.add_argument("--config", required=True)
        s.add_argument("--seed", type=int)
        s.add_argument("--out")
        if name == "crossval":
            s.add_argument("--k", type=int)

    g = sub.add_parser("gradcam", help="Grad-CAM heatmaps from a saved model")
    g.add_argument("images", nargs="+")
    g.add_argument("--model", required=True)
    g.add_argument("--class", dest="target_class", type=int)
    g.add_argument("--tap")
    g.add_argument("--alpha", type=float, nargs="+", default=[0.0])
    g.add_argument("--out", required=True)
    return p


def exit_code(exc: BaseException) -> int:
    if isinstance(exc, TrainingDivergedError):
        return 4
    if isinstance(exc, (DatasetError, OSError)):
        return 3
    if isinstance(exc, EamError):
        return 2
    return 1


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    started = time.perf_counter()
    try:
        if args.command == "edge-extract":
            cmd_edge_extract(args.images, args.pool, args.stride, args.out)
        elif args.command == "train":
            cmd_train(args.config, args.seed, args.out)
        elif args.command == "ablate":
            cmd_ablate(args.config, args.seed, args.out)
        elif args.command == "crossval":
            cmd_crossval(args.config, args.k, args.seed, args.out)
        else:
            cmd_gradcam(args.model, args.images, args.out, args.target_class, args.tap, args.alpha)
    except (EamError, OSError) as exc:
        category = getattr(exc, "category", "io")
        print(f"eamnet: {category} error: {exc}", file=sys.stderr)
        return exit_code(exc)
    log.info("done in %.1fs", time.perf_counter() - started)
    return 0


if __name__ == "__main__":
    sys.exit(main())
