"""Command-line front door: ingestion -> segmentation -> graphs -> training.

Subcommands:

  build-graphs  --config FILE          write .spxg graph datasets + summary
  train         --config FILE [--model cnn|gnn|coupled] [--alpha F] [--seed N]
  evaluate      --checkpoint F --data FILE   (.spxg file or a config file)
  sweep         --config FILE [--model K]    full hyperparameter grid
  report        RUN_DIR [RUN_DIR...]         CNN vs CNN+GNN accuracy table
  segment       --image F.p[gp]m --n N       label-map visualization as PPM

Configuration is an INI file with [data], [slic], [graph], [train], [output]
sections; command-line flags override file values. Relative output dirs are
placed under $SPIXEL_OUTPUT_ROOT when that variable is set. A command exits
0 only if its artifact was fully written; partial outputs are removed on
failure. The seed determines every stochastic choice (subset selection,
validation split, initialization, shuffling), so build-graphs and train must
run with the same seed for coupled datasets to stay index-aligned.
"""

from __future__ import annotations

import argparse
import configparser
import json
import os
import shutil
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import graphgen, imaging, models, slic, train
from .errors import ConfigError, SpixelError

OUTPUT_ROOT_ENV = "SPIXEL_OUTPUT_ROOT"


@dataclass
class RunSpec:
    """Validated configuration for one pipeline invocation."""

    name: str
    data: dict
    slic_cfg: slic.SlicConfig
    graph_cfg: graphgen.GraphConfig
    train_cfg: train.TrainConfig
    model_kind: str
    out_dir: Path
    feature_mode_auto: bool


def _out_path(raw: str) -> Path:
    p = Path(raw)
    root = os.environ.get(OUTPUT_ROOT_ENV)
    if root and not p.is_absolute():
        return Path(root) / p
    return p


def load_spec(config_path, overrides: dict | None = None) -> RunSpec:
    """Parse and validate an INI config; overrides win over file values."""
    cp = configparser.ConfigParser()
    read = cp.read(config_path)
    if not read:
        raise ConfigError(f"cannot read config file {config_path}")
    overrides = overrides or {}

    data = dict(cp["data"]) if cp.has_section("data") else {}
    fmt = data.get("format", "idx")
    if fmt not in ("idx", "dir"):
        raise ConfigError(f"[data] format must be idx or dir, got {fmt!r}")
    required = ("train_images", "train_labels") if fmt == "idx" else ("root", "manifest")
    for key in required:
        if key not in data:
            raise ConfigError(f"[data] {key} is required for format {fmt}")
        if not Path(data[key]).exists():
            raise ConfigError(f"[data] {key}: no such path {data[key]}")

    sl = cp["slic"] if cp.has_section("slic") else {}
    slic_cfg = slic.SlicConfig(
        n_superpixels=int(sl.get("n_superpixels", 75)),
        compactness=float(sl.get("compactness", 10.0)),
        max_iters=int(sl.get("max_iters", 10)),
        enforce_connectivity=str(sl.get("enforce_connectivity", "true")).lower() == "true",
    )

    gr = cp["graph"] if cp.has_section("graph") else {}
    radius = float(gr.get("radius", 0.0))
    feature_mode = gr.get("feature_mode", "auto")
    if feature_mode not in ("auto", graphgen.GRAYSCALE, graphgen.RGB):
        raise ConfigError(f"[graph] feature_mode {feature_mode!r}")
    graph_cfg = graphgen.GraphConfig(
        radius=radius if radius > 0 else None,
        max_neighbors=int(gr.get("max_neighbors", 5)),
        feature_mode=graphgen.GRAYSCALE if feature_mode == "auto" else feature_mode,
    )

    tr = cp["train"] if cp.has_section("train") else {}
    hidden = int(tr.get("hidden_dim", 0))
    train_cfg = train.TrainConfig(
        batch_size=int(overrides.get("batch_size", tr.get("batch_size", 128))),
        epochs=int(overrides.get("epochs", tr.get("epochs", 30))),
        seed=int(overrides.get("seed", tr.get("seed", 0))),
        alpha=float(overrides.get("alpha", tr.get("alpha", 0.75))),
        learning_rate=float(overrides.get("learning_rate", tr.get("learning_rate", 1e-3))),
        weight_decay=float(overrides.get("weight_decay", tr.get("weight_decay", 0.0))),
        patience=int(overrides.get("patience", tr.get("patience", 5))),
        hidden_dim=hidden if hidden > 0 else None,
    )

    out = cp["output"] if cp.has_section("output") else {}
    out_dir = _out_path(str(overrides.get("out", out.get("dir", "runs/default"))))

    return RunSpec(
        name=data.get("name", Path(str(config_path)).stem),
        data=data,
        slic_cfg=slic_cfg,
        graph_cfg=graph_cfg,
        train_cfg=train_cfg,
        model_kind=str(overrides.get("model", tr.get("model", "coupled"))),
        out_dir=out_dir,
        feature_mode_auto=feature_mode == "auto",
    )


def _load_images(spec: RunSpec) -> tuple[imaging.LabeledDataset, imaging.LabeledDataset | None]:
    """(train, test-or-None) datasets with the configured stratified limits applied."""
    d = spec.data
    if d.get("format", "idx") == "idx":
        train_ds = imaging.load_idx(d["train_images"], d["train_labels"], "train")
        test_ds = None
        if "test_images" in d:
            test_ds = imaging.load_idx(d["test_images"], d["test_labels"], "test")
    else:
        train_ds = imaging.load_image_dir(d["root"], d["manifest"], "train")
        test_ds = None
        if "test_manifest" in d:
            test_ds = imaging.load_image_dir(d["root"], d["test_manifest"], "test")

    seed = spec.train_cfg.seed
    limit_train = int(d.get("limit_train", 0))
    if limit_train and limit_train < len(train_ds):
        idx = imaging.stratified_subset_indices(train_ds.labels, limit_train, seed)
        train_ds = train_ds.subset(idx)
    limit_test = int(d.get("limit_test", 0))
    if test_ds is not None and limit_test and limit_test < len(test_ds):
        idx = imaging.stratified_subset_indices(test_ds.labels, limit_test, seed + 1)
        test_ds = test_ds.subset(idx)
    return train_ds, test_ds


def _resolve_feature_mode(spec: RunSpec, ds: imaging.LabeledDataset) -> None:
    if spec.feature_mode_auto:
        channels = ds.images.shape[1]
        spec.graph_cfg.feature_mode = graphgen.GRAYSCALE if channels == 1 else graphgen.RGB


def _graph_paths(spec: RunSpec) -> tuple[Path, Path]:
    base = spec.out_dir / "graphs"
    return base / "train.spxg", base / "test.spxg"


class _Artifacts:
    """Paths created by the running command, removed if it fails."""

    def __init__(self):
        self.paths: list[Path] = []

    def track(self, path: Path) -> Path:
        self.paths.append(Path(path))
        return Path(path)

    def cleanup(self) -> None:
        for p in reversed(self.paths):
            if p.is_dir():
                shutil.rmtree(p, ignore_errors=True)
            elif p.exists():
                p.unlink()


def _graph_summary(graphs) -> dict:
    return {
        "count": len(graphs),
        "mean_nodes": float(np.mean([g.num_nodes for g in graphs])) if graphs else 0.0,
        "mean_edges": float(np.mean([len(g.edges) for g in graphs])) if graphs else 0.0,
    }


def cmd_build_graphs(args, artifacts: _Artifacts) -> int:
    spec = load_spec(args.config, _cli_overrides(args))
    train_ds, test_ds = _load_images(spec)
    _resolve_feature_mode(spec, train_ds)
    train_path, test_path = _graph_paths(spec)
    train_path.parent.mkdir(parents=True, exist_ok=True)

    summary = {}
    for tag, ds, path in (("train", train_ds, train_path), ("test", test_ds, test_path)):
        if ds is None:
            continue
        graphs = graphgen.radius_graph_dataset(ds, spec.slic_cfg, spec.graph_cfg)
        graphgen.save_graphs(graphs, artifacts.track(path))
        summary[tag] = _graph_summary(graphs)
        print(f"{tag}: {summary[tag]['count']} graphs -> {path} "
              f"(mean nodes {summary[tag]['mean_nodes']:.1f}, "
              f"mean edges {summary[tag]['mean_edges']:.1f})")
    summary_path = artifacts.track(train_path.parent / "graphs_summary.json")
    summary_path.write_text(json.dumps(summary, sort_keys=True, indent=2) + "\n")
    return 0


def _prepare_bundle(spec: RunSpec, need_graphs: bool) -> train.DataBundle:
    """Load images, split train/val, and align graphs by shared indices."""
    train_ds, test_ds = _load_images(spec)
    _resolve_feature_mode(spec, train_ds)
    val_fraction = float(spec.data.get("val_fraction", 0.1))
    parts = imaging.stratified_split_indices(
        train_ds.labels, (1.0 - val_fraction, val_fraction), spec.train_cfg.seed)
    train_idx, val_idx = parts

    bundle = train.DataBundle(
        train_images=train_ds.subset(train_idx, "train"),
        val_images=train_ds.subset(val_idx, "val"),
        test_images=test_ds,
    )
    if need_graphs:
        train_path, test_path = _graph_paths(spec)
        if train_path.exists():
            graphs = graphgen.load_graphs(train_path)
        else:
            print(f"note: {train_path} not found, building graphs in memory")
            graphs = graphgen.radius_graph_dataset(train_ds, spec.slic_cfg, spec.graph_cfg)
        if len(graphs) != len(train_ds):
            raise ConfigError(
                f"{train_path}: {len(graphs)} graphs but {len(train_ds)} train images; "
                "rebuild graphs with the same config and seed")
        bundle.train_graphs = [graphs[i] for i in train_idx]
        bundle.val_graphs = [graphs[i] for i in val_idx]
        if test_ds is not None:
            if test_path.exists():
                bundle.test_graphs = graphgen.load_graphs(test_path)
            else:
                bundle.test_graphs = graphgen.radius_graph_dataset(
                    test_ds, spec.slic_cfg, spec.graph_cfg)
    return bundle


def _write_run_outputs(spec: RunSpec, report: train.RunReport, model,
                       artifacts: _Artifacts) -> None:
    out = spec.out_dir
    out.mkdir(parents=True, exist_ok=True)
    models.save_checkpoint(artifacts.track(out / "best.ckpt"), model)
    artifacts.track(out / "report.jsonl").write_text(report.to_jsonl())
    summary = {
        "name": spec.name,
        "kind": report.kind,
        "config": report.config,
        "best_epoch": report.best_epoch,
        "test": report.test,
    }
    artifacts.track(out / "summary.json").write_text(
        json.dumps(summary, sort_keys=True, indent=2) + "\n")
    # Non-canonical sidecar: repeated seeded runs differ only here.
    (out / "meta.json").write_text(
        json.dumps({"wall_clock_s": report.wall_clock_s}) + "\n")


def cmd_train(args, artifacts: _Artifacts) -> int:
    spec = load_spec(args.config, _cli_overrides(args))
    kind = spec.model_kind
    bundle = _prepare_bundle(spec, need_graphs=kind in ("gnn", "coupled"))
    report, model = train.train_model(kind, bundle, spec.train_cfg, log=print)
    _write_run_outputs(spec, report, model, artifacts)
    if report.test:
        print(f"test: {json.dumps(report.test, sort_keys=True)}")
    print(f"run written to {spec.out_dir}")
    return 0


def cmd_evaluate(args, artifacts: _Artifacts) -> int:
    data_path = Path(args.data)
    model = models.load_checkpoint(args.checkpoint)
    if data_path.suffix == ".spxg":
        graphs = graphgen.load_graphs(data_path)
        result = train.evaluate(model, images=None, graphs=graphs)
    else:
        spec = load_spec(data_path, _cli_overrides(args))
        _, test_ds = _load_images(spec)
        if test_ds is None:
            raise ConfigError(f"{data_path}: no test split configured")
        graphs = None
        if isinstance(model, (models.GnnModel, models.CoupledModel)):
            _resolve_feature_mode(spec, test_ds)
            _, test_path = _graph_paths(spec)
            if test_path.exists():
                graphs = graphgen.load_graphs(test_path)
            else:
                graphs = graphgen.radius_graph_dataset(
                    test_ds, spec.slic_cfg, spec.graph_cfg)
        images = None if isinstance(model, models.GnnModel) else test_ds
        result = train.evaluate(model, images=images, graphs=graphs)
    print(json.dumps(result, sort_keys=True))
    if args.out:
        Path(args.out).write_text(json.dumps(result, sort_keys=True) + "\n")
    return 0


def cmd_sweep(args, artifacts: _Artifacts) -> int:
    spec = load_spec(args.config, _cli_overrides(args))
    kind = spec.model_kind
    bundle = _prepare_bundle(spec, need_graphs=kind in ("gnn", "coupled"))
    result = train.sweep(kind, bundle, spec.train_cfg, log=print)
    spec.out_dir.mkdir(parents=True, exist_ok=True)
    artifacts.track(spec.out_dir / "sweep.jsonl").write_text(result.to_jsonl())
    artifacts.track(spec.out_dir / "best.json").write_text(
        json.dumps(result.best, sort_keys=True, indent=2) + "\n")
    print(f"best config: {json.dumps(result.best, sort_keys=True)}")
    return 0


def cmd_report(args, artifacts: _Artifacts) -> int:
    by_dataset: dict[str, dict] = {}
    for run_dir in args.run_dirs:
        summary_path = Path(run_dir) / "summary.json"
        if not summary_path.exists():
            raise ConfigError(f"{run_dir}: no summary.json (not a finished run?)")
        summary = json.loads(summary_path.read_text())
        test = summary.get("test") or {}
        row = by_dataset.setdefault(summary["name"], {})
        if summary["kind"] == "cnn" and "accuracy" in test:
            row["cnn"] = test["accuracy"]
        elif summary["kind"] == "coupled" and "hybrid_accuracy" in test:
            row["cnn_gnn"] = test["hybrid_accuracy"]
        elif summary["kind"] == "gnn" and "accuracy" in test:
            row["gnn"] = test["accuracy"]

    header = f"{'dataset':<16}{'CNN':>10}{'CNN+GNN':>10}"
    lines = [header, "-" * len(header)]
    for name in sorted(by_dataset):
        row = by_dataset[name]
        cnn = f"{row['cnn']:.2f}" if "cnn" in row else "-"
        cg = f"{row['cnn_gnn']:.2f}" if "cnn_gnn" in row else "-"
        lines.append(f"{name:<16}{cnn:>10}{cg:>10}")
    table = "\n".join(lines)
    print(table)
    if args.out:
        out = Path(args.out)
        out.write_text(json.dumps(by_dataset, sort_keys=True, indent=2) + "\n")
        out.with_suffix(".txt").write_text(table + "\n")
    return 0


def cmd_segment(args, artifacts: _Artifacts) -> int:
    img = imaging.load_pnm(args.image)
    cfg = slic.SlicConfig(
        n_superpixels=args.n,
        compactness=args.compactness,
        max_iters=args.max_iters,
        enforce_connectivity=not args.no_connectivity,
    )
    seg = slic.slic_segment(img, cfg)
    stats = slic.segment_stats(seg, img)
    # Paint each segment with its mean color; makes boundaries visible.
    mean = stats.mean_colors[seg.labels]  # (h, w, channels)
    out_pixels = np.transpose(mean, (2, 0, 1))
    out_path = artifacts.track(args.out or (Path(args.image).stem + ".segments.ppm"))
    imaging.save_pnm(imaging.Image(out_pixels), out_path)
    print(f"{seg.num_segments} segments -> {out_path}")
    return 0


def _cli_overrides(args) -> dict:
    keys = ("model", "alpha", "seed", "batch_size", "learning_rate",
            "weight_decay", "epochs", "patience", "out")
    return {k: getattr(args, k) for k in keys
            if getattr(args, k, None) is not None}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="spixel",
        description="Superpixel-graph pipeline: SLIC, radius graphs, CNN+GNN training.")
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p, config_required=True):
        p.add_argument("--config", required=config_required, help="INI config file")
        p.add_argument("--model", choices=("cnn", "gnn", "coupled"))
        p.add_argument("--alpha", type=float)
        p.add_argument("--seed", type=int)
        p.add_argument("--batch-size", dest="batch_size", type=int)
        p.add_argument("--learning-rate", dest="learning_rate", type=float)
        p.add_argument("--weight-decay", dest="weight_decay", type=float)
        p.add_argument("--epochs", type=int)
        p.add_argument("--patience", type=int)
        p.add_argument("--out", help="output directory override")

    p = sub.add_parser("build-graphs", help="segment images and write .spxg files")
    add_common(p)
    p.set_defaults(func=cmd_build_graphs)

    p = sub.add_parser("train", help="train a model and write checkpoint + report")
    add_common(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="evaluate a checkpoint on a test set")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True, help=".spxg file or config file")
    p.add_argument("--seed", type=int)
    p.add_argument("--out")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("sweep", help="run the hyperparameter grid")
    add_common(p)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("report", help="side-by-side CNN vs CNN+GNN table")
    p.add_argument("run_dirs", nargs="+")
    p.add_argument("--out", help="write machine-readable JSON here (+ .txt)")
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("segment", help="dump a SLIC label-map visualization")
    p.add_argument("--image", required=True, help="P5/P6 pixmap")
    p.add_argument("--n", type=int, default=75)
    p.add_argument("--compactness", type=float, default=10.0)
    p.add_argument("--max-iters", dest="max_iters", type=int, default=10)
    p.add_argument("--no-connectivity", action="store_true")
    p.add_argument("--out")
    p.set_defaults(func=cmd_segment)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    artifacts = _Artifacts()
    try:
        return args.func(args, artifacts)
    except SpixelError as e:
        artifacts.cleanup()
        print(f"error: [{args.command}] {type(e).__name__}: {e}", file=sys.stderr)
        return 1
    except OSError as e:
        artifacts.cleanup()
        print(f"error: [{args.command}] {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
