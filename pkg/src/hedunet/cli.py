"""Command-line front end.

Exit codes: 0 success, 1 runtime failure, 2 usage error. The only
environment input is ``HEDUNET_SEED``, which overrides the global seed
(``--seed`` wins over both).
"""
from __future__ import annotations

import argparse
import csv
import itertools
import json
import logging
import math
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import tensor as T
from .baselines import DegenerateMixture, gmm_segment, sobel_pipeline
from .config import ExperimentConfig, ExperimentConfigError, MetricSettings
from .erf import attention_stats, effective_receptive_field, scene_sampler
from .masks import derive_edges
from .metrics import MetricsReport, evaluate, write_f1_curve_csv, write_report_csv
from .model import HEDUNet, build, load_checkpoint, save_checkpoint
from .plotting import plot_ablation, plot_attention_stats, plot_erf, plot_f1_curve, plot_prediction, plot_training_log
from .raster import write_pgm, write_raster
from .synthdata import MANIFEST, Scene, load_dataset, tile, write_dataset
from .tensor import Tensor
from .training import TrainingDiverged, train

log = logging.getLogger("hedunet")

SEED_ENV = "HEDUNET_SEED"
ABLATION_COLUMNS = ["Data", "Deep Sup.", "Levels", "Merging", "Accuracy", "mIoU", "Deviation", "F1 ODS", "F1 OIS"]
MATRIX_KEYS = ("deep_supervision", "levels", "merging", "dem", "replicates")


class UsageError(Exception):
    pass


class RuntimeFailure(Exception):
    pass


# ---------------------------------------------------------------------------
# shared helpers
# ---------------------------------------------------------------------------

def _seed_override(args) -> int | None:
    if getattr(args, "seed", None) is not None:
        return args.seed
    env = os.environ.get(SEED_ENV)
    if env:
        try:
            return int(env)
        except ValueError:
            raise UsageError(f"{SEED_ENV} must be an integer, got {env!r}")
    return None


def load_config(path, args=None, training_seeds: bool = False) -> ExperimentConfig:
    if path is None:
        return ExperimentConfig()
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"config file not found: {p}")
    try:
        cfg = ExperimentConfig.load(p)
    except ExperimentConfigError as exc:
        raise UsageError(f"{p}: {exc}")
    seed = _seed_override(args) if args is not None else None
    if seed is not None:
        cfg.seed = seed
        if training_seeds:
            # the global override also drives weight init and shuffling
            cfg.model = replace(cfg.model, seed=seed)
            cfg.train = replace(cfg.train, seed=seed)
    return cfg


def _dataset(data_dir, split: str) -> list[Scene]:
    root = Path(data_dir)
    if not (root / MANIFEST).is_file():
        raise UsageError(f"no dataset manifest in {root}")
    scenes = load_dataset(root, split)
    if not scenes:
        raise RuntimeFailure(f"{root}: split {split!r} is empty")
    return scenes


def tiles_as_scenes(scenes: list[Scene], tile_size: int, overlap: float) -> list[Scene]:
    out = []
    for s in scenes:
        if s.sar.shape[1] == tile_size and s.sar.shape[2] == tile_size:
            out.append(s)
            continue
        for t in tile(s, tile_size, overlap):
            out.append(Scene(t.sar, t.mask, t.edge, t.dem, s.seed, s.pixel_size_m,
                             meta={**s.meta, "tile": (t.y, t.x)}))
    return out


def _load_model(path) -> HEDUNet:
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"checkpoint not found: {p}")
    try:
        return load_checkpoint(p)
    except (ValueError, OSError) as exc:
        raise RuntimeFailure(f"cannot read checkpoint: {exc}")


def _forward(model: HEDUNet, scenes: list[Scene], batch_size: int = 8):
    """Yield (scene, bundle-as-numpy) pairs in eval mode."""
    model.eval()
    with T.no_grad():
        for start in range(0, len(scenes), batch_size):
            chunk = scenes[start : start + batch_size]
            x = Tensor(np.stack([s.sar for s in chunk]))
            dem = Tensor(np.stack([s.dem for s in chunk])) if model.config.use_dem else None
            b = model(x, dem)
            for n, s in enumerate(chunk):
                yield s, {
                    "seg": b.seg_prob.data[n, 0],
                    "edge": b.edge_prob.data[n, 0],
                    "side_seg": [T.sigmoid(t).data[n, 0] for t in b.side_seg],
                    "side_edge": [T.sigmoid(t).data[n, 0] for t in b.side_edge],
                    "attn_seg": None if b.attn_seg is None else b.attn_seg.data[n],
                    "attn_edge": None if b.attn_edge is None else b.attn_edge.data[n],
                }


def _check_dem(model: HEDUNet, scenes: list[Scene]) -> None:
    if model.config.use_dem and any(s.dem is None for s in scenes):
        raise RuntimeFailure("model uses a DEM but the dataset has none (set data.generator.with_dem)")


def evaluate_model(model: HEDUNet, scenes: list[Scene], metrics: MetricSettings):
    _check_dem(model, scenes)
    seg, edge = [], []
    for _, out in _forward(model, scenes):
        seg.append(out["seg"])
        edge.append(out["edge"])
    return _evaluate(seg, edge, scenes, metrics)


def _evaluate(seg, edge, scenes, metrics: MetricSettings, pred_edges=None):
    return evaluate(
        seg, edge, [s.mask for s in scenes],
        pixel_size_m=scenes[0].pixel_size_m, band_radius_m=metrics.band_radius_m,
        match_radius_px=metrics.match_radius_px, thresholds=metrics.thresholds,
        pred_edges=pred_edges, return_curve=True,
    )


def _write_report(out: Path | None, report: MetricsReport, curve, metrics: MetricSettings, label: str) -> None:
    print(report.table())
    if out is None:
        return
    out.mkdir(parents=True, exist_ok=True)
    write_report_csv(out / "report.csv", report, {"model": label})
    if np.isfinite(curve).any():
        write_f1_curve_csv(out / "f1_curve.csv", metrics.thresholds, curve)
        plot_f1_curve(metrics.thresholds, curve, out / "f1_curve.png", label)


def _scene_name(s: Scene, i: int) -> str:
    return s.meta.get("name", f"scene_{i:03d}")


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_generate(args) -> None:
    cfg = load_config(args.config, args)
    out = Path(args.out)
    try:
        write_dataset(out, cfg.data.generator, cfg.data.n_train, cfg.data.n_val, cfg.seed,
                      previews=not args.no_previews, workers=args.workers)
        cfg.save(out / "config.json")
    except OSError as exc:
        raise RuntimeFailure(f"cannot write dataset to {out}: {exc}")
    print(f"wrote {cfg.data.n_train} train / {cfg.data.n_val} val scenes to {out}")


def _train_one(cfg: ExperimentConfig, data_dir, log_path=None) -> tuple[HEDUNet, list[dict]]:
    train_scenes = tiles_as_scenes(_dataset(data_dir, "train"), cfg.data.tile_size, cfg.data.overlap)
    val_scenes = load_dataset(data_dir, "val")
    model = build(cfg.model)
    _check_dem(model, train_scenes)
    tcfg = replace(cfg.train, band_radius_m=cfg.metrics.band_radius_m)
    try:
        res = train(model, train_scenes, tcfg, val_scenes=val_scenes or None, log_path=log_path)
    except TrainingDiverged as exc:
        raise RuntimeFailure(str(exc))
    return res.model, res.log


def cmd_train(args) -> None:
    cfg = load_config(args.config, args, training_seeds=True)
    out = Path(args.out)
    if out.exists() and not args.force:
        raise UsageError(f"{out} exists; pass --force to overwrite it")
    log_path = Path(args.log) if args.log else out.with_name(out.name + ".log.csv")
    out.parent.mkdir(parents=True, exist_ok=True)
    model, rows = _train_one(cfg, args.data, log_path)
    save_checkpoint(model, out)
    plot_training_log(rows, log_path.with_suffix(".png"))
    last = rows[-1]
    print(f"saved {out} (epoch {last['epoch']}, {last['split']} mIoU {last['miou']:.2f})")


def cmd_eval(args) -> None:
    cfg = load_config(args.config, args) if args.config else ExperimentConfig()
    scenes = _dataset(args.data, args.split)
    out = Path(args.out) if args.out else None
    if args.ckpt == "oracle":
        # perfect-prediction stub: ground truth fed back as probabilities
        report, curve = _evaluate([s.mask.astype(np.float32) for s in scenes],
                                  [derive_edges(s.mask).astype(np.float32) for s in scenes], scenes, cfg.metrics)
        label = "oracle"
    else:
        model = _load_model(args.ckpt)
        report, curve = evaluate_model(model, scenes, cfg.metrics)
        label = Path(args.ckpt).stem
        if out is not None and args.figures:
            out.mkdir(parents=True, exist_ok=True)
            for i, (s, o) in enumerate(_forward(model, scenes[: args.figures])):
                plot_prediction(s.sar, o["seg"], o["edge"], s.mask, out / f"{_scene_name(s, i)}_pred.png")
    _write_report(out, report, curve, cfg.metrics, label)


def cmd_predict(args) -> None:
    model = _load_model(args.ckpt)
    scenes = _dataset(args.data, args.split)
    _check_dem(model, scenes)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for i, (s, o) in enumerate(_forward(model, scenes)):
        name = _scene_name(s, i)
        for task in ("seg", "edge"):
            write_raster(out / f"{name}_{task}.ras", o[task][None])
            write_pgm(out / f"{name}_{task}.pgm", o[task])
            if o[f"attn_{task}"] is not None:
                write_raster(out / f"{name}_attn_{task}.ras", o[f"attn_{task}"])
            if args.sides:
                for k, side in enumerate(o[f"side_{task}"]):
                    write_raster(out / f"{name}_side{k}_{task}.ras", side[None])
                    write_pgm(out / f"{name}_side{k}_{task}.pgm", side)
    print(f"wrote predictions for {len(scenes)} scenes to {out}")


def cmd_erf(args) -> None:
    model = _load_model(args.ckpt)
    scenes = _dataset(args.data, args.split)
    _check_dem(model, scenes)
    h, w = scenes[0].mask.shape
    center = tuple(args.center) if args.center else (h // 2, w // 2)
    if not (0 <= center[0] < h and 0 <= center[1] < w):
        raise UsageError(f"center {center} outside {h}x{w} scenes")
    n = args.n or len(scenes)
    erf = effective_receptive_field(model, scene_sampler(scenes), n, center, head=args.head)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_raster(out / "erf.ras", erf.E[None].astype(np.float32))
    write_pgm(out / "erf.pgm", erf.E, log=True, box=erf.rf_box())
    plot_erf(erf, out / "erf.png")
    with open(out / "erf_summary.csv", "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(["head", "n_samples", "center_i", "center_j", "theoretical_rf", "support_1pct"])
        wr.writerow([args.head, n, center[0], center[1], erf.rf, erf.support()])
    print(f"ERF support (>1% of max): {erf.support()} px; theoretical RF {erf.rf} px")
    if model.config.merging == "attention":
        for head in ("seg", "edge"):
            stats = attention_stats(model, scenes, head=head, tile_size=args.tile_size)
            with open(out / f"attention_{head}.csv", "w", newline="") as fh:
                wr = csv.writer(fh, lineterminator="\n")
                wr.writerow(["level", *stats])
                for k in range(model.config.levels):
                    wr.writerow([k, *(f"{stats[g][k]:.6f}" for g in stats)])
            plot_attention_stats(stats, out / f"attention_{head}.png")


def baseline_predictions(method: str, scenes: list[Scene]):
    """(seg_probs, edge_probs, pred_edges) for a classical baseline."""
    if method == "gmm":
        seg = []
        for s in scenes:
            try:
                m, _, _ = gmm_segment(s.sar)
            except DegenerateMixture as exc:
                log.warning("GMM failed on %s (%s); predicting all sea", s.meta.get("name"), exc)
                m = np.zeros(s.mask.shape, dtype=np.uint8)
            seg.append(m.astype(np.float32))
        return seg, None, None
    edges = [sobel_pipeline(s.sar[0]) for s in scenes]
    return None, [e.astype(np.float32) for e in edges], edges


def cmd_baseline(args) -> None:
    cfg = load_config(args.config, args) if args.config else ExperimentConfig()
    scenes = _dataset(args.data, args.split)
    seg, edge, pred_edges = baseline_predictions(args.method, scenes)
    report, curve = _evaluate(seg, edge, scenes, cfg.metrics, pred_edges)
    out = Path(args.out) if args.out else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        maps = seg if seg is not None else pred_edges
        for i, (s, m) in enumerate(zip(scenes, maps)):
            write_pgm(out / f"{_scene_name(s, i)}_{args.method}.pgm", np.asarray(m) > 0.5)
    _write_report(out, report, curve, cfg.metrics, args.method)


def _fmt_cell(vals: list[float], nd: int) -> str:
    a = np.asarray(vals, dtype=float)
    if np.isnan(a).any():
        return "n/a"
    if a.size == 1:
        return f"{a[0]:.{nd}f}"
    return f"{a.mean():.{nd}f} ± {a.std(ddof=1):.{nd}f}"


def parse_matrix(d: dict, base: ExperimentConfig) -> tuple[list[dict], int]:
    if not isinstance(d, dict):
        raise UsageError("ablation matrix must be a JSON object")
    unknown = set(d) - set(MATRIX_KEYS)
    if unknown:
        raise UsageError(f"unknown matrix keys: {sorted(unknown)}")
    axes = {
        "deep_supervision": d.get("deep_supervision", [base.model.deep_supervision]),
        "levels": d.get("levels", [base.model.levels]),
        "merging": d.get("merging", [base.model.merging]),
        "dem": d.get("dem", [base.model.use_dem]),
    }
    for k, v in axes.items():
        if not isinstance(v, list) or not v:
            raise UsageError(f"empty matrix: axis {k!r} has no values")
    reps = d.get("replicates", 1)
    if not isinstance(reps, int) or reps < 1:
        raise UsageError("replicates must be a positive integer")
    cells = [dict(zip(axes, combo)) for combo in itertools.product(*axes.values())]
    return cells, reps


def run_ablation(base: ExperimentConfig, cells: list[dict], replicates: int, data_dir, out: Path) -> list[dict]:
    out.mkdir(parents=True, exist_ok=True)
    runs, summary = [], []
    for cell in cells:
        label = f"{'SAR+DEM' if cell['dem'] else 'SAR'} DS={'Yes' if cell['deep_supervision'] else 'No'} " \
                f"L={cell['levels']} {cell['merging']}"
        reports = []
        for r in range(replicates):
            cfg = ExperimentConfig.from_dict(base.to_dict())
            cfg.model = replace(cfg.model, deep_supervision=bool(cell["deep_supervision"]), levels=int(cell["levels"]),
                                merging=str(cell["merging"]).lower(), use_dem=bool(cell["dem"]),
                                seed=base.model.seed + r)
            cfg.train = replace(cfg.train, seed=base.train.seed + r)
            try:
                cfg.model.validate()
            except ValueError as exc:
                raise UsageError(f"invalid ablation cell {label}: {exc}")
            log.info("ablation %s replicate %d", label, r)
            model, _ = _train_one(cfg, data_dir)
            report, _ = evaluate_model(model, load_dataset(data_dir, "val"), cfg.metrics)
            reports.append(report)
            runs.append({"label": label, "replicate": r, **cell, **report.as_dict()})
        row = {"label": label, **cell}
        for f in ("accuracy", "miou", "deviation_m", "f1_ods", "f1_ois"):
            vals = [getattr(rep, f) for rep in reports]
            row[f"{f}_values"] = vals
            row[f"{f}_mean"] = float(np.mean(vals))
            row[f"{f}_std"] = float(np.std(vals, ddof=1)) if len(vals) > 1 else math.nan
        summary.append(row)

    with open(out / "ablation_table.csv", "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(ABLATION_COLUMNS)
        for row in summary:
            wr.writerow([
                "SAR+DEM" if row["dem"] else "SAR", "Yes" if row["deep_supervision"] else "No", row["levels"],
                str(row["merging"]).capitalize(),
                _fmt_cell(row["accuracy_values"], 1), _fmt_cell(row["miou_values"], 1),
                _fmt_cell(row["deviation_m_values"], 0), _fmt_cell(row["f1_ods_values"], 1),
                _fmt_cell(row["f1_ois_values"], 1),
            ])
    with open(out / "runs.csv", "w", newline="") as fh:
        keys = list(runs[0])
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(keys)
        for r in runs:
            wr.writerow([f"{v:.6f}" if isinstance(v, float) else v for v in r.values()])
    plot_ablation(summary, "f1_ods", out / "ablation_f1_ods.png")
    plot_ablation(summary, "deviation_m", out / "ablation_deviation.png")
    return summary


def cmd_ablate(args) -> None:
    base = load_config(args.config, args, training_seeds=True)
    mp = Path(args.matrix)
    if not mp.is_file():
        raise UsageError(f"matrix file not found: {mp}")
    try:
        matrix = json.loads(mp.read_text())
    except json.JSONDecodeError as exc:
        raise UsageError(f"{mp}: invalid JSON: {exc}")
    cells, reps = parse_matrix(matrix, base)
    _dataset(args.data, "train")
    run_ablation(base, cells, reps, args.data, Path(args.out))
    print((Path(args.out) / "ablation_table.csv").read_text(), end="")


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="hedunet", description="HED-UNet coastline detection on synthetic SAR scenes")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="generate a synthetic dataset")
    g.add_argument("--config", required=True)
    g.add_argument("--out", required=True)
    g.add_argument("--seed", type=int)
    g.add_argument("--workers", type=int, default=1)
    g.add_argument("--no-previews", action="store_true")
    g.set_defaults(func=cmd_generate)

    t = sub.add_parser("train", help="train a model and write a checkpoint")
    t.add_argument("--config", required=True)
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--log", help="CSV log path (default: <out>.log.csv)")
    t.add_argument("--seed", type=int)
    t.add_argument("--force", action="store_true", help="overwrite an existing checkpoint")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint (or 'oracle')")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--split", default="val")
    e.add_argument("--config")
    e.add_argument("--out")
    e.add_argument("--figures", type=int, default=0, help="number of prediction figures to render")
    e.add_argument("--seed", type=int)
    e.set_defaults(func=cmd_eval)

    pr = sub.add_parser("predict", help="write probability and attention rasters")
    pr.add_argument("--ckpt", required=True)
    pr.add_argument("--data", required=True)
    pr.add_argument("--split", default="val")
    pr.add_argument("--out", required=True)
    pr.add_argument("--sides", action="store_true", help="also write every side output")
    pr.set_defaults(func=cmd_predict)

    r = sub.add_parser("erf", help="effective receptive field and attention statistics")
    r.add_argument("--ckpt", required=True)
    r.add_argument("--data", required=True)
    r.add_argument("--split", default="val")
    r.add_argument("--out", required=True)
    r.add_argument("--n", type=int, default=0, help="samples (default: all scenes of the split)")
    r.add_argument("--head", choices=("seg", "edge"), default="seg")
    r.add_argument("--center", type=int, nargs=2, metavar=("I", "J"))
    r.add_argument("--tile-size", type=int, help="window size for edge-free attention statistics")
    r.set_defaults(func=cmd_erf)

    b = sub.add_parser("baseline", help="run a classical baseline")
    b.add_argument("method", choices=("gmm", "sobel"))
    b.add_argument("--data", required=True)
    b.add_argument("--split", default="val")
    b.add_argument("--config")
    b.add_argument("--out")
    b.add_argument("--seed", type=int)
    b.set_defaults(func=cmd_baseline)

    a = sub.add_parser("ablate", help="train and evaluate an ablation matrix")
    a.add_argument("--matrix", required=True)
    a.add_argument("--config", required=True)
    a.add_argument("--data", required=True)
    a.add_argument("--out", required=True)
    a.add_argument("--seed", type=int)
    a.set_defaults(func=cmd_ablate)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except UsageError as exc:
        print(f"hedunet {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except (RuntimeFailure, FloatingPointError, OSError, ValueError) as exc:
        print(f"hedunet {args.command}: failed: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
