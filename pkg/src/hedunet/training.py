"""Balanced loss, multiscale ground truth with deep supervision, and the training loop."""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .masks import derive_edges, downsample_mask
from .metrics import evaluate
from .model import HEDUNet, PredictionBundle
from .optim import Adam
from .synthdata import Scene
from .tensor import Tensor

log = logging.getLogger(__name__)

PROB_EPS = 1e-6
LOG_FIELDS = ("epoch", "split", "loss_total", "loss_seg", "loss_edge", "loss_side", "accuracy", "miou", "deviation_px")


class TrainingDiverged(RuntimeError):
    pass


def balanced_bce(prob: Tensor, pos, neg=None, eps: float = PROB_EPS) -> Tensor:
    """Class-balanced binary cross-entropy.

    For one image with positives Y+ and negatives Y-::

        L = -(|Y-| sum_{Y+} log p + |Y+| sum_{Y-} log(1 - p)) / |Y+ u Y-|

    Probabilities are clamped to [eps, 1 - eps] (zero gradient where the
    clamp is active). A 4-D input is treated as a batch of images and the
    per-image losses are averaged. ``neg`` defaults to the complement of
    ``pos``; pixels in neither set are ignored.
    """
    pos = np.asarray(pos).astype(bool).reshape(prob.shape)
    neg = ~pos if neg is None else np.asarray(neg).astype(bool).reshape(prob.shape)
    if (pos & neg).any():
        raise ValueError("positive and negative sets overlap")
    axes = tuple(range(1, prob.ndim)) if prob.ndim == 4 else tuple(range(prob.ndim))
    n_pos = pos.sum(axis=axes, keepdims=True).astype(np.float64)
    n_neg = neg.sum(axis=axes, keepdims=True).astype(np.float64)
    total = n_pos + n_neg
    if (total == 0).any():
        raise ValueError("empty Y+ u Y-: nothing to evaluate")
    batch = prob.shape[0] if prob.ndim == 4 else 1

    p = prob.data.astype(np.float64)
    pc = np.clip(p, eps, 1.0 - eps)
    w_pos = n_neg / total  # weight of every positive pixel
    w_neg = n_pos / total
    # 1 - pc is exact in float64 for float32 inputs, so swapping classes and p <-> 1-p is bit-symmetric
    per_pixel = -(w_pos * np.log(pc) * pos + w_neg * np.log(1.0 - pc) * neg)
    value = per_pixel.sum() / batch
    inside = (p >= eps) & (p <= 1.0 - eps)

    def backward(g):
        d = (-w_pos / pc * pos + w_neg / (1.0 - pc) * neg) * inside / batch
        return ((float(g) * d).astype(T.DTYPE),)

    return T._make(np.asarray(value, dtype=T.DTYPE), (prob,), backward, "balanced_bce")


# ---------------------------------------------------------------------------
# multiscale ground truth
# ---------------------------------------------------------------------------

@dataclass
class MultiscaleGT:
    seg: list[np.ndarray]  # level k: N x H/2^k x W/2^k
    edge: list[np.ndarray]

    @property
    def levels(self) -> int:
        return len(self.seg)


def build_multiscale_gt(masks: np.ndarray, levels: int) -> MultiscaleGT:
    """Level 0 is the input; level k+1 is ``downsample_mask`` of level k,
    and each level's edges are ``derive_edges`` of its mask."""
    m = np.asarray(masks).astype(np.uint8)
    if m.ndim == 2:
        m = m[None]
    seg, edge = [m], [np.stack([derive_edges(x) for x in m])]
    for _ in range(1, levels):
        m = np.stack([downsample_mask(x) for x in m])
        seg.append(m)
        edge.append(np.stack([derive_edges(x) for x in m]))
    return MultiscaleGT(seg, edge)


@dataclass
class TrainConfig:
    epochs: int = 15
    batch_size: int = 4
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    lambda_seg: float = 1.0
    lambda_edge: float = 1.0
    lambda_side: float = 1.0
    augment: str = "random"  # random | full | none
    band_radius_m: float = 2000.0

    def validate(self) -> None:
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be positive")
        if min(self.lambda_seg, self.lambda_edge, self.lambda_side) < 0:
            raise ValueError("loss weights must be non-negative")
        if self.augment not in ("random", "full", "none"):
            raise ValueError(f"unknown augmentation mode {self.augment!r}")

    @classmethod
    def from_dict(cls, d: dict) -> TrainConfig:
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown train config keys: {sorted(unknown)}")
        cfg = cls(**d)
        cfg.validate()
        return cfg

    def to_dict(self) -> dict:
        return asdict(self)


def total_loss(bundle: PredictionBundle, gt: MultiscaleGT, model_cfg, cfg: TrainConfig):
    """Weighted sum of final and side-output losses.

    Returns (loss, parts) where ``parts`` maps term names to scalar tensors.
    Side losses are averaged over the supervised levels; with no merging the
    level-0 side output *is* the final output and is not counted twice.
    """
    if gt.levels != len(bundle.side_seg):
        raise ValueError(f"ground truth has {gt.levels} levels, model has {len(bundle.side_seg)}")
    parts = {
        "seg": balanced_bce(bundle.seg_prob, gt.seg[0]),
        "edge": balanced_bce(bundle.edge_prob, gt.edge[0]),
    }
    loss = cfg.lambda_seg * parts["seg"] + cfg.lambda_edge * parts["edge"]
    if model_cfg.deep_supervision:
        ks = range(1, gt.levels) if model_cfg.merging == "none" else range(gt.levels)
        side_terms = []
        for k in ks:
            side_terms.append(balanced_bce(T.sigmoid(bundle.side_seg[k]), gt.seg[k]))
            side_terms.append(balanced_bce(T.sigmoid(bundle.side_edge[k]), gt.edge[k]))
        side = T.mul(_sum(side_terms), 1.0 / len(ks))
        parts["side"] = side
        loss = loss + cfg.lambda_side * side
    return loss, parts


def _sum(terms: Sequence[Tensor]) -> Tensor:
    out = terms[0]
    for t in terms[1:]:
        out = out + t
    return out


# ---------------------------------------------------------------------------
# augmentation
# ---------------------------------------------------------------------------

def dihedral(arr: np.ndarray, index: int) -> np.ndarray:
    """Element ``index`` (0-7) of the square's symmetry group, on the last two axes.

    0-3 rotate by index*90 degrees; 4-7 mirror left-right first.
    """
    a = np.asarray(arr)
    if index >= 4:
        a = a[..., ::-1]
    return np.ascontiguousarray(np.rot90(a, index % 4, axes=(-2, -1)))


def augment_8fold(*arrays: np.ndarray) -> list[tuple[np.ndarray, ...]]:
    """All 8 mirrored/rotated versions of a square tile and its masks."""
    for a in arrays:
        if a is not None and a.shape[-1] != a.shape[-2]:
            raise ValueError(f"augmentation needs square tiles, got {a.shape}")
    return [tuple(None if a is None else dihedral(a, i) for a in arrays) for i in range(8)]


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------

def _batches(scenes: Sequence[Scene], cfg: TrainConfig, rng: np.random.Generator):
    items = []
    for s in scenes:
        if cfg.augment == "full":
            items.extend((s, i) for i in range(8))
        elif cfg.augment == "random":
            items.append((s, int(rng.integers(8))))
        else:
            items.append((s, 0))
    order = rng.permutation(len(items))
    for start in range(0, len(order), cfg.batch_size):
        chunk = [items[j] for j in order[start : start + cfg.batch_size]]
        yield _stack(chunk)


def _stack(chunk):
    sar = np.stack([dihedral(s.sar, i) for s, i in chunk]).astype(T.DTYPE)
    mask = np.stack([dihedral(s.mask, i) for s, i in chunk])
    dem = None
    if chunk[0][0].dem is not None:
        dem = np.stack([dihedral(s.dem, i) for s, i in chunk]).astype(T.DTYPE)
    return sar, mask, dem


def predict_scenes(model: HEDUNet, scenes: Sequence[Scene], batch_size: int = 8):
    """Eval-mode probabilities for each scene: (seg list, edge list, bundles list of numpy dicts)."""
    was_training = model.training
    model.eval()
    seg, edge = [], []
    try:
        with T.no_grad():
            for start in range(0, len(scenes), batch_size):
                chunk = [(s, 0) for s in scenes[start : start + batch_size]]
                sar, _, dem = _stack(chunk)
                b = model(Tensor(sar), None if dem is None else Tensor(dem))
                seg.extend(b.seg_prob.data[:, 0])
                edge.extend(b.edge_prob.data[:, 0])
    finally:
        model.train(was_training)
    return seg, edge


def _metrics_row(seg_probs, masks, pixel_size_m, band_radius_m):
    rep = evaluate(seg_probs, None, masks, pixel_size_m=pixel_size_m, band_radius_m=band_radius_m)
    return {"accuracy": rep.accuracy, "miou": rep.miou, "deviation_px": rep.deviation_px}


def set_dem_stats(model: HEDUNet, scenes: Sequence[Scene]) -> None:
    vals = np.concatenate([s.dem.ravel() for s in scenes])
    std = float(vals.std())
    model.dem_stats[:] = (float(vals.mean()), std if std > 0 else 1.0)


def _fmt(v):
    if isinstance(v, float):
        return "nan" if math.isnan(v) else f"{v:.6f}"
    return str(v)


@dataclass
class TrainResult:
    model: HEDUNet
    log: list[dict]


def train(
    model: HEDUNet,
    scenes: Sequence[Scene],
    cfg: TrainConfig,
    val_scenes: Sequence[Scene] | None = None,
    log_path=None,
    on_epoch: Callable[[dict], None] | None = None,
) -> TrainResult:
    """Adam training with seeded shuffling; writes one CSV row per epoch and split."""
    cfg.validate()
    if not scenes:
        raise ValueError("training set is empty")
    mcfg = model.config
    if mcfg.use_dem:
        if any(s.dem is None for s in scenes):
            raise ValueError("model uses DEM but training scenes lack one")
        set_dem_stats(model, scenes)
    pixel_size = scenes[0].pixel_size_m
    rng = np.random.Generator(np.random.Philox(key=cfg.seed))
    opt = Adam(model.parameters(), lr=cfg.lr, betas=(cfg.beta1, cfg.beta2), eps=cfg.eps)
    rows: list[dict] = []
    fh = writer = None
    if log_path is not None:
        fh = open(log_path, "w", newline="")
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(LOG_FIELDS)
    try:
        for epoch in range(1, cfg.epochs + 1):
            model.train()
            sums = {"total": 0.0, "seg": 0.0, "edge": 0.0, "side": 0.0}
            n = 0
            train_probs, train_masks = [], []
            for step, (sar, mask, dem) in enumerate(_batches(scenes, cfg, rng)):
                try:
                    bundle = model(Tensor(sar), None if dem is None else Tensor(dem))
                    gt = build_multiscale_gt(mask, mcfg.levels)
                    loss, parts = total_loss(bundle, gt, mcfg, cfg)
                    if not math.isfinite(loss.item()):
                        raise FloatingPointError("loss is not finite")
                    opt.zero_grad()
                    loss.backward()
                    opt.step()
                except FloatingPointError as exc:
                    raise TrainingDiverged(f"divergence at epoch {epoch}, step {step}: {exc}") from exc
                bs = sar.shape[0]
                n += bs
                sums["total"] += loss.item() * bs
                for key, t in parts.items():
                    sums[key] += t.item() * bs
                train_probs.extend(bundle.seg_prob.data[:, 0])
                train_masks.extend(mask)
            row = {"epoch": epoch, "split": "train", **{f"loss_{k}": v / n for k, v in sums.items()}}
            row.update(_metrics_row(train_probs, train_masks, pixel_size, cfg.band_radius_m))
            epoch_rows = [row]
            if val_scenes:
                try:
                    epoch_rows.append(validate(model, val_scenes, cfg, epoch))
                except FloatingPointError as exc:
                    raise TrainingDiverged(f"divergence in validation after epoch {epoch}: {exc}") from exc
            for r in epoch_rows:
                rows.append(r)
                if writer:
                    writer.writerow([_fmt(r[k]) for k in LOG_FIELDS])
                    fh.flush()
                if on_epoch:
                    on_epoch(r)
            log.info("epoch %d: %s", epoch, ", ".join(f"{k}={_fmt(v)}" for k, v in epoch_rows[-1].items()))
    finally:
        if fh:
            fh.close()
    model.eval()
    return TrainResult(model, rows)


def validate(model: HEDUNet, scenes: Sequence[Scene], cfg: TrainConfig, epoch: int = 0) -> dict:
    mcfg = model.config
    model.eval()
    sums = {"total": 0.0, "seg": 0.0, "edge": 0.0, "side": 0.0}
    probs, masks = [], []
    with T.no_grad():
        for start in range(0, len(scenes), cfg.batch_size):
            chunk = [(s, 0) for s in scenes[start : start + cfg.batch_size]]
            sar, mask, dem = _stack(chunk)
            bundle = model(Tensor(sar), None if dem is None else Tensor(dem))
            loss, parts = total_loss(bundle, build_multiscale_gt(mask, mcfg.levels), mcfg, cfg)
            bs = sar.shape[0]
            sums["total"] += loss.item() * bs
            for key, t in parts.items():
                sums[key] += t.item() * bs
            probs.extend(bundle.seg_prob.data[:, 0])
            masks.extend(mask)
    row = {"epoch": epoch, "split": "val", **{f"loss_{k}": v / len(scenes) for k, v in sums.items()}}
    row.update(_metrics_row(probs, masks, scenes[0].pixel_size_m, cfg.band_radius_m))
    return row
