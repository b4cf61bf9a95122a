"""Effective receptive fields and per-level attention statistics."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .model import HEDUNet, PredictionBundle, theoretical_rf
from .tensor import Tensor


@dataclass
class ErfMap:
    E: np.ndarray
    center: tuple[int, int]
    n_samples: int
    rf: int | None = None

    @property
    def normalized(self) -> np.ndarray:
        m = self.E.max()
        return self.E / m if m > 0 else self.E.copy()

    def support(self, rel: float = 0.01) -> int:
        """Number of pixels whose value exceeds ``rel`` times the maximum."""
        m = self.E.max()
        return int((self.E > rel * m).sum()) if m > 0 else 0

    def rf_box(self) -> tuple[int, int, int, int] | None:
        """(top, left, bottom, right) of the theoretical receptive field, inclusive."""
        if self.rf is None:
            return None
        half = self.rf // 2
        i, j = self.center
        return i - half, j - half, i + half, j + half

    def outside_box(self) -> np.ndarray:
        """Values of E outside the theoretical receptive field box."""
        box = self.rf_box()
        if box is None:
            raise ValueError("no theoretical receptive field attached")
        t, l, b, r = box
        inside = np.zeros(self.E.shape, dtype=bool)
        inside[max(t, 0) : b + 1, max(l, 0) : r + 1] = True
        return self.E[~inside]


def _output(model, x: Tensor, dem: Tensor | None, head: str) -> Tensor:
    out = model(x, dem) if dem is not None else model(x)
    if isinstance(out, PredictionBundle):
        return out.seg_logits if head == "seg" else out.edge_logits
    return out


def effective_receptive_field(
    model: HEDUNet | Callable[[Tensor], Tensor],
    sampler: Callable[[int], np.ndarray | tuple[np.ndarray, np.ndarray]],
    n: int,
    center: tuple[int, int] | None = None,
    head: str = "seg",
    batch_size: int = 8,
) -> ErfMap:
    """Mean absolute input gradient of one output logit.

    ``sampler(k)`` returns the k-th input as C x H x W (optionally paired with
    a DEM). Gradients are summed over input channels and averaged over the
    ``n`` samples. HED-UNet models are switched to eval mode so that batch
    statistics do not couple pixels. ``center`` defaults to the middle pixel.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    if head not in ("seg", "edge"):
        raise ValueError("head must be 'seg' or 'edge'")
    was_training = getattr(model, "training", None)
    if hasattr(model, "eval"):
        model.eval()
    total = None
    try:
        for start in range(0, n, batch_size):
            draws = [sampler(k) for k in range(start, min(n, start + batch_size))]
            if isinstance(draws[0], tuple):
                xs = np.stack([d[0] for d in draws])
                dem = Tensor(np.stack([d[1] for d in draws]))
            else:
                xs, dem = np.stack(draws), None
            _, _, h, w = xs.shape
            if center is None:
                center = (h // 2, w // 2)
            i, j = center
            if not (0 <= i < h and 0 <= j < w):
                raise ValueError(f"center {center} outside {h}x{w} input")
            x = Tensor(xs, requires_grad=True)
            out = _output(model, x, dem, head)
            g = np.zeros(out.shape, dtype=T.DTYPE)
            g[:, 0, i, j] = 1.0
            out.backward(g)
            part = np.abs(x.grad).sum(axis=1).astype(np.float64).sum(axis=0)
            total = part if total is None else total + part
    finally:
        if hasattr(model, "zero_grad"):
            model.zero_grad()
        if was_training is not None:
            model.train(was_training)
    rf = theoretical_rf(model.config) if isinstance(model, HEDUNet) else None
    return ErfMap(total / n, tuple(center), n, rf)


def scene_sampler(scenes) -> Callable[[int], np.ndarray | tuple[np.ndarray, np.ndarray]]:
    def sample(k: int):
        s = scenes[k % len(scenes)]
        return (s.sar, s.dem) if s.dem is not None else s.sar

    return sample


def attention_stats(model: HEDUNet, scenes: Sequence, head: str = "seg",
                    tile_size: int | None = None, batch_size: int = 8) -> dict[str, np.ndarray]:
    """Mean attention per resolution level over three pixel groups.

    Groups: ``all`` pixels, pixels of ``edge_free`` tiles (whole scenes, or
    non-overlapping ``tile_size`` windows) and ground-truth ``edge`` pixels.
    Each vector sums to one; a group with no pixels is all-NaN.
    """
    if model.config.merging != "attention":
        raise ValueError("attention_stats needs a model with attention merging")
    K = model.config.levels
    sums = {g: np.zeros(K) for g in ("all", "edge_free", "edge")}
    counts = {g: 0 for g in sums}
    was_training = model.training
    model.eval()
    try:
        with T.no_grad():
            for start in range(0, len(scenes), batch_size):
                chunk = scenes[start : start + batch_size]
                x = Tensor(np.stack([s.sar for s in chunk]))
                dem = Tensor(np.stack([s.dem for s in chunk])) if model.config.use_dem else None
                b = model(x, dem)
                attn = (b.attn_seg if head == "seg" else b.attn_edge).data.astype(np.float64)
                for a, s in zip(attn, chunk):
                    edge = s.edge.astype(bool)
                    sums["all"] += a.sum(axis=(1, 2))
                    counts["all"] += edge.size
                    sums["edge"] += a[:, edge].sum(axis=1)
                    counts["edge"] += int(edge.sum())
                    ts = tile_size or edge.shape[0]
                    for y in range(0, edge.shape[0] - ts + 1, ts):
                        for xo in range(0, edge.shape[1] - ts + 1, ts):
                            if not edge[y : y + ts, xo : xo + ts].any():
                                sums["edge_free"] += a[:, y : y + ts, xo : xo + ts].sum(axis=(1, 2))
                                counts["edge_free"] += ts * ts
    finally:
        model.train(was_training)
    return {g: (sums[g] / counts[g] if counts[g] else np.full(K, np.nan)) for g in sums}
