"""Binary mask helpers shared by data generation, training and metrics."""
from __future__ import annotations

import numpy as np


def derive_edges(mask: np.ndarray) -> np.ndarray:
    """Pixels with at least one 4-neighbour of the other class.

    Border pixels only compare against in-bounds neighbours, so the boundary
    between two regions is two pixels thick (one on each side).
    """
    m = np.asarray(mask).astype(bool)
    if m.ndim != 2:
        raise ValueError("derive_edges expects a 2-D mask")
    e = np.zeros_like(m)
    dv = m[:-1, :] != m[1:, :]
    e[:-1, :] |= dv
    e[1:, :] |= dv
    dh = m[:, :-1] != m[:, 1:]
    e[:, :-1] |= dh
    e[:, 1:] |= dh
    return e.astype(np.uint8)


def downsample_mask(mask: np.ndarray) -> np.ndarray:
    """2x2 majority vote; an exact 2-2 tie counts as land."""
    m = np.asarray(mask)
    h, w = m.shape
    if h % 2 or w % 2:
        raise ValueError(f"downsample_mask needs even extents, got {h}x{w}")
    votes = m.astype(np.int32).reshape(h // 2, 2, w // 2, 2).sum(axis=(1, 3))
    return (votes >= 2).astype(np.uint8)
