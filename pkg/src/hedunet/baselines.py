"""Classical comparators: bimodal Gaussian-mixture thresholding and a
Sobel / dilation / Roberts coastline detector."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np
from scipy import ndimage
from scipy.optimize import bisect
from skimage.filters import threshold_otsu

from .metrics import disk

log = logging.getLogger(__name__)

MIN_VAR = 1e-8


class DegenerateMixture(ValueError):
    pass


@dataclass
class Gmm1D:
    weights: tuple[float, float]
    means: tuple[float, float]
    variances: tuple[float, float]
    log_likelihood: float = math.nan
    n_iter: int = 0

    def component_pdf(self, x, k: int):
        v = self.variances[k]
        return self.weights[k] * np.exp(-0.5 * (np.asarray(x) - self.means[k]) ** 2 / v) / np.sqrt(2 * np.pi * v)


def _loglik(x, w, mu, var) -> float:
    comp = np.log(w) - 0.5 * np.log(2 * np.pi * var) - 0.5 * (x[:, None] - mu) ** 2 / var
    return float(np.logaddexp(comp[:, 0], comp[:, 1]).sum())


def _em(x, mu, var, w, max_iter, tol):
    ll = _loglik(x, w, mu, var)
    history = [ll]
    for it in range(1, max_iter + 1):
        comp = np.log(w) - 0.5 * np.log(2 * np.pi * var) - 0.5 * (x[:, None] - mu) ** 2 / var
        resp = np.exp(comp - np.logaddexp(comp[:, 0], comp[:, 1])[:, None])
        nk = resp.sum(axis=0)
        if (nk <= 0).any():
            raise DegenerateMixture("a mixture component lost all its samples")
        w = nk / x.size
        mu = (resp * x[:, None]).sum(axis=0) / nk
        var = (resp * (x[:, None] - mu) ** 2).sum(axis=0) / nk
        if (var < MIN_VAR).any():
            raise DegenerateMixture("component variance collapsed")
        new = _loglik(x, w, mu, var)
        # EM never decreases the likelihood; allow for round-off only
        if new < ll - 1e-9 * max(1.0, abs(ll)):
            raise AssertionError(f"EM log-likelihood decreased at iteration {it}: {ll} -> {new}")
        history.append(new)
        done = abs(new - ll) < tol
        ll = new
        if done:
            break
    return w, mu, var, ll, it, history


def fit_gmm_em(samples, max_iter: int = 200, tol: float = 1e-6, return_history: bool = False):
    """Two-component 1-D Gaussian mixture by EM.

    Means start at the 25th/75th percentiles, variances at the sample
    variance, weights at 1/2. If a variance collapses, EM is re-seeded once
    from the 10th/90th percentiles before giving up.
    """
    x = np.asarray(samples, dtype=np.float64).ravel()
    if np.unique(x).size < 2:
        raise DegenerateMixture("need at least two distinct samples")
    var0 = x.var()
    last_exc = None
    for q in ((25, 75), (10, 90)):
        mu = np.percentile(x, q).astype(np.float64)
        var = np.array([var0, var0])
        w = np.array([0.5, 0.5])
        try:
            w, mu, var, ll, it, hist = _em(x, mu, var, w, max_iter, tol)
        except DegenerateMixture as exc:
            last_exc = exc
            log.debug("re-seeding EM after %s", exc)
            continue
        order = np.argsort(mu)
        g = Gmm1D(tuple(w[order]), tuple(mu[order]), tuple(var[order]), ll, it)
        return (g, hist) if return_history else g
    raise DegenerateMixture(f"EM failed after re-seeding: {last_exc}")


def gmm_threshold(g: Gmm1D) -> tuple[float, bool]:
    """Decision boundary between the two components.

    Returns (threshold, found). Bisection on the weighted density difference
    between the means; if it has no sign change there, the midpoint of the
    means is returned with ``found=False``.
    """
    lo, hi = g.means
    mid = 0.5 * (lo + hi)
    if hi <= lo:
        return mid, False

    def diff(x):
        a = math.log(g.weights[0]) - 0.5 * math.log(g.variances[0]) - 0.5 * (x - g.means[0]) ** 2 / g.variances[0]
        b = math.log(g.weights[1]) - 0.5 * math.log(g.variances[1]) - 0.5 * (x - g.means[1]) ** 2 / g.variances[1]
        return a - b

    f_lo, f_hi = diff(lo), diff(hi)
    if f_lo == 0:
        return lo, True
    if f_hi == 0:
        return hi, True
    if np.sign(f_lo) == np.sign(f_hi):
        return mid, False
    return bisect(diff, lo, hi, xtol=1e-12, rtol=4 * np.finfo(float).eps), True


def gmm_segment(sar: np.ndarray, channel: int = 0, **em_kwargs) -> tuple[np.ndarray, Gmm1D, float]:
    """Per-scene GMM segmentation of one SAR channel (HH by default); land is the brighter class."""
    img = np.asarray(sar)[channel] if np.ndim(sar) == 3 else np.asarray(sar)
    g = fit_gmm_em(img, **em_kwargs)
    thr, found = gmm_threshold(g)
    if not found:
        log.warning("GMM components overlap; using midpoint threshold %.3f", thr)
    return (img > thr).astype(np.uint8), g, thr


def sobel_magnitude(img: np.ndarray) -> np.ndarray:
    a = np.asarray(img, dtype=np.float64)
    gy = ndimage.sobel(a, axis=0, mode="reflect")
    gx = ndimage.sobel(a, axis=1, mode="reflect")
    # round away separable-filter round-off so the map is exactly rotation-equivariant
    return np.round(np.hypot(gx, gy), 9)


def roberts_edges(binary: np.ndarray, threshold: float = 0.0) -> np.ndarray:
    """Pixels covered by a 2x2 window whose Roberts cross magnitude exceeds ``threshold``.

    Marking all four pixels of a responding window keeps the result
    equivariant under rotations and mirrors.
    """
    b = np.asarray(binary).astype(np.int8)
    r1 = b[:-1, :-1] - b[1:, 1:]
    r2 = b[:-1, 1:] - b[1:, :-1]
    hit = np.hypot(r1, r2) > threshold
    e = np.zeros(b.shape, dtype=bool)
    e[:-1, :-1] |= hit
    e[1:, 1:] |= hit
    e[:-1, 1:] |= hit
    e[1:, :-1] |= hit
    return e.astype(np.uint8)


def sobel_pipeline(img: np.ndarray, dilation_radius: float = 2.0, roberts_threshold: float = 0.0) -> np.ndarray:
    """Sobel magnitude binarised at the Otsu threshold, dilated with a disk,
    then outlined with the Roberts operator."""
    a = np.asarray(img, dtype=np.float64)
    if a.ndim != 2:
        raise ValueError("sobel_pipeline expects a single-channel raster")
    mag = sobel_magnitude(a)
    if mag.max() <= 0:
        return np.zeros(a.shape, dtype=np.uint8)
    strong = mag > threshold_otsu(mag)
    if dilation_radius > 0:
        strong = ndimage.binary_dilation(strong, structure=disk(dilation_radius))
    return roberts_edges(strong, roberts_threshold)
