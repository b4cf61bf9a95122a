import logging

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from sklearn.mixture import GaussianMixture

from hedunet.baselines import (
    DegenerateMixture,
    Gmm1D,
    fit_gmm_em,
    gmm_segment,
    gmm_threshold,
    roberts_edges,
    sobel_magnitude,
    sobel_pipeline,
)
from hedunet.synthdata import GenParams, generate_scene


def _bimodal(n=10_000, seed=0, w=0.5, means=(-15.0, -5.0), sd=(1.0, 1.0)):
    rng = np.random.default_rng(seed)
    first = rng.random(n) < w
    x = np.where(first, rng.normal(means[0], sd[0], n), rng.normal(means[1], sd[1], n))
    return x, (~first).astype(np.uint8)


def _dihedral(a, k):
    a = np.rot90(a, k % 4)
    return a.T if k >= 4 else a


class TestGmmFit:
    def test_recovers_means(self):
        x, _ = _bimodal()
        g = fit_gmm_em(x)
        assert g.means[0] == pytest.approx(-15, abs=0.2)
        assert g.means[1] == pytest.approx(-5, abs=0.2)
        assert sum(g.weights) == pytest.approx(1.0)
        assert all(0 < w < 1 for w in g.weights)
        assert all(v > 0 for v in g.variances)

    @pytest.mark.parametrize("seed", [0, 1, 2])
    def test_matches_reference_em(self, seed):
        x, _ = _bimodal(seed=seed, w=0.3, sd=(1.0, 2.0))
        g = fit_gmm_em(x, tol=1e-10, max_iter=1000)
        ref = GaussianMixture(2, covariance_type="full", tol=1e-10, max_iter=1000, random_state=0,
                              means_init=np.percentile(x, [25, 75])[:, None]).fit(x[:, None])
        order = np.argsort(ref.means_.ravel())
        assert np.allclose(g.means, ref.means_.ravel()[order], atol=1e-3)
        assert np.allclose(g.variances, ref.covariances_.ravel()[order], rtol=1e-3)
        assert np.allclose(g.weights, ref.weights_[order], atol=1e-4)
        assert g.log_likelihood / x.size == pytest.approx(ref.score(x[:, None]), abs=1e-6)

    def test_identical_samples(self):
        with pytest.raises(DegenerateMixture):
            fit_gmm_em(np.full(100, -12.0))

    def test_two_point_collapse(self):
        with pytest.raises(DegenerateMixture):
            fit_gmm_em(np.r_[np.zeros(500), np.ones(500)])

    def test_loglik_monotone(self):
        x, _ = _bimodal(seed=4, w=0.7, sd=(2.0, 1.0))
        g, hist = fit_gmm_em(x, tol=1e-12, max_iter=300, return_history=True)
        assert len(hist) > 2
        assert np.all(np.diff(hist) >= -1e-9 * abs(hist[0]))
        assert g.log_likelihood == hist[-1]

    def test_max_iter(self):
        x, _ = _bimodal(seed=1)
        g = fit_gmm_em(x, max_iter=2, tol=0.0)
        assert g.n_iter == 2

    def test_components_ordered(self):
        x, _ = _bimodal(seed=3, means=(4.0, -8.0))
        g = fit_gmm_em(x)
        assert g.means[0] <= g.means[1]


class TestGmmThreshold:
    def test_symmetric(self):
        g = Gmm1D((0.5, 0.5), (-15.0, -5.0), (2.0, 2.0))
        t, found = gmm_threshold(g)
        assert found
        assert t == pytest.approx(-10.0, abs=1e-9)

    def test_shifts_toward_minor_component(self):
        g = Gmm1D((0.9, 0.1), (-15.0, -5.0), (4.0, 4.0))
        t, found = gmm_threshold(g)
        assert found and t > -10.0
        # closed form for equal variances
        expect = -10.0 + 4.0 * np.log(0.9 / 0.1) / 10.0
        assert t == pytest.approx(expect, abs=1e-9)
        assert g.component_pdf(t, 0) == pytest.approx(g.component_pdf(t, 1), rel=1e-9)

    @settings(max_examples=100, deadline=None)
    @given(st.floats(0.05, 0.95), st.floats(-20, 0), st.floats(0.5, 15), st.floats(0.2, 4), st.floats(0.2, 4))
    def test_strictly_between_means(self, w, m0, gap, v0, v1):
        g = Gmm1D((w, 1 - w), (m0, m0 + gap), (v0, v1))
        t, found = gmm_threshold(g)
        if found:
            assert m0 <= t <= m0 + gap
            d = g.component_pdf(t, 0) - g.component_pdf(t, 1)
            assert abs(d) <= 1e-6 * max(g.component_pdf(t, 0), 1e-300)
        else:
            assert t == pytest.approx(m0 + gap / 2)

    def test_overlap_fallback(self):
        # a very dominant wide component leaves no crossing between the means
        g = Gmm1D((0.99, 0.01), (0.0, 0.1), (100.0, 0.5))
        t, found = gmm_threshold(g)
        assert not found
        assert t == pytest.approx(0.05)

    def test_misclassification(self):
        x, labels = _bimodal()
        g = fit_gmm_em(x)
        t, _ = gmm_threshold(g)
        assert np.mean((x > t).astype(np.uint8) != labels) < 0.01


class TestGmmSegment:
    def test_land_is_bright(self):
        accs = []
        for seed in range(6):
            s = generate_scene(GenParams(size=96), seed)
            mask, g, t = gmm_segment(s.sar)
            assert mask.shape == s.mask.shape
            assert g.means[0] < t < g.means[1]
            assert s.sar[0][mask == 1].mean() > s.sar[0][mask == 0].mean()
            accs.append((mask == s.mask).mean())
        # speckle makes pixelwise thresholding noisy, but it is far better than chance
        assert np.mean(accs) > 0.75

    def test_overlap_warns(self, caplog, monkeypatch):
        import hedunet.baselines as bl

        monkeypatch.setattr(bl, "fit_gmm_em", lambda x, **kw: Gmm1D((0.99, 0.01), (0.0, 0.1), (100.0, 0.5)))
        img = np.linspace(-1, 1, 64).reshape(1, 8, 8)
        with caplog.at_level(logging.WARNING, logger="hedunet.baselines"):
            mask, _, t = bl.gmm_segment(img)
        assert t == pytest.approx(0.05)
        assert np.array_equal(mask, (img[0] > 0.05).astype(np.uint8))
        assert any("midpoint" in r.message for r in caplog.records)


class TestSobel:
    def test_constant(self):
        assert not sobel_pipeline(np.full((32, 32), -12.0)).any()

    def test_rank(self):
        with pytest.raises(ValueError):
            sobel_pipeline(np.zeros((2, 8, 8)))

    def test_step(self):
        img = np.zeros((16, 16))
        img[:, 8:] = 10.0  # step between columns 7 and 8
        e = sobel_pipeline(img, dilation_radius=2)
        cols = np.flatnonzero(e.any(axis=0))
        # full vertical lines on both sides of the dilated Sobel ridge
        for c in cols:
            assert e[:, c].all()
        # the inner line of each pair is within 2 px of the step pixels
        assert e[:, 5].all() and e[:, 10].all()
        # nothing is further from the step than the dilation radius plus the Roberts window
        assert all(min(abs(c - 7), abs(c - 8)) <= 3 for c in cols)
        assert np.array_equal(cols, [4, 5, 10, 11])

    def test_step_without_dilation(self):
        img = np.zeros((16, 16))
        img[:, 8:] = 10.0
        e = sobel_pipeline(img, dilation_radius=0)
        assert np.array_equal(np.flatnonzero(e.any(axis=0)), [6, 7, 8, 9])

    def test_sobel_magnitude_step(self):
        img = np.zeros((5, 6))
        img[:, 3:] = 1.0
        m = sobel_magnitude(img)
        # 3x3 Sobel on a unit step: 1 + 2 + 1 = 4 on the two columns touching it
        assert np.allclose(m[:, 2], 4.0) and np.allclose(m[:, 3], 4.0)
        assert np.allclose(m[:, [0, 1, 4, 5]], 0.0)

    def test_roberts(self):
        b = np.zeros((4, 4), np.uint8)
        b[1, 1] = 1
        e = roberts_edges(b)
        assert e[:3, :3].all() and e.sum() == 9
        assert not roberts_edges(np.ones((4, 4))).any()

    @pytest.mark.parametrize("k", range(1, 8))
    def test_dihedral_equivariance(self, k):
        s = generate_scene(GenParams(size=64), 2)
        img = s.sar[0].astype(np.float64)
        a = _dihedral(sobel_pipeline(img), k)
        b = sobel_pipeline(_dihedral(img, k).copy())
        assert np.array_equal(a, b)

    @settings(max_examples=20, deadline=None)
    @given(st.integers(0, 2**32 - 1))
    def test_rotation_equivariance_random(self, seed):
        img = np.random.default_rng(seed).normal(size=(24, 24)).round(3)
        assert np.array_equal(np.rot90(sobel_pipeline(img)), sobel_pipeline(np.rot90(img).copy()))

    def test_finds_coast(self):
        s = generate_scene(GenParams(size=96, iceberg_count_range=(0, 0)), 1)
        e = sobel_pipeline(s.sar[0])
        assert e.any()
