import csv
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from gradcheck import model_gradcheck, numeric_grad, rel_error, steepest_gradcheck
from hedunet import tensor as T
from hedunet.masks import derive_edges, downsample_mask
from hedunet.model import ModelConfig, build, load_checkpoint, save_checkpoint
from hedunet.synthdata import GenParams, generate_scene
from hedunet.tensor import Tensor
from hedunet.training import (
    LOG_FIELDS,
    TrainConfig,
    TrainingDiverged,
    augment_8fold,
    balanced_bce,
    build_multiscale_gt,
    dihedral,
    total_loss,
    train,
)


def bce(p, pos, neg=None):
    return balanced_bce(Tensor(np.asarray(p, dtype=np.float64)), np.asarray(pos), None if neg is None else np.asarray(neg)).item()


def brute_edges(mask):
    h, w = mask.shape
    e = np.zeros_like(mask)
    for i in range(h):
        for j in range(w):
            for di, dj in ((-1, 0), (1, 0), (0, -1), (0, 1)):
                a, b = i + di, j + dj
                if 0 <= a < h and 0 <= b < w and mask[a, b] != mask[i, j]:
                    e[i, j] = 1
    return e


class TestBalancedBCE:
    def test_hand_value_confident(self):
        assert bce([0.9, 0.1], [1, 0]) == pytest.approx(-math.log(0.9), abs=1e-6)

    def test_hand_value_uninformed(self):
        assert bce([0.5, 0.5], [1, 0]) == pytest.approx(math.log(2), abs=1e-6)

    def test_perfect_prediction_at_clamp(self):
        eps = 1e-6
        pos = np.array([1, 1, 0, 0, 0])
        assert 0 <= bce(pos.astype(float), pos) <= 2 * eps * pos.size

    def test_equal_confidence_form(self):
        pos = np.array([1] * 3 + [0] * 7)
        p, q = 0.8, 0.3
        prob = np.where(pos == 1, p, q)
        expected = 3 * 7 / 10 * (-math.log(p) - math.log(1 - q))
        assert bce(prob, pos) == pytest.approx(expected, rel=1e-6)

    def test_single_class_vanishes(self):
        assert bce([0.3, 0.7, 0.2], [1, 1, 1]) == 0.0
        assert bce([0.3, 0.7, 0.2], [0, 0, 0]) == 0.0

    def test_empty_set_rejected(self):
        with pytest.raises(ValueError):
            bce([0.5, 0.5], [0, 0], [0, 0])

    def test_ignored_pixels(self):
        # pixels outside Y+ u Y- do not contribute
        a = bce([0.9, 0.1, 0.42], [1, 0, 0], [0, 1, 0])
        assert a == pytest.approx(-math.log(0.9), abs=1e-6)

    def test_overlapping_sets_rejected(self):
        with pytest.raises(ValueError):
            bce([0.5, 0.5], [1, 0], [1, 1])

    def test_batch_is_mean_of_images(self):
        rng = np.random.default_rng(0)
        p = rng.uniform(0.05, 0.95, (3, 1, 4, 4))
        pos = rng.random((3, 1, 4, 4)) > 0.5
        per = [bce(p[i], pos[i]) for i in range(3)]
        assert bce(p, pos) == pytest.approx(np.mean(per), rel=1e-6)

    @settings(max_examples=100, deadline=None)
    @given(arrays(np.int64, 24, elements=st.integers(1, 4095)), arrays(np.bool_, 24))
    def test_class_swap_symmetry_exact(self, k, pos):
        p = k / 4096.0  # dyadic so 1 - p is exact in float32
        assert bce(p, pos) == bce(1 - p, ~pos)

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(0)
        p = rng.uniform(0.1, 0.9, (2, 1, 3, 3))
        pos = rng.random(p.shape) > 0.4
        t = Tensor(p, requires_grad=True)
        balanced_bce(t, pos).backward()
        num = numeric_grad(lambda a: balanced_bce(Tensor(a), pos).item(), [p.copy()], h=1e-3)[0]
        assert rel_error(t.grad, num) < 1e-3

    def test_zero_gradient_where_clamped(self):
        t = Tensor(np.array([0.0, 1.0, 0.5, 0.5]), requires_grad=True)
        balanced_bce(t, np.array([1, 0, 1, 0])).backward()
        assert t.grad[0] == 0 and t.grad[1] == 0
        assert t.grad[2] < 0 < t.grad[3]


class TestMasks:
    def test_all_land_no_edges(self):
        assert not derive_edges(np.ones((5, 5))).any()

    def test_vertical_split(self):
        m = np.zeros((6, 8), np.uint8)
        m[:, 3:] = 1
        cols = np.nonzero(derive_edges(m).any(axis=0))[0]
        assert list(cols) == [2, 3]
        assert derive_edges(m)[:, 2:4].all()

    def test_single_pixel(self):
        m = np.zeros((5, 5), np.uint8)
        m[2, 2] = 1
        e = derive_edges(m)
        assert {tuple(x) for x in np.argwhere(e)} == {(2, 2), (1, 2), (3, 2), (2, 1), (2, 3)}

    @settings(max_examples=50, deadline=None)
    @given(arrays(np.uint8, st.tuples(st.integers(1, 12), st.integers(1, 12)), elements=st.integers(0, 1)))
    def test_matches_brute_force(self, m):
        np.testing.assert_array_equal(derive_edges(m), brute_edges(m))

    def test_downsample_examples(self):
        assert (downsample_mask(np.ones((4, 4))) == 1).all()
        assert (downsample_mask(np.zeros((4, 4))) == 0).all()
        checker = np.indices((4, 6)).sum(axis=0) % 2
        assert (downsample_mask(checker) == 1).all()
        assert downsample_mask(np.array([[1, 1], [1, 0]]))[0, 0] == 1
        assert downsample_mask(np.array([[1, 0], [0, 0]]))[0, 0] == 0

    def test_downsample_odd(self):
        with pytest.raises(ValueError):
            downsample_mask(np.zeros((3, 4)))


class TestMultiscaleGT:
    def test_composition(self):
        m = (np.random.default_rng(0).random((2, 32, 32)) > 0.5).astype(np.uint8)
        gt = build_multiscale_gt(m, 4)
        np.testing.assert_array_equal(gt.seg[0], m)
        cur = m
        for k in range(4):
            assert gt.seg[k].shape == (2, 32 >> k, 32 >> k)
            np.testing.assert_array_equal(gt.seg[k], cur)
            np.testing.assert_array_equal(gt.edge[k], np.stack([derive_edges(x) for x in cur]))
            cur = np.stack([downsample_mask(x) for x in cur])

    def test_edge_pixels_touch_both_classes(self):
        m = generate_scene(GenParams(size=64), 3).mask
        gt = build_multiscale_gt(m[None], 5)
        for k in range(5):
            s, e = gt.seg[k][0], gt.edge[k][0]
            for i, j in np.argwhere(e):
                nb = [s[a, b] for a, b in ((i - 1, j), (i + 1, j), (i, j - 1), (i, j + 1))
                      if 0 <= a < s.shape[0] and 0 <= b < s.shape[1]]
                assert s[i, j] != min(nb) or s[i, j] != max(nb)


class TestTotalLoss:
    def _setup(self, **kw):
        cfg = ModelConfig(levels=3, base_channels=4, **kw)
        m = build(cfg)
        x = Tensor(np.random.default_rng(0).standard_normal((2, 2, 16, 16)))
        mask = np.zeros((2, 16, 16), np.uint8)
        mask[:, :, 7:] = 1
        return cfg, m(x), build_multiscale_gt(mask, 3)

    def test_no_deep_supervision_two_terms(self):
        cfg, b, gt = self._setup(deep_supervision=False)
        loss, parts = total_loss(b, gt, cfg, TrainConfig())
        assert set(parts) == {"seg", "edge"}
        assert loss.item() == pytest.approx(parts["seg"].item() + parts["edge"].item(), rel=1e-6)

    def test_side_average(self):
        cfg, b, gt = self._setup()
        loss, parts = total_loss(b, gt, cfg, TrainConfig())
        side = np.mean([
            balanced_bce(T.sigmoid(b.side_seg[k]), gt.seg[k]).item() + balanced_bce(T.sigmoid(b.side_edge[k]), gt.edge[k]).item()
            for k in range(3)
        ])
        assert parts["side"].item() == pytest.approx(side, rel=1e-5)
        assert loss.item() == pytest.approx(parts["seg"].item() + parts["edge"].item() + side, rel=1e-5)

    def test_none_merging_skips_level_zero_side(self):
        cfg, b, gt = self._setup(merging="none")
        _, parts = total_loss(b, gt, cfg, TrainConfig())
        side = np.mean([
            balanced_bce(T.sigmoid(b.side_seg[k]), gt.seg[k]).item() + balanced_bce(T.sigmoid(b.side_edge[k]), gt.edge[k]).item()
            for k in (1, 2)
        ])
        assert parts["side"].item() == pytest.approx(side, rel=1e-5)

    def test_weights(self):
        cfg, b, gt = self._setup()
        _, parts = total_loss(b, gt, cfg, TrainConfig())
        loss, _ = total_loss(b, gt, cfg, TrainConfig(lambda_seg=2.0, lambda_edge=0.0, lambda_side=0.5))
        assert loss.item() == pytest.approx(2 * parts["seg"].item() + 0.5 * parts["side"].item(), rel=1e-5)

    def test_perfect_prediction_near_zero(self):
        cfg, b, gt = self._setup()
        for name in ("seg_prob", "edge_prob"):
            src = gt.seg[0] if name == "seg_prob" else gt.edge[0]
            getattr(b, name).data[...] = src[:, None]
        for k in range(3):
            b.side_seg[k].data[...] = np.where(gt.seg[k][:, None] == 1, 30.0, -30.0)
            b.side_edge[k].data[...] = np.where(gt.edge[k][:, None] == 1, 30.0, -30.0)
        loss, _ = total_loss(b, gt, cfg, TrainConfig())
        assert 0 <= loss.item() < 1e-3

    def test_level_mismatch(self):
        cfg, b, _ = self._setup()
        with pytest.raises(ValueError):
            total_loss(b, build_multiscale_gt(np.zeros((2, 16, 16)), 2), cfg, TrainConfig())

    @staticmethod
    def _e2e(merging):
        cfg = ModelConfig(levels=3, base_channels=4, merging=merging, seed=1)
        m = build(cfg)
        x = Tensor(np.random.default_rng(2).standard_normal((2, 2, 32, 32)))
        mask = generate_scene(GenParams(size=32), 5).mask[None].repeat(2, axis=0)
        gt = build_multiscale_gt(mask, 3)
        return m, lambda: total_loss(m(x), gt, cfg, TrainConfig())[0]

    @pytest.mark.parametrize("merging", ["attention", "learned", "none"])
    def test_end_to_end_gradient(self, merging):
        m, f = self._e2e(merging)
        assert m.parameters()[0].data.dtype == np.float32
        assert steepest_gradcheck(m, f, h=1e-5) < 1e-2

    @pytest.mark.parametrize("merging", ["attention", "learned", "none"])
    def test_end_to_end_gradient_per_tensor_float64(self, merging):
        with T.precision(np.float64):
            m, f = self._e2e(merging)
            assert m.parameters()[0].data.dtype == np.float64
            errs = model_gradcheck(m, f)
        assert max(errs.values()) < 1e-5, sorted(errs.items(), key=lambda kv: -kv[1])[:3]


class TestAugmentation:
    def test_eight_distinct(self):
        a = np.arange(16).reshape(4, 4)
        outs = augment_8fold(a)
        assert len({o[0].tobytes() for o in outs}) == 8

    def test_symmetric_tile(self):
        outs = augment_8fold(np.ones((3, 3)))
        assert all((o[0] == 1).all() for o in outs)

    def test_masks_follow_image(self):
        img = np.random.default_rng(0).standard_normal((2, 5, 5))
        mask = (img[0] > 0).astype(np.uint8)
        for im, mk in augment_8fold(img, mask):
            np.testing.assert_array_equal(mk, (im[0] > 0).astype(np.uint8))

    def test_closure(self):
        a = np.arange(25).reshape(5, 5)
        orbit = {dihedral(a, i).tobytes() for i in range(8)}
        for i in range(8):
            b = dihedral(a, i)
            assert {dihedral(b, j).tobytes() for j in range(8)} == orbit

    def test_non_square(self):
        with pytest.raises(ValueError):
            augment_8fold(np.zeros((4, 6)))


def small_scenes(n=3, size=32, seed=0):
    return [generate_scene(GenParams(size=size), seed * 100 + i) for i in range(n)]


class TestTrain:
    def test_one_epoch_one_tile(self):
        m = build(ModelConfig(levels=3, base_channels=4))
        res = train(m, small_scenes(1), TrainConfig(epochs=1, batch_size=1))
        loss = res.log[-1]["loss_total"]
        assert math.isfinite(loss) and loss > 0

    def test_log_csv(self, tmp_path):
        m = build(ModelConfig(levels=3, base_channels=4))
        train(m, small_scenes(2), TrainConfig(epochs=2, batch_size=2), val_scenes=small_scenes(1, seed=1),
              log_path=tmp_path / "log.csv")
        rows = list(csv.DictReader(open(tmp_path / "log.csv")))
        assert tuple(rows[0]) == LOG_FIELDS
        assert [(r["epoch"], r["split"]) for r in rows] == [("1", "train"), ("1", "val"), ("2", "train"), ("2", "val")]

    def test_bit_exact_repeat(self, tmp_path):
        for name in ("a", "b"):
            m = build(ModelConfig(levels=3, base_channels=4, seed=4))
            train(m, small_scenes(3), TrainConfig(epochs=2, batch_size=2, seed=7))
            save_checkpoint(m, tmp_path / f"{name}.ckpt")
        assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()

    def test_seed_changes_result(self, tmp_path):
        outs = []
        for seed in (1, 2):
            m = build(ModelConfig(levels=3, base_channels=4))
            train(m, small_scenes(3), TrainConfig(epochs=1, batch_size=2, seed=seed))
            outs.append(m.enc[0].conv1.weight.data.copy())
        assert not np.array_equal(*outs)

    def test_loss_decreases(self):
        m = build(ModelConfig(levels=3, base_channels=4))
        res = train(m, small_scenes(4), TrainConfig(epochs=6, batch_size=2, lr=3e-3))
        assert res.log[-1]["loss_total"] < res.log[0]["loss_total"]

    @pytest.mark.filterwarnings("ignore:overflow encountered:RuntimeWarning")
    def test_divergence(self):
        m = build(ModelConfig(levels=3, base_channels=4))
        with pytest.raises(TrainingDiverged):
            train(m, small_scenes(2), TrainConfig(epochs=20, batch_size=1, lr=1e30))

    def test_empty_dataset(self):
        with pytest.raises(ValueError):
            train(build(ModelConfig(levels=3, base_channels=4)), [], TrainConfig(epochs=1))

    def test_dem_model_needs_dem(self):
        with pytest.raises(ValueError):
            train(build(ModelConfig(levels=5, base_channels=2, use_dem=True)), small_scenes(1), TrainConfig(epochs=1))

    def test_dem_training_sets_stats(self):
        scenes = [generate_scene(GenParams(size=32, with_dem=True), i) for i in range(2)]
        m = build(ModelConfig(levels=5, base_channels=2, use_dem=True))
        train(m, scenes, TrainConfig(epochs=1, batch_size=2))
        vals = np.concatenate([s.dem.ravel() for s in scenes])
        np.testing.assert_allclose(m.dem_stats, [vals.mean(), vals.std()], rtol=1e-5)

    def test_checkpoint_after_training_round_trips(self, tmp_path):
        m = build(ModelConfig(levels=3, base_channels=4))
        train(m, small_scenes(2), TrainConfig(epochs=1, batch_size=2))
        save_checkpoint(m, tmp_path / "m.ckpt")
        back = load_checkpoint(tmp_path / "m.ckpt").eval()
        x = Tensor(small_scenes(1, seed=9)[0].sar[None])
        np.testing.assert_array_equal(m.eval()(x).seg_prob.data, back(x).seg_prob.data)

    def test_config_validation(self):
        with pytest.raises(ValueError):
            TrainConfig(epochs=0).validate()
        with pytest.raises(ValueError):
            TrainConfig(lambda_side=-1).validate()
        with pytest.raises(ValueError):
            TrainConfig.from_dict({"epochs": 1, "momentum": 0.9})
