import json

import pytest
from hypothesis import given, settings, strategies as st

from hedunet.config import DataSettings, ExperimentConfig, ExperimentConfigError, MetricSettings
from hedunet.model import ModelConfig
from hedunet.synthdata import GenParams
from hedunet.training import TrainConfig


def _custom():
    return ExperimentConfig(
        seed=7,
        output_dir="runs/x",
        data=DataSettings(n_train=3, n_val=1, tile_size=32, overlap=0.5,
                          generator=GenParams(size=64, with_dem=True, looks=1.0)),
        model=ModelConfig(levels=5, base_channels=4, merging="learned", use_dem=True, seed=3),
        train=TrainConfig(epochs=2, lr=3e-4, augment="full"),
        metrics=MetricSettings(band_radius_m=400.0, match_radius_px=1.5, n_thresholds=9),
    )


class TestRoundTrip:
    @pytest.mark.parametrize("cfg", [ExperimentConfig(), _custom()])
    def test_fixpoint(self, cfg):
        text = cfg.to_json()
        again = ExperimentConfig.from_json(text)
        assert again == cfg
        assert again.to_json() == text

    def test_file(self, tmp_path):
        cfg = _custom()
        cfg.save(tmp_path / "c.json")
        assert ExperimentConfig.load(tmp_path / "c.json") == cfg

    def test_partial_uses_defaults(self):
        cfg = ExperimentConfig.from_dict({"model": {"levels": 3}})
        assert cfg.model.levels == 3 and cfg.model.base_channels == 16
        assert cfg.data == DataSettings()

    def test_canonical_text(self):
        text = ExperimentConfig().to_json()
        assert text.endswith("\n")
        assert list(json.loads(text)) == sorted(ExperimentConfig.SECTIONS)

    @settings(max_examples=50, deadline=None)
    @given(
        seed=st.integers(0, 2**63 - 1),
        lr=st.floats(1e-6, 1.0, allow_nan=False),
        levels=st.integers(2, 6),
        merging=st.sampled_from(["none", "learned", "attention"]),
        overlap=st.floats(0.0, 0.99),
        band=st.floats(1.0, 1e5),
    )
    def test_fixpoint_property(self, seed, lr, levels, merging, overlap, band):
        cfg = ExperimentConfig(seed=seed, model=ModelConfig(levels=levels, merging=merging),
                               train=TrainConfig(lr=lr), data=DataSettings(overlap=overlap),
                               metrics=MetricSettings(band_radius_m=band))
        text = cfg.to_json()
        again = ExperimentConfig.from_json(text)
        assert again == cfg and again.to_json() == text


class TestRejection:
    @pytest.mark.parametrize("doc", [
        {"sed": 1},
        {"data": {"n_trains": 3}},
        {"data": {"generator": {"sizes": 64}}},
        {"model": {"level": 3}},
        {"train": {"epoch": 3}},
        {"metrics": {"radius": 3}},
    ])
    def test_unknown_keys(self, doc):
        with pytest.raises(ExperimentConfigError, match="unknown"):
            ExperimentConfig.from_dict(doc)

    @pytest.mark.parametrize("doc", [
        {"seed": -1},
        {"data": {"tile_size": 48}},
        {"data": {"tile_size": 128}},
        {"data": {"n_train": 0, "n_val": 0}},
        {"model": {"levels": 7}},
        {"model": {"merging": "max"}},
        {"model": {"use_dem": True}},
        {"train": {"epochs": 0}},
        {"metrics": {"n_thresholds": 0}},
        {"data": "nope"},
    ])
    def test_invalid_values(self, doc):
        with pytest.raises(ExperimentConfigError):
            ExperimentConfig.from_dict(doc)

    def test_bad_json(self):
        with pytest.raises(ExperimentConfigError, match="JSON"):
            ExperimentConfig.from_json("{")


class TestThresholds:
    def test_default_grid(self):
        th = MetricSettings().thresholds
        assert len(th) == 99 and th[0] == 0.01 and th[-1] == 0.99

    def test_custom_grid(self):
        assert list(MetricSettings(n_thresholds=3).thresholds) == [0.25, 0.5, 0.75]
