"""Training pipeline pieces: dataset round trips, the IoU metric against a
brute-force confusion oracle, and loop determinism."""

import numpy as np
import pytest

from pointvoxel.cloud import SceneConfig
from pointvoxel.errors import ConfigError
from pointvoxel.models import BlockSpec, ModelConfig, SegmentationModel
from pointvoxel.optim import Adam
from pointvoxel.train import (confusion_matrix, evaluate_model, generate_dataset,
                              iou_per_class, load_dataset, mean_iou, prepare_scene,
                              train_model)


class TestMetric:
    def test_perfect_predictions(self):
        labels = np.array([0, 1, 2, 1, 0])
        conf = confusion_matrix(labels, labels, 3)
        assert mean_iou(conf) == 1.0
        assert np.allclose(iou_per_class(conf), 1.0)

    def test_constant_wrong_class_two_class(self):
        labels = np.array([0, 0, 1, 1])
        pred = np.array([1, 1, 1, 1])
        conf = confusion_matrix(pred, labels, 2)
        per_class = iou_per_class(conf)
        assert per_class[0] == 0.0
        assert per_class[1] == 0.5  # tp=2, fp=2, fn=0
        assert mean_iou(conf) == 0.25

    @pytest.mark.parametrize("seed", range(5))
    def test_matches_brute_force_confusion_oracle(self, seed):
        rng = np.random.default_rng(seed)
        k = 4
        labels = rng.integers(0, k, size=500)
        pred = rng.integers(0, k, size=500)
        conf = confusion_matrix(pred, labels, k)
        expected = np.zeros((k, k), dtype=np.int64)
        for p, t in zip(pred, labels):
            expected[t, p] += 1
        assert np.array_equal(conf, expected)
        per_class = iou_per_class(conf)
        for c in range(k):
            tp = expected[c, c]
            fp = expected[:, c].sum() - tp
            fn = expected[c, :].sum() - tp
            assert per_class[c] == pytest.approx(tp / (tp + fp + fn))

    def test_absent_class_excluded_from_mean(self):
        conf = np.zeros((3, 3), dtype=np.int64)
        conf[0, 0] = 5
        conf[1, 1] = 5
        assert mean_iou(conf) == 1.0


class TestDataset:
    def test_generate_and_load_round_trip(self, tmp_path):
        cfg = SceneConfig(primitives={"plane": 1, "pole": 1})
        meta = generate_dataset(tmp_path / "d", 10, seed=5, config=cfg, split=(8, 1, 1))
        assert meta["split"] == {"train": 8, "val": 1, "test": 1}
        data, meta2 = load_dataset(tmp_path / "d")
        assert len(data["train"]) == 8
        assert len(data["val"]) == 1
        assert len(data["test"]) == 1
        assert meta2["classes"] == ["plane", "pole"]
        pc = data["train"][0]
        assert pc.space == "normalized"
        assert np.array_equal(pc.features, pc.coords.astype(np.float32))

    def test_refuses_existing_dir_without_force(self, tmp_path):
        cfg = SceneConfig(primitives={"plane": 1})
        out = tmp_path / "d"
        generate_dataset(out, 3, 0, cfg)
        with pytest.raises(ConfigError, match="force"):
            generate_dataset(out, 3, 0, cfg)
        generate_dataset(out, 3, 0, cfg, force=True)

    def test_deterministic_files(self, tmp_path):
        cfg = SceneConfig(primitives={"plane": 1, "sphere": 1})
        generate_dataset(tmp_path / "a", 6, 7, cfg)
        generate_dataset(tmp_path / "b", 6, 7, cfg)
        for pa, pb in zip(sorted((tmp_path / "a").rglob("*.pvpc")),
                          sorted((tmp_path / "b").rglob("*.pvpc"))):
            assert pa.read_bytes() == pb.read_bytes()


class TestLoop:
    def _model(self, seed=0):
        cfg = ModelConfig(kind="pvcnn", in_channels=3, num_classes=2,
                          blocks=[BlockSpec(out_channels=8, resolution=4)],
                          classifier_hidden=(8,))
        return SegmentationModel(cfg, seed=seed)

    def _scenes(self, n, tmp_path):
        cfg = SceneConfig(primitives={"plane": 1, "pole": 1})
        generate_dataset(tmp_path / "d", n, 0, cfg)
        data, _ = load_dataset(tmp_path / "d")
        return data["train"]

    def test_same_seed_identical_metrics(self, tmp_path):
        scenes = self._scenes(6, tmp_path)
        runs = []
        for _ in range(2):
            model = self._model(seed=1)
            metrics = train_model(model, scenes[:4], scenes[4:], epochs=2,
                                  optimizer=Adam(lr=0.01), seed=3)
            runs.append(metrics)
        assert runs[0] == runs[1]

    def test_loss_decreases(self, tmp_path):
        scenes = self._scenes(5, tmp_path)
        model = self._model(seed=2)
        metrics = train_model(model, scenes, [], epochs=8, optimizer=Adam(lr=0.01),
                              seed=0)
        assert metrics[-1]["train_loss"] < metrics[0]["train_loss"]

    def test_evaluate_reports_all_fields(self, tmp_path):
        scenes = self._scenes(3, tmp_path)
        result = evaluate_model(self._model(), scenes)
        assert set(result) >= {"miou", "per_class", "accuracy", "confusion"}
        assert 0.0 <= result["miou"] <= 1.0
