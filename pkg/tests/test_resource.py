"""Resource models: MAC accounting vs instrumented execution, and the
latency regressor on controlled targets."""

import numpy as np
import pytest

import pointvoxel.autodiff as ad
from pointvoxel import nas
from pointvoxel.cloud import SceneConfig, generate_synthetic_scene
from pointvoxel.errors import ContractError, FileFormatError
from pointvoxel.train import prepare_scene


def spv_space():
    return nas.SearchSpace(
        stages=(
            nas.StageSpec(max_depth=2, channel_choices=(4, 8), voxel_size=1 / 8),
            nas.StageSpec(max_depth=2, channel_choices=(8, 16), voxel_size=1 / 16),
        ),
        kind="spvcnn", in_channels=3, num_classes=3, classifier_hidden=(8,))


def scenes(n, seed=0):
    cfg = SceneConfig(primitives={"plane": 1, "sphere": 1, "pole": 2})
    return [prepare_scene(generate_synthetic_scene(cfg, seed + i)) for i in range(n)]


class TestMacsClosedForms:
    def test_single_sparse_layer_one_voxel(self):
        # one active voxel: only the center offset maps; 1 pair * 2 * 3
        from pointvoxel.sparse import (NUM_OFFSETS, SparseTensor, build_kernel_map,
                                       sparse_conv)
        st = SparseTensor(np.array([[0, 1, 1, 1]]), np.ones((1, 2), dtype=np.float32))
        kmap = build_kernel_map(st, stride=1)
        with ad.count_macs() as counter:
            sparse_conv(st, np.zeros((NUM_OFFSETS, 2, 3), dtype=np.float32), kmap)
        assert counter.total == 6

    def test_mlp_layer_closed_form(self):
        n, cin, cout = 37, 5, 11
        with ad.count_macs() as counter:
            ad.matmul(ad.Tensor(np.zeros((n, cin))), ad.Tensor(np.zeros((cin, cout))))
        assert counter.total == n * cin * cout


class TestMacsEstimator:
    @pytest.mark.parametrize("seed", range(3))
    def test_estimate_equals_instrumented_execution(self, seed):
        space = spv_space()
        sample = scenes(5, seed=seed * 10)
        estimator = nas.MacsEstimator(space, sample)
        rng = np.random.default_rng(seed)
        sn = nas.SuperNet(space, seed=seed)
        for _ in range(3):
            arch = nas.sample_uniform(space, 1, rng)
            model = sn.extract(arch)
            with ad.count_macs() as counter:
                for pc in sample:
                    model.predict(pc)
            measured_mean = counter.total / len(sample)
            estimate = estimator.estimate(arch)
            assert abs(estimate - measured_mean) / measured_mean < 1e-6

    def test_monotone_in_channels_and_depth(self):
        space = spv_space()
        estimator = nas.MacsEstimator(space, scenes(3))
        base = nas.ArchSpec(depths=(1, 1), channels=((4, 4), (8, 8)))
        wider = nas.ArchSpec(depths=(1, 1), channels=((8, 4), (8, 8)))
        deeper = nas.ArchSpec(depths=(2, 1), channels=((4, 4), (8, 8)))
        assert estimator.estimate(wider) > estimator.estimate(base)
        assert estimator.estimate(deeper) > estimator.estimate(base)

    def test_dense_estimator_matches_execution(self):
        space = nas.SearchSpace(
            stages=(nas.StageSpec(max_depth=1, channel_choices=(4, 8), resolution=4),),
            kind="pvcnn", in_channels=3, num_classes=3, classifier_hidden=(8,))
        sample = scenes(3)
        estimator = nas.MacsEstimator(space, sample)
        sn = nas.SuperNet(space, seed=0)
        arch = nas.max_arch(space)
        model = sn.extract(arch)
        with ad.count_macs() as counter:
            for pc in sample:
                model.predict(pc)
        assert abs(estimator.estimate(arch) - counter.total / len(sample)) \
            / estimator.estimate(arch) < 1e-6

    def test_empty_sample_rejected(self):
        with pytest.raises(ContractError):
            nas.MacsEstimator(spv_space(), [])


class TestLatencyPredictor:
    def _vectors(self, space, n, seed):
        rng = np.random.default_rng(seed)
        return np.stack([nas.encode(space, nas.sample_uniform(space, 1, rng))
                         for _ in range(n)])

    def test_linear_targets_fit_below_one_percent(self):
        space = spv_space()
        vectors = self._vectors(space, 400, seed=0)
        rng = np.random.default_rng(1)
        coef = rng.uniform(0.5, 2.0, size=vectors.shape[1])
        targets = vectors @ coef + 3.0
        predictor, report = nas.fit_latency_predictor(vectors, targets, seed=0)
        assert report["val_mre"] < 0.01

    def test_constant_targets(self):
        space = spv_space()
        vectors = self._vectors(space, 250, seed=2)
        targets = np.full(250, 7.5)
        with pytest.warns(UserWarning):
            predictor, report = nas.fit_latency_predictor(vectors, targets,
                                                          epochs=300, seed=0)
        preds = predictor.predict_many(vectors[:20])
        assert np.abs(preds - 7.5).max() / 7.5 < 0.01

    def test_positive_predictions_everywhere(self):
        space = spv_space()
        vectors = self._vectors(space, 220, seed=3)
        targets = np.random.default_rng(4).uniform(1.0, 5.0, size=220)
        predictor, _ = nas.fit_latency_predictor(vectors, targets, epochs=100, seed=0)
        probe = self._vectors(space, 64, seed=5)
        preds = predictor.predict_many(probe)
        assert (preds > 0).all() and np.isfinite(preds).all()

    def test_minimum_sample_count_enforced(self):
        space = spv_space()
        vectors = self._vectors(space, 50, seed=6)
        with pytest.raises(ContractError):
            nas.fit_latency_predictor(vectors, np.ones(50))

    def test_save_load_round_trip(self, tmp_path):
        space = spv_space()
        vectors = self._vectors(space, 260, seed=7)
        targets = vectors.sum(axis=1) + 2.0
        predictor, _ = nas.fit_latency_predictor(vectors, targets, epochs=150, seed=0)
        path = tmp_path / "latency.ckpt"
        predictor.save(path)
        again = nas.LatencyPredictor.load(path)
        probe = vectors[:10]
        assert np.allclose(predictor.predict_many(probe), again.predict_many(probe))


class TestPairFiles:
    def test_round_trip(self, tmp_path):
        rng = np.random.default_rng(8)
        vectors = rng.random((30, 6))
        targets = rng.uniform(1, 10, size=30)
        path = tmp_path / "pairs.csv"
        nas.save_pairs(path, vectors, targets)
        v2, t2 = nas.load_pairs(path)
        assert np.allclose(v2, vectors, atol=1e-9)
        assert np.allclose(t2, targets, atol=1e-5)

    def test_malformed_row_reports_line_number(self, tmp_path):
        path = tmp_path / "pairs.csv"
        path.write_text("v0,v1,ms\n0.5,0.5,2.0\n0.5,oops,3.0\n")
        with pytest.raises(FileFormatError, match="line 3"):
            nas.load_pairs(path)

    def test_wrong_field_count_reports_line_number(self, tmp_path):
        path = tmp_path / "pairs.csv"
        path.write_text("v0,v1,ms\n0.5,0.5\n")
        with pytest.raises(FileFormatError, match="line 2"):
            nas.load_pairs(path)

    def test_missing_header(self, tmp_path):
        path = tmp_path / "pairs.csv"
        path.write_text("0.5,0.5,2.0\n")
        with pytest.raises(FileFormatError, match="header"):
            nas.load_pairs(path)
