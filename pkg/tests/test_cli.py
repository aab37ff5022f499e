"""CLI: end-to-end command flows, snapshots, determinism, exit codes."""

import hashlib
import json
from pathlib import Path

import numpy as np
import pytest

from pointvoxel import nas
from pointvoxel.cli import (EXIT_CONFIG, EXIT_INFEASIBLE, EXIT_IO, EXIT_OK, main)


def checksum_tree(root):
    digest = hashlib.sha256()
    for path in sorted(Path(root).rglob("*.pvpc")):
        digest.update(path.name.encode())
        digest.update(path.read_bytes())
    return digest.hexdigest()


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    out = tmp_path_factory.mktemp("data") / "tiny"
    code = main(["gen-data", "--out", str(out), "--scenes", "8",
                 "--seed", "3", "--classes", "plane:1,pole:1", "--split", "6:1:1"])
    assert code == EXIT_OK
    return out


@pytest.fixture(scope="module")
def space_file(tmp_path_factory):
    space = nas.SearchSpace(
        stages=(nas.StageSpec(max_depth=1, channel_choices=(4, 8), voxel_size=1 / 8),),
        kind="spvcnn", in_channels=3, num_classes=2, classifier_hidden=(8,))
    path = tmp_path_factory.mktemp("space") / "space.json"
    path.write_text(json.dumps(space.to_dict()))
    return path


class TestGenData:
    def test_deterministic_checksums(self, tmp_path):
        args = ["gen-data", "--scenes", "6", "--seed", "7", "--classes", "plane,pole"]
        a, b = tmp_path / "a", tmp_path / "b"
        assert main(args + ["--out", str(a)]) == EXIT_OK
        assert main(args + ["--out", str(b)]) == EXIT_OK
        assert checksum_tree(a) == checksum_tree(b)

    def test_single_class_dataset(self, tmp_path):
        out = tmp_path / "single"
        assert main(["gen-data", "--out", str(out), "--scenes", "4",
                     "--classes", "plane", "--split", "2:1:1"]) == EXIT_OK
        from pointvoxel.train import load_dataset
        data, meta = load_dataset(out)
        assert meta["classes"] == ["plane"]
        for pc in data["train"]:
            assert set(pc.labels.tolist()) == {0}

    def test_split_counts(self, dataset):
        from pointvoxel.train import load_dataset
        data, _ = load_dataset(dataset)
        assert (len(data["train"]), len(data["val"]), len(data["test"])) == (6, 1, 1)

    def test_existing_dir_refused_without_force(self, dataset):
        code = main(["gen-data", "--out", str(dataset), "--scenes", "2"])
        assert code == EXIT_CONFIG

    def test_snapshot_written(self, dataset):
        snapshot = json.loads((dataset / "config.snapshot").read_text())
        assert snapshot["scenes"] == 8 and snapshot["seed"] == 3


class TestTrain:
    def test_smoke_and_checkpoint_loadable(self, dataset, tmp_path):
        run = tmp_path / "run"
        code = main(["train", "--data", str(dataset), "--out", str(run),
                     "--model", "pvcnn", "--channels", "8", "--resolution", "4",
                     "--classifier-hidden", "8", "--epochs", "1", "--seed", "1"])
        assert code == EXIT_OK
        assert (run / "config.snapshot").exists()
        assert (run / "metrics.csv").exists()
        from pointvoxel.checkpoint import load_checkpoint
        arrays = load_checkpoint(run / "checkpoints" / "final.ckpt")
        assert arrays["_epochs_done"][0] == 1

    def test_resume_continues_epoch_numbering(self, dataset, tmp_path):
        run1, run2 = tmp_path / "r1", tmp_path / "r2"
        base = ["--data", str(dataset), "--model", "pointmlp", "--channels", "8",
                "--classifier-hidden", "8", "--seed", "2"]
        assert main(["train", *base, "--out", str(run1), "--epochs", "2"]) == EXIT_OK
        assert main(["train", *base, "--out", str(run2), "--epochs", "1",
                     "--resume", str(run1 / "checkpoints" / "final.ckpt")]) == EXIT_OK
        rows = (run2 / "metrics.csv").read_text().strip().splitlines()
        assert rows[1].startswith("2,")  # continues at epoch 2
        from pointvoxel.checkpoint import load_checkpoint
        assert load_checkpoint(run2 / "checkpoints" / "final.ckpt")["_epochs_done"][0] == 3

    def test_rerun_from_snapshot_identical_metrics(self, dataset, tmp_path):
        run1, run2 = tmp_path / "s1", tmp_path / "s2"
        args = ["train", "--data", str(dataset), "--model", "pointmlp",
                "--channels", "8,8", "--classifier-hidden", "8",
                "--epochs", "2", "--seed", "5"]
        assert main(args + ["--out", str(run1)]) == EXIT_OK
        snapshot = run1 / "config.snapshot"
        assert main(["train", "--config", str(snapshot), "--out", str(run2)]) == EXIT_OK
        m1 = (run1 / "metrics.csv").read_text()
        m2 = (run2 / "metrics.csv").read_text()
        assert m1 == m2

    def test_missing_dataset_is_config_error(self, tmp_path):
        code = main(["train", "--data", str(tmp_path / "nope"), "--out",
                     str(tmp_path / "o")])
        assert code == EXIT_CONFIG

    def test_supernet_mode(self, dataset, space_file, tmp_path):
        run = tmp_path / "sn"
        code = main(["train", "--data", str(dataset), "--out", str(run),
                     "--supernet", "--space", str(space_file), "--epochs", "1",
                     "--candidates", "2", "--seed", "0"])
        assert code == EXIT_OK
        assert (run / "checkpoints" / "supernet.ckpt").exists()


@pytest.fixture(scope="module")
def supernet_run(dataset, space_file, tmp_path_factory):
    run = tmp_path_factory.mktemp("sn_run")
    code = main(["train", "--data", str(dataset), "--out", str(run),
                 "--supernet", "--space", str(space_file), "--epochs", "1",
                 "--candidates", "1", "--seed", "0"])
    assert code == EXIT_OK
    return run


class TestSearchCommand:
    def test_non_binding_macs(self, dataset, space_file, supernet_run, tmp_path):
        out = tmp_path / "search"
        code = main(["search", "--data", str(dataset), "--out", str(out),
                     "--supernet", str(supernet_run / "checkpoints" / "supernet.ckpt"),
                     "--space", str(space_file), "--macs", "1e18",
                     "--n-pop", "4", "--top-k", "2", "--generations", "1",
                     "--seed", "0"])
        assert code == EXIT_OK
        best = json.loads((out / "best_arch.json").read_text())
        assert "arch" in best and "model_config" in best
        log_lines = (out / "search.log").read_text().strip().splitlines()
        assert len(log_lines) == 2  # generation 0 and 1
        for line in log_lines:
            entry = json.loads(line)
            assert {"generation", "best_fitness", "best_vector"} <= set(entry)

    def test_tiny_budget_is_infeasible(self, dataset, space_file, supernet_run, tmp_path):
        code = main(["search", "--data", str(dataset), "--out", str(tmp_path / "x"),
                     "--supernet", str(supernet_run / "checkpoints" / "supernet.ckpt"),
                     "--space", str(space_file), "--macs", "0.001",
                     "--n-pop", "4", "--top-k", "2", "--generations", "1",
                     "--seed", "0", "--resample-budget", "20"])
        assert code == EXIT_INFEASIBLE

    def test_search_determinism(self, dataset, space_file, supernet_run, tmp_path):
        outs = []
        for name in ("d1", "d2"):
            out = tmp_path / name
            code = main(["search", "--data", str(dataset), "--out", str(out),
                         "--supernet", str(supernet_run / "checkpoints" / "supernet.ckpt"),
                         "--space", str(space_file), "--macs", "1e18",
                         "--n-pop", "4", "--top-k", "2", "--generations", "1",
                         "--seed", "3"])
            assert code == EXIT_OK
            outs.append(json.loads((out / "best_arch.json").read_text()))
        assert outs[0] == outs[1]


class TestPredictorCommands:
    def test_fit_predictor_from_pairs_file(self, tmp_path, space_file):
        space = nas.SearchSpace.from_dict(json.loads(space_file.read_text()))
        rng = np.random.default_rng(0)
        vectors = np.stack([nas.encode(space, nas.sample_uniform(space, 1, rng))
                            for _ in range(240)])
        targets = vectors @ np.ones(vectors.shape[1]) + 2.0
        pairs = tmp_path / "pairs.csv"
        nas.save_pairs(pairs, vectors, targets)
        out = tmp_path / "pred.ckpt"
        code = main(["fit-predictor", "--pairs", str(pairs), "--out", str(out),
                     "--epochs", "200", "--seed", "0"])
        assert code == EXIT_OK
        predictor = nas.LatencyPredictor.load(out)
        assert predictor.predict(vectors[0]) > 0

    def test_malformed_pairs_is_io_error(self, tmp_path):
        pairs = tmp_path / "bad.csv"
        pairs.write_text("v0,ms\n1.0,oops\n")
        code = main(["fit-predictor", "--pairs", str(pairs),
                     "--out", str(tmp_path / "p.ckpt")])
        assert code == EXIT_IO


class TestBenchCommand:
    def test_memory_bench_writes_csv(self, tmp_path):
        out = tmp_path / "bench"
        code = main(["bench", "memory", "--out", str(out), "--resolutions", "2,4,8"])
        assert code == EXIT_OK
        assert (out / "memory_model.csv").exists()

    def test_access_bench_runs(self, tmp_path):
        code = main(["bench", "access", "--array-mb", "2", "--indices", "65536"])
        assert code == EXIT_OK


class TestEvalCommand:
    def test_eval_trained_run(self, dataset, tmp_path, capsys):
        run = tmp_path / "run"
        assert main(["train", "--data", str(dataset), "--out", str(run),
                     "--model", "pointmlp", "--channels", "8",
                     "--classifier-hidden", "8", "--epochs", "1"]) == EXIT_OK
        code = main(["eval", "--data", str(dataset), "--run", str(run),
                     "--split", "test"])
        assert code == EXIT_OK
        out = capsys.readouterr().out
        assert "mIoU" in out and "iou[plane]" in out
