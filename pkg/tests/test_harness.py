import hashlib
import json
from pathlib import Path

import numpy as np
import pytest

from modfuse.harness import load_task, read_dataset
from modfuse.harness.cli import main
from modfuse.harness.config import GROUP_SIZE, ConfigError
from modfuse.harness.dataset import (DatasetRecord, count_records,
                                     read_header, write_dataset)
from modfuse.harness.pipeline import (build_record, generate_records,
                                      record_to_train)


def file_digest(path):
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def small_task(task=1, horizon=6):
    spec = load_task(1, task)
    spec.cfg.horizon = horizon
    return spec


class TestConfig:
    def test_loads_all_scenarios(self):
        for scenario in (1, 2, 3):
            for task in (1, 2):
                spec = load_task(scenario, task)
                assert spec.cfg.num_sensors == 3
                assert spec.cfg.survival_prob == 0.9
                assert spec.cfg.detection_prob == 0.95
                assert spec.cfg.clutter_rate == 5.0
                assert spec.cfg.birth_rate == 0.1
                assert spec.cfg.scan_time == 0.1
                assert spec.cfg.process_noise == 0.5

    def test_task_noise_levels(self):
        assert load_task(1, 1).cfg.measurement_noise == 0.01
        assert load_task(1, 2).cfg.measurement_noise == 0.1

    def test_scenario3_mobile(self):
        spec = load_task(3, 1)
        assert spec.mobile
        assert spec.input_dim == 18
        assert all(s.mobile for s in spec.cfg.sensors)
        assert all(s.sensor_motion_noise == 10.0 for s in spec.cfg.sensors)

    def test_unknown_task_rejected(self):
        with pytest.raises(ConfigError):
            load_task(1, 9)

    def test_custom_config_file(self, tmp_path):
        path = tmp_path / "custom.yaml"
        path.write_text(
            "scenario: 1\nhorizon: 4\nsensors:\n"
            "  - position: [0.0, 0.0]\n    orientation: 0.0\n")
        spec = load_task(1, 1, config_path=path)
        assert spec.cfg.horizon == 4
        assert spec.cfg.num_sensors == 1


class TestDatasetRoundTrip:
    def make_record(self, rng, index=0, l=4):
        dim = 15
        return DatasetRecord(
            scenario=1, task=1, seed=3, index=index, mobile=False,
            bounds=np.array([-30.0, 30.0, -25.0, 25.0, 0.1]),
            values=rng.normal(size=(l, dim)),
            times=rng.integers(1, 7, l).astype(np.int64),
            steps=rng.integers(1, 7, l).astype(np.int64),
            sensors=rng.integers(1, 4, l).astype(np.int64),
            truth=rng.normal(size=(2, 4)),
        )

    def test_bit_exact_round_trip(self, tmp_path):
        rng = np.random.default_rng(0)
        records = [self.make_record(rng, i) for i in range(3)]
        records.append(DatasetRecord(
            scenario=1, task=1, seed=3, index=3, mobile=False,
            bounds=np.array([-30.0, 30.0, -25.0, 25.0, 0.1]),
            values=np.zeros((0, 15)), times=np.zeros(0, dtype=np.int64),
            steps=np.zeros(0, dtype=np.int64),
            sensors=np.zeros(0, dtype=np.int64), truth=np.zeros((0, 4))))
        path = tmp_path / "data.mfd"
        header = {"scenario": 1, "task": 1}
        write_dataset(path, header, records)
        header2, loaded = read_dataset(path)
        assert header2 == header
        assert len(loaded) == len(records)
        for a, b in zip(records, loaded):
            assert a.scenario == b.scenario and a.index == b.index
            assert np.array_equal(a.bounds, b.bounds)
            assert np.array_equal(a.values, b.values)
            assert np.array_equal(a.times, b.times)
            assert np.array_equal(a.truth, b.truth)
            assert a.mobile == b.mobile

    def test_count_records(self, tmp_path):
        rng = np.random.default_rng(1)
        path = tmp_path / "data.mfd"
        write_dataset(path, {"x": 1}, [self.make_record(rng, i)
                                       for i in range(5)])
        assert count_records(path) == 5

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "bad.mfd"
        path.write_bytes(b"junkjunk" + b"\x01\x00\x00\x00")
        with pytest.raises(Exception, match="magic"):
            with open(path, "rb") as fh:
                read_header(fh)


class TestPipeline:
    def test_record_deterministic(self):
        task = small_task()
        a = build_record(task, seed=5, index=2)
        b = build_record(task, seed=5, index=2)
        assert np.array_equal(a.values, b.values)
        assert np.array_equal(a.truth, b.truth)

    def test_worker_count_does_not_change_content(self):
        task = small_task()
        serial = list(generate_records(task, seed=1, start=0, stop=4,
                                       workers=1))
        parallel = list(generate_records(task, seed=1, start=0, stop=4,
                                         workers=2))
        for a, b in zip(serial, parallel):
            assert a.index == b.index
            assert np.array_equal(a.values, b.values)
            assert np.array_equal(a.truth, b.truth)

    def test_record_to_train_normalizes(self):
        task = small_task()
        rec = build_record(task, seed=7, index=0)
        train_rec = record_to_train(rec)
        assert train_rec.values.shape == rec.values.shape
        if len(train_rec) > 0:
            # positions mapped into the unit box
            assert train_rec.values[:, 0].min() >= -0.01
            assert train_rec.values[:, 0].max() <= 1.01

    def test_mobile_record_dim(self):
        spec = load_task(3, 1)
        spec.cfg.horizon = 5
        rec = build_record(spec, seed=2, index=0)
        assert rec.input_dim == 18


class TestCliGenerate:
    def test_deterministic_bytes(self, tmp_path):
        out1 = tmp_path / "a.mfd"
        out2 = tmp_path / "b.mfd"
        base = ["generate", "--scenario", "1", "--task", "1", "--groups",
                "1", "--seed", "11"]
        assert main(base + ["--out", str(out1)]) == 0
        assert main(base + ["--out", str(out2)]) == 0
        assert file_digest(out1) == file_digest(out2)
        assert count_records(out1) == GROUP_SIZE

    def test_resume_matches_single_shot(self, tmp_path):
        # writing 2 groups in one go equals writing 1 group then resuming
        one = tmp_path / "one.mfd"
        two = tmp_path / "two.mfd"
        base = ["generate", "--scenario", "1", "--task", "1", "--seed", "4"]
        assert main(base + ["--groups", "2", "--out", str(one)]) == 0
        assert main(base + ["--groups", "1", "--out", str(two)]) == 0
        assert main(base + ["--groups", "2", "--out", str(two),
                            "--resume"]) == 0
        _, rec_one = read_dataset(one)
        _, rec_two = read_dataset(two)
        assert len(rec_one) == len(rec_two) == 2 * GROUP_SIZE
        for a, b in zip(rec_one, rec_two):
            assert np.array_equal(a.values, b.values)

    def test_refuses_overwrite_without_flag(self, tmp_path, capsys):
        out = tmp_path / "x.mfd"
        base = ["generate", "--scenario", "1", "--task", "1", "--groups",
                "1", "--seed", "0", "--out", str(out)]
        assert main(base) == 0
        assert main(base) == 2
        assert "error:usage" in capsys.readouterr().err

    def test_zero_groups_header_only(self, tmp_path):
        out = tmp_path / "empty.mfd"
        assert main(["generate", "--scenario", "1", "--task", "1",
                     "--groups", "0", "--seed", "0",
                     "--out", str(out)]) == 0
        header, records = read_dataset(out)
        assert records == []
        assert header["scenario"] == 1


class TestCliFilterFuse:
    def test_filter_writes_json(self, tmp_path):
        out = tmp_path / "filter.json"
        assert main(["filter", "--scenario", "1", "--task", "1", "--seed",
                     "3", "--out", str(out)]) == 0
        payload = json.loads(out.read_text())
        assert len(payload["sensors"]) == 3
        for sensor in payload["sensors"]:
            assert sensor["num_bernoullis"] == len(sensor["bernoullis"])

    def test_fuse_bayesian_only(self, tmp_path):
        out = tmp_path / "fuse.json"
        assert main(["fuse", "--scenario", "1", "--task", "1", "--seed",
                     "3", "--method", "bayesian", "--out", str(out)]) == 0
        payload = json.loads(out.read_text())
        assert "bayesian" in payload["methods"]
        for comp in payload["methods"]["bayesian"]:
            assert 0.0 <= comp["existence"] <= 1.0


def tiny_checkpoint(tmp_path, dataset_path):
    ckpt = tmp_path / "tiny.ckpt"
    assert main(["train", "--data", str(dataset_path), "--out", str(ckpt),
                 "--steps", "3", "--lr", "1e-4", "--model-dim", "32",
                 "--queries", "4", "--seed", "0"]) == 0
    return ckpt


@pytest.fixture(scope="module")
def tiny_setup(tmp_path_factory):
    tmp = tmp_path_factory.mktemp("tiny")
    data = tmp / "data.mfd"
    assert main(["generate", "--scenario", "1", "--task", "1", "--groups",
                 "1", "--seed", "9", "--out", str(data)]) == 0
    ckpt = tiny_checkpoint(tmp, data)
    return tmp, data, ckpt


class TestCliTrainEvaluateDump:
    def test_train_then_evaluate_both(self, tiny_setup, tmp_path):
        _, data, ckpt = tiny_setup
        outdir = tmp_path / "eval"
        assert main(["evaluate", "--scenario", "1", "--task", "1",
                     "--checkpoint", str(ckpt), "--runs", "3",
                     "--tune-runs", "2", "--seed", "5", "--method", "both",
                     "--out", str(outdir)]) == 0
        results = (outdir / "results.csv").read_text().strip().splitlines()
        assert results[0].startswith("scenario,task,method,run")
        assert len(results) == 1 + 2 * 3  # both methods x 3 runs
        summary = (outdir / "summary.csv").read_text().strip().splitlines()
        assert summary[0] == "metric,bayesian,transformer"
        assert len(summary) == 9  # 8 metric rows
        metrics = [line.split(",")[0] for line in summary[1:]]
        assert metrics == ["gospa_total", "gospa_loc", "gospa_miss",
                           "gospa_false", "nll_total", "nll_loc",
                           "nll_miss", "nll_false"]

    def test_evaluate_bayesian_needs_no_checkpoint(self, tmp_path):
        outdir = tmp_path / "eval_bayes"
        assert main(["evaluate", "--scenario", "1", "--task", "1",
                     "--runs", "2", "--tune-runs", "2", "--seed", "6",
                     "--method", "bayesian", "--out", str(outdir)]) == 0
        summary = (outdir / "summary.csv").read_text().splitlines()
        assert summary[1].split(",")[2] == ""  # no transformer column

    def test_evaluate_deterministic_bytes(self, tiny_setup, tmp_path):
        _, data, ckpt = tiny_setup
        digests = []
        for name in ("e1", "e2"):
            outdir = tmp_path / name
            assert main(["evaluate", "--scenario", "1", "--task", "1",
                         "--checkpoint", str(ckpt), "--runs", "2",
                         "--tune-runs", "2", "--seed", "7",
                         "--method", "both", "--out", str(outdir)]) == 0
            digests.append((file_digest(outdir / "results.csv"),
                            file_digest(outdir / "summary.csv")))
        assert digests[0] == digests[1]

    def test_dump_outputs(self, tiny_setup, tmp_path):
        _, data, ckpt = tiny_setup
        outdir = tmp_path / "dump"
        assert main(["dump", "--data", str(data), "--index", "0",
                     "--checkpoint", str(ckpt), "--method", "both",
                     "--out", str(outdir)]) == 0
        for name in ("local_estimates.csv", "truth.csv", "fused.csv",
                     "attention.csv"):
            assert (outdir / name).exists(), name
        attn = (outdir / "attention.csv").read_text().strip().splitlines()
        if len(attn) > 1:
            rows = np.array([line.split(",") for line in attn[1:]])
            weights = rows[:, 3].astype(float)
            layers = rows[:, 0].astype(int)
            queries = rows[:, 1].astype(int)
            for layer in np.unique(layers):
                for query in np.unique(queries):
                    sel = (layers == layer) & (queries == query)
                    assert abs(weights[sel].sum() - 1.0) < 1e-6

    def test_dump_ellipse_axes_definition(self, tiny_setup, tmp_path):
        _, data, ckpt = tiny_setup
        outdir = tmp_path / "dump2"
        assert main(["dump", "--data", str(data), "--index", "1",
                     "--checkpoint", str(ckpt), "--method", "transformer",
                     "--out", str(outdir)]) == 0
        fused = (outdir / "fused.csv").read_text().strip().splitlines()
        assert fused[0].split(",")[7:9] == ["ellipse_minor_3sigma",
                                            "ellipse_major_3sigma"]
        for line in fused[1:]:
            parts = line.split(",")
            assert float(parts[7]) <= float(parts[8]) + 1e-12

    def test_invalid_checkpoint_version_rejected(self, tmp_path, capsys):
        bad = tmp_path / "bad.ckpt"
        bad.write_bytes(b"MFCK" + (42).to_bytes(4, "little"))
        outdir = tmp_path / "eval_bad"
        code = main(["evaluate", "--scenario", "1", "--task", "1",
                     "--checkpoint", str(bad), "--runs", "1",
                     "--method", "both", "--out", str(outdir)])
        assert code == 2
        err = capsys.readouterr().err
        assert "error:config" in err and "version" in err
