"""Data fixtures, IDX parsing, experiment driver, and metric emission."""

import json
import struct
import subprocess
import sys

import numpy as np
import pytest

from oafel.core import derive_stream, validate_config
from oafel.harness import (
    BadMagic,
    CountMismatch,
    ExperimentSpec,
    TruncatedFile,
    balanced_subset,
    emit_metrics,
    load_mnist_idx,
    run_experiment,
    run_single_seed,
    spec_from_config,
    synth_digits784,
    synth_quadratic,
    trace_csv_lines,
)
from oafel.learner import Dataset

from conftest import base_config


def write_idx_pair(tmp_path, images, labels, image_magic=0x803, label_magic=0x801,
                   claim_count=None, truncate_images=False):
    count, rows, cols = images.shape
    img_path = tmp_path / "images-idx3-ubyte"
    lab_path = tmp_path / "labels-idx1-ubyte"
    img_count = count if claim_count is None else claim_count
    payload = images.astype(np.uint8).tobytes()
    if truncate_images:
        payload = payload[:-5]
    img_path.write_bytes(struct.pack(">llll", image_magic, img_count, rows, cols) + payload)
    lab_path.write_bytes(
        struct.pack(">ll", label_magic, len(labels)) + labels.astype(np.uint8).tobytes()
    )
    return img_path, lab_path


class TestLoadMnistIdx:
    def make_images(self, count=12):
        rng = derive_stream(60, "idx")
        images = rng.integers(0, 256, size=(count, 4, 5)).astype(np.uint8)
        labels = rng.integers(0, 10, size=count).astype(np.uint8)
        return images, labels

    def test_roundtrip(self, tmp_path):
        images, labels = self.make_images()
        img, lab = write_idx_pair(tmp_path, images, labels)
        data = load_mnist_idx(img, lab)
        assert len(data) == 12
        assert data.features.shape == (12, 20)
        assert data.features.max() <= 1.0 and data.features.min() >= 0.0
        assert np.allclose(data.features * 255.0, images.reshape(12, 20), atol=1e-12)
        assert np.array_equal(data.labels, labels)

    def test_bad_image_magic(self, tmp_path):
        images, labels = self.make_images()
        img, lab = write_idx_pair(tmp_path, images, labels, image_magic=0x804)
        with pytest.raises(BadMagic):
            load_mnist_idx(img, lab)

    def test_bad_label_magic(self, tmp_path):
        images, labels = self.make_images()
        img, lab = write_idx_pair(tmp_path, images, labels, label_magic=0x802)
        with pytest.raises(BadMagic):
            load_mnist_idx(img, lab)

    def test_truncated_payload(self, tmp_path):
        images, labels = self.make_images()
        img, lab = write_idx_pair(tmp_path, images, labels, truncate_images=True)
        with pytest.raises(TruncatedFile):
            load_mnist_idx(img, lab)

    def test_count_mismatch(self, tmp_path):
        images, labels = self.make_images()
        img, lab = write_idx_pair(tmp_path, images, labels[:-2])
        with pytest.raises(CountMismatch):
            load_mnist_idx(img, lab)


class TestOfflineDigitsCorpus:
    def test_shapes_and_balance(self):
        train, test = synth_digits784(600, 100, seed=0)
        assert train.features.shape == (600, 784)
        assert test.features.shape == (100, 784)
        assert train.class_count == 10
        counts = np.bincount(train.labels, minlength=10)
        assert np.all(counts == 60)
        counts = np.bincount(test.labels, minlength=10)
        assert np.all(counts == 10)
        assert train.features.min() >= 0.0 and train.features.max() <= 1.0

    def test_deterministic_per_seed(self):
        a, _ = synth_digits784(100, 50, seed=3)
        b, _ = synth_digits784(100, 50, seed=3)
        assert np.array_equal(a.features, b.features)
        assert np.array_equal(a.labels, b.labels)
        c, _ = synth_digits784(100, 50, seed=4)
        assert not np.array_equal(a.features, c.features)

    def test_classes_are_separable_by_template_matching(self):
        # nearest-class-mean on held-out samples should beat chance by far
        train, test = synth_digits784(600, 100, seed=1)
        means = np.stack(
            [train.features[train.labels == c].mean(axis=0) for c in range(10)]
        )
        d2 = ((test.features[:, None, :] - means[None, :, :]) ** 2).sum(axis=2)
        acc = float(np.mean(d2.argmin(axis=1) == test.labels))
        assert acc > 0.6


class TestBalancedSubset:
    def test_counts(self):
        rng = derive_stream(61, "bal")
        data = Dataset(
            rng.normal(size=(500, 4)),
            np.repeat(np.arange(10), 50).astype(np.int64),
            10,
        )
        sub = balanced_subset(data, 100, derive_stream(62, "bal"))
        assert len(sub) == 100
        assert np.all(np.bincount(sub.labels, minlength=10) == 10)

    def test_insufficient_class(self):
        data = Dataset(
            np.zeros((20, 2)), np.repeat([0, 1], [18, 2]).astype(np.int64), 2
        )
        with pytest.raises(ValueError):
            balanced_subset(data, 10, derive_stream(63, "bal"))


class TestSynthQuadratic:
    def test_constants_are_exact(self, quad_fixture):
        fx = quad_fixture
        model = fx.model
        assert fx.l_smooth == model.l_smooth
        assert fx.mu == model.mu
        # gradient at w_star over the pooled data is zero
        pooled = np.concatenate([sh.features for sh in fx.shards])
        g = model.gradient(fx.w_star, pooled)
        assert np.linalg.norm(g) < 1e-12
        # F_star is the pooled minimum: nearby points only increase the loss
        rng = derive_stream(64, "probe")
        for _ in range(5):
            w = fx.w_star + rng.normal(0.0, 0.1, size=fx.w_star.shape)
            assert model.loss(w, pooled) >= fx.F_star

    def test_device_variance_matches_probe_estimator(self, quad_fixture):
        from oafel.learner import estimate_variance_bound

        fx = quad_fixture
        for shard, expected in zip(fx.shards, fx.G_sq_local):
            est = estimate_variance_bound(
                fx.model, shard, fx.w_star, 4000, derive_stream(65, "probe")
            )
            assert est == pytest.approx(expected, rel=0.1)

    def test_global_variance_dominates_local(self, quad_fixture):
        # global-centered deviations include the device-mean offset
        fx = quad_fixture
        assert fx.G_sq >= max(fx.G_sq_local) - 1e-12

    def test_curvature_extremes_pinned(self):
        fx = synth_quadratic(2, 5, 32, 1.0, 0.5, 0.25, 4.0, derive_stream(66, "data"))
        assert fx.l_smooth == 4.0
        assert fx.mu == 0.25


def small_spec(policy="dynamic", **over):
    cfg = base_config(
        T=5, N=3, s=4, L_b=8, eta=0.05, V=0.5, E_bar_n=5.0, e_n=0.01
    )
    cfg.update(over)
    hp, devices = validate_config(cfg)
    return ExperimentSpec(
        hp=hp,
        devices=tuple(devices),
        dataset="quadratic",
        policy=policy,
        obs_error=0.1,
        samples_per_device=32,
        sigma_mode="snr_consistent",
    )


class TestRunExperiment:
    def test_trace_length_and_rounds(self):
        traces, summary = run_single_seed(small_spec(), seed=0)
        assert len(traces) == 5
        assert [tr.t for tr in traces] == [1, 2, 3, 4, 5]
        assert summary["rounds"] == 5
        assert summary["policy"] == "dynamic"

    def test_same_seed_same_bytes(self):
        spec = small_spec()
        a, _ = run_single_seed(spec, seed=11)
        b, _ = run_single_seed(spec, seed=11)
        assert trace_csv_lines(a, 3) == trace_csv_lines(b, 3)

    def test_all_policy_schedules_everyone(self):
        traces, _ = run_single_seed(small_spec(policy="all"), seed=1)
        assert all(tr.scheduled == (0, 1, 2) for tr in traces)

    def test_summary_consistency(self):
        traces, summary = run_single_seed(small_spec(), seed=2)
        assert summary["final_loss"] == traces[-1].loss
        assert summary["violations"]["ledger_mismatch"] < 1e-12
        assert summary["violations"]["queue_identities_ok"]
        total = np.zeros(3)
        for tr in traces:
            total += np.asarray(tr.E_cp) + np.asarray(tr.E_tr)
        assert np.allclose(total, summary["total_energy"], atol=1e-12)

    def test_multi_seed_driver(self):
        spec = small_spec()
        out = run_experiment(spec, [0, 1])
        assert set(out) == {0, 1}
        solo, _ = run_single_seed(spec, 0)
        assert trace_csv_lines(out[0][0], 3) == trace_csv_lines(solo, 3)

    def test_thread_env_matches_serial(self, monkeypatch):
        spec = small_spec()
        serial = run_experiment(spec, [0, 1])
        monkeypatch.setenv("OAFEL_THREADS", "2")
        parallel = run_experiment(spec, [0, 1])
        for seed in (0, 1):
            assert trace_csv_lines(serial[seed][0], 3) == trace_csv_lines(
                parallel[seed][0], 3
            )

    def test_thread_env_zero_means_auto(self, monkeypatch):
        spec = small_spec()
        serial = run_experiment(spec, [0, 1])
        monkeypatch.setenv("OAFEL_THREADS", "0")
        auto = run_experiment(spec, [0, 1])
        for seed in (0, 1):
            assert trace_csv_lines(serial[seed][0], 3) == trace_csv_lines(
                auto[seed][0], 3
            )

    def test_long_horizon_scores_test_set_sparsely(self):
        from oafel.harness import _build_state
        from oafel.scheduler import run_round

        raw = base_config(
            T=501, N=4, s=50890, L_b=32, sigma0_sq=1e-8, e_n=7.8e-4, E_bar_n=5.0
        )
        hp, devices = validate_config(raw)
        spec = ExperimentSpec(
            hp=hp,
            devices=tuple(devices),
            dataset="mnist",
            policy="all",
            train_count=600,
            test_count=100,
            sigma_mode="snr_consistent",
        )
        state, _ = _build_state(spec, seed=0)
        traces = [run_round(state, "all") for _ in range(10)]
        assert all(np.isnan(tr.accuracy) for tr in traces[:9])
        assert not np.isnan(traces[9].accuracy)


class TestSpecFromConfig:
    def test_harness_keys_split_from_core(self):
        raw = base_config(T=3)
        raw.update({"dataset": "quadratic", "policy": "all", "obs_error": 0.2})
        spec = spec_from_config(raw)
        assert spec.policy == "all"
        assert spec.obs_error == 0.2
        assert spec.hp.T == 3

    def test_overrides_take_precedence(self):
        raw = base_config(T=3)
        spec = spec_from_config(raw, T=7, policy="myopic")
        assert spec.hp.T == 7
        assert spec.policy == "myopic"

    def test_unknown_core_key_still_rejected(self):
        raw = base_config()
        raw["mystery"] = 1
        from oafel.core import InvalidValue

        with pytest.raises(InvalidValue):
            spec_from_config(raw)

    def test_unknown_policy_rejected(self):
        from oafel.core import InvalidValue

        with pytest.raises(InvalidValue):
            spec_from_config(base_config(), policy="random")


class TestEmitMetrics:
    def test_csv_contract(self, tmp_path):
        spec = small_spec()
        traces, summary = run_single_seed(spec, seed=5)
        csv_path, json_path = emit_metrics(traces, summary, tmp_path, "trace_seed5")
        lines = csv_path.read_text().splitlines()
        assert len(lines) == 6
        header = lines[0].split(",")
        assert header[:7] == [
            "t", "loss", "accuracy", "sigma_t", "k_star", "snr", "unified_energy",
        ]
        for stem in ("q", "E_est", "E_cp", "E_tr", "sched"):
            for n in range(3):
                assert f"{stem}_{n}" in header
        assert len(header) == 7 + 5 * 3
        row = lines[1].split(",")
        assert len(row) == len(header)
        assert row[0] == "1"
        summary_loaded = json.loads(json_path.read_text())
        assert summary_loaded["seed"] == 5

    def test_byte_identical_across_processes(self, tmp_path):
        code = (
            "import sys; sys.path.insert(0, {root!r}); "
            "from tests_support_rerun import emit_once; emit_once({out!r})"
        )
        support = tmp_path / "tests_support_rerun.py"
        support.write_text(
            "def emit_once(out):\n"
            "    from test_harness import small_spec\n"
            "    from oafel.harness import emit_metrics, run_single_seed\n"
            "    traces, summary = run_single_seed(small_spec(), seed=9)\n"
            "    emit_metrics(traces, summary, out, 'rerun')\n"
        )
        import os
        import pathlib

        tests_dir = str(pathlib.Path(__file__).parent)
        outs = []
        for hash_seed in ("11", "3917"):
            out = tmp_path / hash_seed
            env = dict(os.environ)
            env["PYTHONPATH"] = tests_dir
            # different hash seeds: set/dict iteration must not leak into bytes
            env["PYTHONHASHSEED"] = hash_seed
            subprocess.run(
                [
                    sys.executable,
                    "-c",
                    code.format(root=str(tmp_path), out=str(out)),
                ],
                check=True,
                env=env,
            )
            outs.append((out / "rerun.csv").read_bytes())
        assert outs[0] == outs[1]

    def test_seventeen_significant_digits(self, tmp_path):
        traces, summary = run_single_seed(small_spec(), seed=6)
        csv_path, _ = emit_metrics(traces, summary, tmp_path, "digits")
        row = csv_path.read_text().splitlines()[1].split(",")
        loss = float(row[1])
        assert row[1] == format(loss, ".17g")


class TestCli:
    def write_config(self, tmp_path, **over):
        cfg = base_config(T=4, N=3, s=4, L_b=8, eta=0.05, E_bar_n=5.0)
        cfg.update(
            {
                "dataset": "quadratic",
                "policy": "dynamic",
                "samples_per_device": 32,
                "sigma_mode": "snr_consistent",
            }
        )
        cfg.update(over)
        path = tmp_path / "config.json"
        path.write_text(json.dumps(cfg))
        return path

    def test_run_and_report_end_to_end(self, tmp_path):
        from oafel.cli import main

        cfg = self.write_config(tmp_path)
        out = tmp_path / "out"
        rc = main(
            ["run", "--config", str(cfg), "--seed", "0", "--out", str(out)]
        )
        assert rc == 0
        csvs = sorted(out.glob("*.csv"))
        assert len(csvs) == 1
        rc = main(["report", "--out", str(out)])
        assert rc == 0
        pngs = sorted(out.glob("*.png"))
        assert pngs, "report must render figures next to the CSVs"
        assert all(p.stat().st_size > 0 for p in pngs)

    def test_policy_and_rounds_overrides(self, tmp_path):
        from oafel.cli import main

        cfg = self.write_config(tmp_path)
        out = tmp_path / "out2"
        rc = main(
            [
                "run",
                "--config", str(cfg),
                "--seed", "3",
                "--policy", "all",
                "--rounds", "2",
                "--out", str(out),
            ]
        )
        assert rc == 0
        csv_path = next(out.glob("trace_all_seed3.csv"))
        lines = csv_path.read_text().splitlines()
        assert len(lines) == 3

    def test_unknown_flag_rejected_nonzero(self, tmp_path):
        cfg = self.write_config(tmp_path)
        proc = subprocess.run(
            [
                sys.executable,
                "-m",
                "oafel.cli",
                "run",
                "--config", str(cfg),
                "--out", str(tmp_path / "x"),
                "--frobnicate",
            ],
            capture_output=True,
        )
        assert proc.returncode != 0

    def test_missing_config_errors_cleanly(self, tmp_path):
        from oafel.cli import main

        rc = main(
            ["run", "--config", str(tmp_path / "nope.json"), "--out", str(tmp_path)]
        )
        assert rc == 2

    def test_bad_config_value_errors_cleanly(self, tmp_path):
        from oafel.cli import main

        cfg = self.write_config(tmp_path, momentum=2.0)
        rc = main(["run", "--config", str(cfg), "--out", str(tmp_path / "y")])
        assert rc == 2
