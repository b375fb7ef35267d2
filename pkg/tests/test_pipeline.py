import json

import numpy as np
import pytest

from backdoorlab import datapipe, netlab, pipeline
from backdoorlab.datapipe import LabeledDataset
from backdoorlab.numcore.seeds import make_rng
from backdoorlab.pipeline import PipelineRun, Report, run_pipeline
from backdoorlab.recovery import PoolEntry, TriggerPool


def write_tiny_idx(dir_path, n_train=60, n_test=30, seed=80):
    """Ten linearly separated 8x8 classes, saved as IDX train/test pairs."""
    rng = make_rng(seed)

    def build(n, tag):
        labels = np.arange(n) % 10
        images = np.clip(labels[:, None, None, None] / 12.0
                         + rng.uniform(0, 0.05, (n, 8, 8, 1)), 0, 1)
        ds = LabeledDataset(images, labels)
        datapipe.save_idx(ds, dir_path / f"{tag}-images", dir_path / f"{tag}-labels")

    build(n_train, "train")
    build(n_test, "test")


def tiny_config(data_dir, out_dir, **extra):
    cfg = pipeline.load_config(None, {
        "out_dir": str(out_dir),
        "data.train_images": str(data_dir / "train-images"),
        "data.train_labels": str(data_dir / "train-labels"),
        "data.test_images": str(data_dir / "test-images"),
        "data.test_labels": str(data_dir / "test-labels"),
        "data.train_size": 60,
        "victim.kind": "mlp",
        "victim.epochs": 1,
        "victim.batch_size": 16,
        "attack.poison_rate": 0.2,
        "split.holding_ratio": 0.1,
        "recovery.thresholds": 1,
        "recovery.steps": 2,
        "recovery.batch_size": 4,
        "recovery.noise_dim": 4,
        "recovery.mean_samples": 4,
        "unlearn.max_iterations": 2,
        "unlearn.batch_size": 8,
        "finetune.epochs": 1,
    })
    for key, value in extra.items():
        node = cfg
        parts = key.split(".")
        for p in parts[:-1]:
            node = node[p]
        node[parts[-1]] = value
    return cfg


@pytest.fixture()
def data_dir(tmp_path):
    d = tmp_path / "data"
    d.mkdir()
    write_tiny_idx(d)
    return d


class TestConfig:
    def test_defaults_plus_file_plus_override_precedence(self, tmp_path):
        cfg_file = tmp_path / "cfg.json"
        cfg_file.write_text(json.dumps({"victim": {"epochs": 3}, "seed": 5}))
        cfg = pipeline.load_config(cfg_file, {"victim.epochs": 7})
        assert cfg["seed"] == 5                       # from the file
        assert cfg["victim"]["epochs"] == 7           # override wins
        assert cfg["victim"]["lr"] == pipeline.DEFAULT_CONFIG["victim"]["lr"]  # default survives the merge

    def test_parse_overrides_types(self):
        out = pipeline.parse_overrides(["a.b=3", "c=0.5", "d=true", "e=text"])
        assert out == {"a.b": 3, "c": 0.5, "d": True, "e": "text"}

    def test_parse_overrides_rejects_missing_equals(self):
        with pytest.raises(ValueError, match="key=value"):
            pipeline.parse_overrides(["nonsense"])


class TestWritePgm:
    def test_value_mapping_and_header(self, tmp_path):
        pert = np.array([[[-1.0], [0.0]], [[1.0], [2.0]]])
        path = tmp_path / "t.pgm"
        pipeline.write_pgm(path, pert)
        raw = path.read_bytes()
        assert raw.startswith(b"P5\n2 2\n255\n")
        assert list(raw[len(b"P5\n2 2\n255\n"):]) == [0, 128, 255, 255]


class TestReport:
    def test_json_round_trip(self):
        r = Report(config={"seed": 1}, rows={"before": {"asr": 0.9, "acc": 0.95}},
                   timings={"poison": 1.5})
        back = Report.from_json(r.to_json())
        assert back == r


class TestPipelineRun:
    def test_end_to_end_artifacts_and_rows(self, data_dir, tmp_path):
        out = tmp_path / "run"
        report = run_pipeline(tiny_config(data_dir, out))
        assert not report.errors
        for name in ("victim_clean.ckpt", "victim_poisoned.ckpt", "trigger.json",
                     "trigger.ckpt", "finetuned.ckpt", "report.json",
                     "tables/comparison.csv", "pool/manifest.json"):
            assert (out / name).exists(), name
        assert set(report.rows) >= {"before", "finetune"}
        for row in report.rows.values():
            assert 0.0 <= row["asr"] <= 1.0 and 0.0 <= row["acc"] <= 1.0
        header = (out / "tables/comparison.csv").read_text().splitlines()[0]
        assert header == "defense,asr,acc"

    def test_metrics_reproduce_bitwise_for_fixed_seed(self, data_dir, tmp_path):
        a = run_pipeline(tiny_config(data_dir, tmp_path / "a"))
        b = run_pipeline(tiny_config(data_dir, tmp_path / "b"))
        assert a.rows == b.rows
        assert a.recovered == b.recovered
        assert a.victim == b.victim

    def test_resume_skips_completed_training(self, data_dir, tmp_path, monkeypatch):
        out = tmp_path / "run"
        first = run_pipeline(tiny_config(data_dir, out))

        def boom(*a, **k):
            raise AssertionError("training re-ran despite existing checkpoints")

        monkeypatch.setattr(netlab, "train", boom)
        second = run_pipeline(tiny_config(data_dir, out))
        assert second.rows == first.rows

    def test_fabricated_pool_feeds_unlearning(self, data_dir, tmp_path):
        out = tmp_path / "run"
        cfg = tiny_config(data_dir, out)
        run = PipelineRun(cfg)
        run.stage_poison()
        pert = np.zeros((8, 8, 1))
        pert[0, 0, 0] = 1.0
        TriggerPool([PoolEntry(pert, 0, 1.0, 1.0)]).save(out / "pool")
        purified, finetuned = run.stage_unlearn()
        assert purified is not None
        assert (out / "purified.ckpt").exists()
        traces = list((out / "traces").glob("unlearn_seed*.csv"))
        assert len(traces) == 1
        assert traces[0].read_text().startswith("iteration,asr,acc,loss,h0")
        report = run.stage_evaluate()
        assert "unlearn" in report.rows

    def test_stage_error_lands_in_report(self, data_dir, tmp_path):
        out = tmp_path / "run"
        cfg = tiny_config(data_dir, out, **{"attack.poison_rate": 1e-06})
        report = run_pipeline(cfg)
        assert report.errors and report.errors[0]["stage"] == "poison"
        saved = Report.from_json((out / "report.json").read_text())
        assert saved.errors == report.errors

    def test_oversized_train_size_fails_in_data_stage(self, data_dir, tmp_path):
        cfg = tiny_config(data_dir, tmp_path / "run", **{"data.train_size": 10**6})
        report = run_pipeline(cfg)
        assert report.errors and report.errors[0]["stage"] == "data"


class TestSweep:
    def test_beta_over_alpha_fixes_beta_and_inverts_alpha(self):
        cfg = pipeline._apply_axis(pipeline.load_config(), "beta_over_alpha", 100.0)
        assert cfg["unlearn"]["beta"] == 1.0
        assert cfg["unlearn"]["alpha"] == pytest.approx(0.01)

    def test_unknown_axis_rejected(self):
        with pytest.raises(ValueError, match="axis"):
            pipeline.sweep(pipeline.load_config(), "nonsense")

    def test_trigger_size_sweep_shares_clean_victim(self, data_dir, tmp_path):
        out = tmp_path / "sweep"
        cfg = tiny_config(data_dir, out)
        rows = pipeline.sweep(cfg, "trigger_size", values=[3, 5])
        assert [r["value"] for r in rows] == [3, 5]
        assert all("error" not in r for r in rows)
        # both points hold the identical clean-victim checkpoint
        a = (out / "trigger_size_3" / "victim_clean.ckpt").read_bytes()
        b = (out / "trigger_size_5" / "victim_clean.ckpt").read_bytes()
        assert a == b
        table = (out / "tables" / "sweep_trigger_size.csv").read_text().splitlines()
        assert table[0] == "value,asr,acc,error"
        assert len(table) == 3


class TestCli:
    def test_run_subcommand_exit_code_and_report(self, data_dir, tmp_path, capsys):
        from backdoorlab import cli
        out = tmp_path / "run"
        cfg_path = tmp_path / "cfg.json"
        cfg_path.write_text(json.dumps(tiny_config(data_dir, out)))
        code = cli.main(["run", "--config", str(cfg_path),
                         "--override", "unlearn.alpha=0.5"])
        assert code == 0
        report = Report.from_json((out / "report.json").read_text())
        assert report.config["unlearn"]["alpha"] == 0.5
        assert json.loads(capsys.readouterr().out)["rows"] == \
            json.loads(report.to_json())["rows"]

    def test_failing_stage_returns_nonzero(self, data_dir, tmp_path, capsys):
        from backdoorlab import cli
        cfg_path = tmp_path / "cfg.json"
        cfg_path.write_text(json.dumps(
            tiny_config(data_dir, tmp_path / "run", **{"attack.poison_rate": 1e-06})))
        assert cli.main(["run", "--config", str(cfg_path)]) == 1
        assert "[poison]" in capsys.readouterr().err

    def test_make_standin_writes_idx_files(self, tmp_path, capsys):
        from backdoorlab import cli
        code = cli.main(["make-standin", "--out", str(tmp_path / "d"),
                         "--train-size", "40", "--test-size", "20", "--seed", "1"])
        assert code == 0
        paths = json.loads(capsys.readouterr().out)
        ds = datapipe.load_idx(paths["train_images"], paths["train_labels"])
        assert len(ds) == 40 and ds.input_shape == (28, 28, 1)
        assert set(np.unique(ds.labels)) <= set(range(10))
