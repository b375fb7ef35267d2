"""Five-stage experiment pipeline with per-stage checkpoints and reports.

Stages: victim training, poisoning + retraining, trigger recovery,
unlearning (+ fine-tune baseline), evaluation. Every stage writes its
artifacts into the output directory; a re-run resumes from the last stage
whose files are present and reproduces all metrics bitwise for a fixed
config and seed.
"""

from __future__ import annotations

import copy
import csv
import json
import shutil
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import datapipe, netlab, poisoner, recovery
from .eraser import UnlearnConfig, finetune_baseline, unlearn
from .netlab import Classifier, TrainConfig
from .numcore import DTYPE
from .numcore.seeds import derive_seed, make_rng
from .recovery import RecoveryConfig, TriggerPool

REPORT_SCHEMA_VERSION = 1

DEFAULT_CONFIG: dict = {
    "seed": 0,
    "out_dir": "runs/experiment",
    "data": {
        "train_images": "data/train-images-idx3-ubyte",
        "train_labels": "data/train-labels-idx1-ubyte",
        "test_images": "data/t10k-images-idx3-ubyte",
        "test_labels": "data/t10k-labels-idx1-ubyte",
        "train_size": 10000,
    },
    "victim": {"kind": "small_cnn", "epochs": 12, "batch_size": 128,
               "lr": 0.01, "momentum": 0.9},
    # the backdoor is injected by retraining the trained clean model on the
    # poisoned set for a few epochs; a short retrain leaves the trigger
    # response unsaturated, which recovery and unlearning both depend on for
    # usable gradients, while the long clean phase keeps decision boundaries
    # sharp (the unpoisoned model then resists universal perturbations)
    "attack": {"kind": "white_square", "size": 3, "placement": ["fixed", 0, 0],
               "kappa": 0.2, "target_label": 0, "poison_rate": 0.10,
               "retrain_epochs": 3},
    "split": {"holding_ratio": 0.05},
    # the small generator learning rate and modest step budget are what
    # separate a memorized trigger from a from-scratch universal perturbation;
    # the MI estimator needs a much larger step size to track the generator
    "recovery": {"thresholds": 3, "mi_weight": 1.0, "asr_threshold": 0.9,
                 "batch_size": 64, "steps": 175, "noise_dim": 32,
                 "lr": 0.0005, "estimator_lr": 0.2, "momentum": 0.9,
                 "mean_samples": 256},
    "unlearn": {"alpha": 1.0, "beta": 1.0, "max_iterations": 50, "lr": 0.01,
                "momentum": 0.9, "batch_size": 128, "asr_target": 0.01},
    "finetune": {"epochs": 5, "lr": 0.01},
}


class StageError(RuntimeError):
    """A pipeline stage failed; carries the stage name."""

    def __init__(self, stage: str, message: str):
        super().__init__(f"[{stage}] {message}")
        self.stage = stage


def _deep_update(base: dict, extra: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in extra.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _deep_update(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def load_config(path: str | Path | None = None, overrides: dict | None = None) -> dict:
    """Defaults, optionally updated from a JSON file and dotted-key overrides."""
    cfg = copy.deepcopy(DEFAULT_CONFIG)
    if path is not None:
        cfg = _deep_update(cfg, json.loads(Path(path).read_text()))
    for key, value in (overrides or {}).items():
        node = cfg
        parts = key.split(".")
        for p in parts[:-1]:
            node = node.setdefault(p, {})
        node[parts[-1]] = value
    return cfg


def _parse_override_value(raw: str):
    try:
        return json.loads(raw)
    except json.JSONDecodeError:
        return raw


def parse_overrides(pairs: list[str]) -> dict:
    out = {}
    for pair in pairs:
        if "=" not in pair:
            raise ValueError(f"override {pair!r} is not key=value")
        key, raw = pair.split("=", 1)
        out[key] = _parse_override_value(raw)
    return out


def _trigger_from_config(cfg: dict, input_shape: tuple[int, int, int],
                         seed: int) -> poisoner.TriggerSpec:
    a = cfg["attack"]
    if a["kind"] == "white_square":
        spec = poisoner.TriggerSpec(
            np.ones((a["size"], a["size"], input_shape[2]), dtype=DTYPE),
            tuple(a["placement"]), ("replace",), a["target_label"])
    elif a["kind"] == "noise_blend":
        spec = poisoner.noise_blend_trigger(input_shape, a["target_label"],
                                            derive_seed(seed, "attack"), a["kappa"])
    else:
        raise StageError("poison", f"unknown attack kind {a['kind']!r}")
    spec.validate_for(input_shape)
    return spec


@dataclass
class Report:
    schema_version: int = REPORT_SCHEMA_VERSION
    config: dict = field(default_factory=dict)
    rows: dict = field(default_factory=dict)       # defense -> {"asr":…, "acc":…}
    recovered: list = field(default_factory=list)  # pool manifest
    no_trigger_recovered: bool = False
    victim: dict = field(default_factory=dict)     # clean-twin / poisoned stats
    timings: dict = field(default_factory=dict)
    errors: list = field(default_factory=list)
    artifacts: dict = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "Report":
        return cls(**json.loads(text))


def write_pgm(path: str | Path, perturbation: np.ndarray) -> None:
    """P5 PGM; perturbation in [-1, 1] maps to pixel round(255*(p+1)/2)."""
    img = np.asarray(perturbation, dtype=DTYPE)
    if img.ndim == 3:
        img = img[:, :, 0]
    pixels = np.rint(255.0 * np.clip((img + 1.0) / 2.0, 0.0, 1.0)).astype(np.uint8)
    h, w = pixels.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        f.write(pixels.tobytes())


class PipelineRun:
    """Stage-by-stage execution with file-based resume."""

    def __init__(self, cfg: dict):
        self.cfg = cfg
        self.seed = int(cfg["seed"])
        self.out = Path(cfg["out_dir"])
        self.out.mkdir(parents=True, exist_ok=True)
        self.report = Report(config=copy.deepcopy(cfg))
        self._train = None
        self._test = None

    # -- data ---------------------------------------------------------------

    def datasets(self) -> tuple[datapipe.LabeledDataset, datapipe.LabeledDataset]:
        if self._train is None:
            d = self.cfg["data"]
            full = datapipe.load_idx(d["train_images"], d["train_labels"])
            size = int(d["train_size"])
            if size > len(full):
                raise StageError("data", f"train_size {size} exceeds dataset of {len(full)}")
            idx = np.sort(make_rng(self.seed, "train-subset").permutation(len(full))[:size])
            self._train = full.subset(idx)
            self._test = datapipe.load_idx(d["test_images"], d["test_labels"])
        return self._train, self._test

    def split(self) -> tuple[datapipe.LabeledDataset, datapipe.LabeledDataset]:
        train, test = self.datasets()
        spec = datapipe.SplitSpec(self.cfg["split"]["holding_ratio"],
                                  derive_seed(self.seed, "split"))
        return datapipe.take_clean_holdout(test, len(train), spec)

    def _timed(self, name: str, fn):
        t0 = time.monotonic()
        out = fn()
        self.report.timings[name] = time.monotonic() - t0
        return out

    # -- stages -------------------------------------------------------------

    def stage_train_victim(self) -> Classifier:
        path = self.out / "victim_clean.ckpt"
        train, _ = self.datasets()
        if path.exists():
            return Classifier.load(path)

        def run():
            v = self.cfg["victim"]
            model = netlab.build_classifier(v["kind"], train.input_shape, 10,
                                            derive_seed(self.seed, "victim-init"))
            cfg = TrainConfig(epochs=v["epochs"], batch_size=v["batch_size"],
                              lr=v["lr"], momentum=v["momentum"],
                              seed=derive_seed(self.seed, "victim-train"))
            model, _ = netlab.train(model, train, cfg)
            return model

        model = self._timed("train_victim", run)
        model.save(path)
        return model

    def stage_poison(self) -> tuple[Classifier, poisoner.TriggerSpec]:
        train, _ = self.datasets()
        spec = _trigger_from_config(self.cfg, train.input_shape, self.seed)
        spec.save(self.out / "trigger")
        path = self.out / "victim_poisoned.ckpt"
        if path.exists():
            return Classifier.load(path), spec
        self.stage_train_victim()  # ensures victim_clean.ckpt exists

        def run():
            a = self.cfg["attack"]
            try:
                poisoned = poisoner.poison_dataset(train, spec, a["poison_rate"],
                                                   derive_seed(self.seed, "poison"))
            except ValueError as e:
                raise StageError("poison", str(e))
            v = self.cfg["victim"]
            model = Classifier.load(self.out / "victim_clean.ckpt")
            cfg = TrainConfig(epochs=a["retrain_epochs"], batch_size=v["batch_size"],
                              lr=v["lr"], momentum=v["momentum"],
                              seed=derive_seed(self.seed, "poison-retrain"))
            model, _ = netlab.train(model, poisoned.data, cfg)
            return model

        model = self._timed("poison", run)
        model.save(path)
        return model, spec

    def stage_recover(self) -> TriggerPool:
        pool_dir = self.out / "pool"
        if (pool_dir / "manifest.json").exists():
            return TriggerPool.load(pool_dir)
        model, _ = self.stage_poison()
        holdout, _ = self.split()

        def run():
            r = self.cfg["recovery"]
            cfg = RecoveryConfig(seed=derive_seed(self.seed, "recovery"), **r)
            return recovery.recover_all(model, holdout, cfg)

        pool = self._timed("recover", run)
        pool.save(pool_dir)
        return pool

    def stage_unlearn(self) -> tuple[Classifier | None, Classifier]:
        """Returns (purified or None when the pool is empty, fine-tuned baseline)."""
        model, _ = self.stage_poison()
        pool = self.stage_recover()
        holdout, _ = self.split()

        ft_path = self.out / "finetuned.ckpt"
        if ft_path.exists():
            finetuned = Classifier.load(ft_path)
        else:
            def run_ft():
                f = self.cfg["finetune"]
                base = Classifier.load(self.out / "victim_poisoned.ckpt")
                return finetune_baseline(base, holdout, f["epochs"], f["lr"],
                                         seed=derive_seed(self.seed, "finetune"))
            finetuned = self._timed("finetune", run_ft)
            finetuned.save(ft_path)

        if len(pool) == 0:
            self.report.no_trigger_recovered = True
            return None, finetuned

        pu_path = self.out / "purified.ckpt"
        if pu_path.exists():
            return Classifier.load(pu_path), finetuned

        def run_un():
            u = self.cfg["unlearn"]
            cfg = UnlearnConfig(seed=derive_seed(self.seed, "unlearn"), **u)
            base = Classifier.load(self.out / "victim_poisoned.ckpt")
            return unlearn(base, pool, holdout, cfg)

        purified, trace = self._timed("unlearn", run_un)
        purified.save(pu_path)
        traces_dir = self.out / "traces"
        traces_dir.mkdir(exist_ok=True)
        trace.to_csv(traces_dir / f"unlearn_seed{self.seed}.csv", purified.num_classes)
        return purified, finetuned

    def stage_evaluate(self) -> Report:
        train, _ = self.datasets()
        clean_twin = self.stage_train_victim()
        poisoned, spec = self.stage_poison()
        pool = self.stage_recover()
        purified, finetuned = self.stage_unlearn()
        _, eval_set = self.split()

        def rate_row(model):
            return {"acc": netlab.accuracy(model, eval_set),
                    "asr": poisoner.attack_success_rate(model, eval_set, spec,
                                                        spec.target_label)}

        self.report.victim = {"clean_twin_acc": netlab.accuracy(clean_twin, eval_set)}
        self.report.rows["before"] = rate_row(poisoned)
        self.report.rows["finetune"] = rate_row(finetuned)
        if purified is not None:
            self.report.rows["unlearn"] = rate_row(purified)
        self.report.recovered = [
            {"index": i, "target_label": e.target_label, "asr": e.asr,
             "threshold": e.threshold} for i, e in enumerate(pool.entries)]
        return self.report


def run_pipeline(cfg: dict) -> Report:
    """Execute every stage; on stage failure return a partial, error-tagged report."""
    run = PipelineRun(cfg)
    try:
        report = run.stage_evaluate()
    except StageError as e:
        run.report.errors.append({"stage": e.stage, "message": str(e)})
        report = run.report
    emit_report(report, run.out)
    return report


def emit_report(report: Report, out_dir: str | Path) -> None:
    """Write report.json, comparison table, and pool trigger images."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "report.json").write_text(report.to_json())
    tables = out_dir / "tables"
    tables.mkdir(exist_ok=True)
    with open(tables / "comparison.csv", "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["defense", "asr", "acc"])
        for defense in ("before", "finetune", "unlearn"):
            if defense in report.rows:
                writer.writerow([defense, report.rows[defense]["asr"],
                                 report.rows[defense]["acc"]])
    pool_dir = out_dir / "pool"
    if (pool_dir / "manifest.json").exists():
        pool = TriggerPool.load(pool_dir)
        trig_dir = out_dir / "triggers"
        trig_dir.mkdir(exist_ok=True)
        for i, e in enumerate(pool.entries):
            write_pgm(trig_dir / f"entry{i}_label{e.target_label}.pgm", e.perturbation)


SWEEP_AXES = {
    "holding_ratio": [round(0.01 * k, 2) for k in range(1, 11)],
    "beta_over_alpha": [0.001, 0.01, 0.1, 1.0, 10.0, 100.0],
    "trigger_size": [3, 5, 7],
}

# upstream stage artifacts unaffected by a sweep axis, shared across points
_SHARED_FILES = {
    "holding_ratio": ["victim_clean.ckpt", "victim_clean.ckpt.arch.json",
                      "victim_poisoned.ckpt", "victim_poisoned.ckpt.arch.json"],
    "beta_over_alpha": ["victim_clean.ckpt", "victim_clean.ckpt.arch.json",
                        "victim_poisoned.ckpt", "victim_poisoned.ckpt.arch.json",
                        "pool"],
    "trigger_size": ["victim_clean.ckpt", "victim_clean.ckpt.arch.json"],
}


def _apply_axis(cfg: dict, axis: str, value) -> dict:
    cfg = copy.deepcopy(cfg)
    if axis == "holding_ratio":
        cfg["split"]["holding_ratio"] = value
    elif axis == "beta_over_alpha":
        # the sweep fixes beta = 1 and varies alpha
        cfg["unlearn"]["beta"] = 1.0
        cfg["unlearn"]["alpha"] = 1.0 / value
    elif axis == "trigger_size":
        cfg["attack"]["size"] = value
    else:
        raise ValueError(f"unknown sweep axis {axis!r}")
    return cfg


def sweep(cfg: dict, axis: str, values: list | None = None) -> list[dict]:
    """One pipeline run per grid point (fixed seed); returns the table rows."""
    if axis not in SWEEP_AXES:
        raise ValueError(f"unknown sweep axis {axis!r} (choose from {sorted(SWEEP_AXES)})")
    values = SWEEP_AXES[axis] if values is None else values
    base_out = Path(cfg["out_dir"])
    rows = []
    for value in values:
        point_cfg = _apply_axis(cfg, axis, value)
        point_out = base_out / f"{axis}_{value}"
        point_cfg["out_dir"] = str(point_out)
        point_out.mkdir(parents=True, exist_ok=True)
        for name in _SHARED_FILES[axis]:
            src, dst = base_out / name, point_out / name
            if src.exists() and not dst.exists():
                if src.is_dir():
                    shutil.copytree(src, dst)
                else:
                    shutil.copy2(src, dst)
        report = run_pipeline(point_cfg)
        row = {"axis": axis, "value": value}
        if report.errors:
            row["error"] = report.errors[0]["message"]
        else:
            target = "unlearn" if "unlearn" in report.rows else "before"
            row["asr"] = report.rows[target]["asr"]
            row["acc"] = report.rows[target]["acc"]
            row["defense"] = target
        rows.append(row)
        # seed the shared artifacts from the first completed point
        for name in _SHARED_FILES[axis]:
            src, dst = point_out / name, base_out / name
            if src.exists() and not dst.exists():
                if src.is_dir():
                    shutil.copytree(src, dst)
                else:
                    shutil.copy2(src, dst)
    tables = base_out / "tables"
    tables.mkdir(parents=True, exist_ok=True)
    with open(tables / f"sweep_{axis}.csv", "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["value", "asr", "acc", "error"])
        for r in rows:
            writer.writerow([r["value"], r.get("asr", ""), r.get("acc", ""),
                             r.get("error", "")])
    return rows
