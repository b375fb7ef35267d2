import numpy as np
import pytest

import backdoorlab.numcore as nc
from backdoorlab import recovery
from backdoorlab.datapipe import LabeledDataset
from backdoorlab.netlab import build_classifier
from backdoorlab.numcore import Tensor
from backdoorlab.numcore.seeds import make_rng
from backdoorlab.recovery import (Generator, MIEstimator, PoolEntry,
                                  RecoveryConfig, TriggerPool, mine_estimate)


def tiny_setup(num_classes=3, n=24, seed=60):
    rng = make_rng(seed)
    model = build_classifier("mlp", (4, 4, 1), num_classes, seed=seed, hidden=6)
    holdout = LabeledDataset(rng.uniform(0, 1, (n, 4, 4, 1)),
                             rng.integers(0, num_classes, n))
    return model, holdout


def tiny_config(**kw):
    base = dict(thresholds=1, steps=3, batch_size=4, noise_dim=4,
                mean_samples=8, lr=0.01, seed=0)
    base.update(kw)
    return RecoveryConfig(**base)


class TestThresholds:
    def test_five_thresholds(self):
        assert recovery.make_thresholds(5) == [0.2, 0.4, 0.6, 0.8, 1.0]

    def test_single_threshold_is_one(self):
        assert recovery.make_thresholds(1) == [1.0]

    def test_zero_rejected(self):
        with pytest.raises(ValueError):
            recovery.make_thresholds(0)


class TestGenerator:
    def test_output_shape_and_range(self):
        gen = Generator((4, 4, 1), noise_dim=4, seed=1, hidden=(8, 8))
        out = gen.forward(Tensor(make_rng(2).normal(size=(5, 4)))).data
        assert out.shape == (5, 4, 4, 1)
        assert out.min() >= -1.0 and out.max() <= 1.0

    def test_mean_perturbation_deterministic_given_rng(self):
        gen = Generator((4, 4, 1), noise_dim=4, seed=1, hidden=(8, 8))
        a = gen.mean_perturbation(16, make_rng(3))
        b = gen.mean_perturbation(16, make_rng(3))
        assert a.tobytes() == b.tobytes()


class TestMineEstimate:
    def test_constant_statistics_network_gives_zero_bound(self):
        # with T identically zero: mean(T) - (log(sum exp T) - log n) = 0
        est = MIEstimator(3, 2, seed=4, hidden=5)
        est.params.assign_flat(np.zeros(len(est.params.flatten())))
        rng = make_rng(5)
        bound = mine_estimate(est, Tensor(rng.normal(size=(6, 3))),
                              Tensor(rng.normal(size=(6, 2))),
                              Tensor(rng.normal(size=(6, 3))),
                              Tensor(rng.normal(size=(6, 2))))
        assert bound.item() == pytest.approx(0.0, abs=1e-12)

    def test_matches_numpy_oracle(self):
        est = MIEstimator(3, 2, seed=6, hidden=5)
        rng = make_rng(7)
        ja, jb = rng.normal(size=(6, 3)), rng.normal(size=(6, 2))
        ma, mb = rng.normal(size=(8, 3)), rng.normal(size=(8, 2))

        def t_net(a, b):
            x = np.concatenate([a, b], axis=1)
            p = dict((n, t.data) for n, t in est.params.segments)
            h = np.maximum(x @ p["mi.dense1.w"] + p["mi.dense1.b"], 0)
            return (h @ p["mi.dense2.w"] + p["mi.dense2.b"]).ravel()

        expected = t_net(ja, jb).mean() - (
            np.log(np.exp(t_net(ma, mb)).sum()) - np.log(8))
        bound = mine_estimate(est, Tensor(ja), Tensor(jb), Tensor(ma), Tensor(mb))
        assert bound.item() == pytest.approx(expected, abs=1e-10)

    def test_batch_of_one_rejected(self):
        est = MIEstimator(2, 2, seed=0, hidden=4)
        one = Tensor(np.zeros((1, 2)))
        with pytest.raises(ValueError):
            mine_estimate(est, one, one, one, one)


class TestRecoveryLoss:
    class ZeroGenerator:
        """Stand-in generator emitting no perturbation at all."""

        def __init__(self, shape):
            self.shape = shape

        def forward(self, noise):
            return Tensor(np.zeros((noise.shape[0], *self.shape)))

    def test_hinge_matches_softmax_oracle_with_null_generator(self):
        model, holdout = tiny_setup()
        images = holdout.images[:5]
        eps, y = 0.8, 1
        noise = Tensor(np.zeros((5, 4)))
        loss = recovery.recovery_loss(model, self.ZeroGenerator((4, 4, 1)), None,
                                      images, eps, 0.0, y, noise, noise)
        logits = model.logits(images)
        p = np.exp(logits - logits.max(axis=1, keepdims=True))
        p /= p.sum(axis=1, keepdims=True)
        expected = np.maximum(0.0, eps - p[:, y]).mean()
        assert loss.item() == pytest.approx(expected, abs=1e-12)

    def test_label_outside_model_rejected(self):
        model, holdout = tiny_setup()
        noise = Tensor(np.zeros((2, 4)))
        with pytest.raises(ValueError, match="label"):
            recovery.recovery_loss(model, self.ZeroGenerator((4, 4, 1)), None,
                                   holdout.images[:2], 0.5, 0.0, 9, noise, noise)


class TestRecoverForLabel:
    def test_victim_parameters_untouched(self):
        model, holdout = tiny_setup()
        before = model.params.flatten()
        cands = recovery.recover_for_label(model, holdout, 0, tiny_config())
        assert model.params.flatten().tobytes() == before.tobytes()
        assert len(cands) == 1
        eps, pert = cands[0]
        assert eps == 1.0
        assert pert.shape == (4, 4, 1)
        assert np.abs(pert).max() <= 1.0

    def test_deterministic_across_runs(self):
        model, holdout = tiny_setup()
        a = recovery.recover_for_label(model, holdout, 1, tiny_config(thresholds=2))
        b = recovery.recover_for_label(model, holdout, 1, tiny_config(thresholds=2))
        assert len(a) == len(b) == 2
        for (ea, pa), (eb, pb) in zip(a, b):
            assert ea == eb and pa.tobytes() == pb.tobytes()

    def test_different_seeds_differ(self):
        model, holdout = tiny_setup()
        a = recovery.recover_for_label(model, holdout, 1, tiny_config(seed=0))
        b = recovery.recover_for_label(model, holdout, 1, tiny_config(seed=1))
        assert a[0][1].tobytes() != b[0][1].tobytes()

    def test_empty_holdout_rejected(self):
        model, _ = tiny_setup()
        empty = LabeledDataset(np.zeros((0, 4, 4, 1)), np.zeros(0, dtype=int))
        with pytest.raises(ValueError, match="empty"):
            recovery.recover_for_label(model, empty, 0, tiny_config())


class TestRecoverAll:
    def test_skips_label_saturating_the_holdout(self):
        model, _ = tiny_setup(num_classes=2)
        rng = make_rng(61)
        holdout = LabeledDataset(rng.uniform(0, 1, (8, 4, 4, 1)),
                                 np.zeros(8, dtype=int))
        pool = recovery.recover_all(model, holdout, tiny_config(asr_threshold=1e-6))
        # label 0 fills the whole holdout, so only label 1 can be scored
        assert all(e.target_label == 1 for e in pool.entries)


class TestTriggerPool:
    def make_pool(self):
        rng = make_rng(62)
        return TriggerPool([
            PoolEntry(rng.uniform(-1, 1, (4, 4, 1)), 2, 0.95, 1.0),
            PoolEntry(rng.uniform(-1, 1, (4, 4, 1)), 5, 0.92, 0.5),
            PoolEntry(rng.uniform(-1, 1, (4, 4, 1)), 2, 0.99, 1.0),
        ])

    def test_modal_label(self):
        assert self.make_pool().modal_label() == 2
        assert TriggerPool().modal_label() is None

    def test_save_load_round_trip(self, tmp_path):
        pool = self.make_pool()
        pool.save(tmp_path / "pool")
        back = TriggerPool.load(tmp_path / "pool")
        assert len(back) == 3
        for a, b in zip(pool.entries, back.entries):
            assert a.perturbation.tobytes() == b.perturbation.tobytes()
            assert (a.target_label, a.asr, a.threshold) == \
                   (b.target_label, b.asr, b.threshold)

    def test_empty_pool_round_trip(self, tmp_path):
        TriggerPool().save(tmp_path / "pool")
        assert len(TriggerPool.load(tmp_path / "pool")) == 0


class TestFitMiEstimator:
    def test_returns_finite_bound_on_tiny_problem(self):
        rng = make_rng(63)
        a = rng.normal(size=(64, 1))
        _, bound = recovery.fit_mi_estimator(a, a + rng.normal(size=(64, 1)),
                                             steps=30, batch_size=32, hidden=8)
        assert np.isfinite(bound)

    def test_length_mismatch_rejected(self):
        with pytest.raises(ValueError, match="length"):
            recovery.fit_mi_estimator(np.zeros((4, 1)), np.zeros((5, 1)), steps=1)
