import numpy as np
import pytest

from backdoorlab import poisoner
from backdoorlab.datapipe import LabeledDataset
from backdoorlab.numcore.seeds import make_rng
from backdoorlab.poisoner import TriggerSpec, apply_trigger, white_square_trigger


class PixelProbe:
    """Stub classifier: label 7 when the corner pixel is lit, else the label 0."""

    def predict(self, images):
        return np.where(images[:, 0, 0, 0] > 0.5, 7, 0)


class TestTriggerSpec:
    def test_non_square_pattern_rejected(self):
        with pytest.raises(ValueError, match="square"):
            TriggerSpec(np.ones((2, 3, 1)), ("fixed", 0, 0), ("replace",), 0)

    def test_out_of_range_pattern_rejected(self):
        with pytest.raises(ValueError, match="\\[0, 1\\]"):
            TriggerSpec(np.full((3, 3, 1), 1.2), ("fixed", 0, 0), ("replace",), 0)

    def test_unsupported_patch_size_rejected(self):
        spec = TriggerSpec(np.ones((4, 4, 1)), ("fixed", 0, 0), ("replace",), 0)
        with pytest.raises(ValueError, match="patch size"):
            spec.validate_for((28, 28, 1))

    def test_full_image_pattern_allowed(self):
        spec = TriggerSpec(np.ones((28, 28, 1)), ("fixed", 0, 0), ("blend", 0.2), 0)
        spec.validate_for((28, 28, 1))

    def test_fixed_placement_outside_image_rejected(self):
        spec = white_square_trigger(3, 1, 0, placement=("fixed", 26, 26))
        with pytest.raises(ValueError, match="outside"):
            spec.validate_for((28, 28, 1))

    def test_bad_blend_opacity_rejected(self):
        with pytest.raises(ValueError, match="kappa"):
            TriggerSpec(np.ones((3, 3, 1)), ("fixed", 0, 0), ("blend", 0.0), 0)

    def test_save_load_round_trip(self, tmp_path):
        spec = TriggerSpec(make_rng(1).uniform(0, 1, (5, 5, 1)),
                           ("fixed", 2, 3), ("blend", 0.25), 4)
        spec.save(tmp_path / "trigger")
        back = TriggerSpec.load(tmp_path / "trigger")
        assert back.pattern.tobytes() == spec.pattern.tobytes()
        assert back.placement == spec.placement
        assert back.mode == spec.mode
        assert back.target_label == spec.target_label


class TestApplyTrigger:
    def test_replace_stamps_exact_window(self):
        image = np.zeros((6, 6, 1))
        out = apply_trigger(image, white_square_trigger(3, 1, 0, ("fixed", 1, 2)))
        expected = np.zeros((6, 6, 1))
        expected[1:4, 2:5, 0] = 1.0
        np.testing.assert_array_equal(out, expected)
        np.testing.assert_array_equal(image, 0.0)  # input untouched

    def test_blend_arithmetic(self):
        # 0.8 * 0.5 + 0.2 * 1.0 = 0.6 inside the window
        image = np.full((4, 4, 1), 0.5)
        spec = TriggerSpec(np.ones((2, 2, 1)), ("fixed", 0, 0), ("blend", 0.2), 0)
        out = apply_trigger(image, spec)
        np.testing.assert_allclose(out[:2, :2, 0], 0.6, atol=1e-15)
        np.testing.assert_allclose(out[2:, :, 0], 0.5, atol=1e-15)

    def test_random_placement_requires_rng(self):
        spec = TriggerSpec(np.ones((2, 2, 1)), ("random",), ("replace",), 0)
        with pytest.raises(ValueError, match="rng"):
            apply_trigger(np.zeros((5, 5, 1)), spec)

    def test_random_placement_stays_in_bounds_and_varies(self):
        spec = TriggerSpec(np.ones((2, 2, 1)), ("random",), ("replace",), 0)
        corners = set()
        for i in range(50):
            out = apply_trigger(np.zeros((5, 5, 1)), spec, make_rng(40, i))
            xs, ys = np.nonzero(out[:, :, 0])
            assert out.sum() == 4.0  # the full patch landed inside
            corners.add((xs.min(), ys.min()))
        assert len(corners) > 1


class TestPoisonDataset:
    def make_data(self, n=100, target=7):
        rng = make_rng(50)
        images = rng.uniform(0, 0.4, (n, 6, 6, 1))
        labels = np.arange(n) % 10
        return LabeledDataset(images, labels)

    def test_count_and_relabel(self):
        data = self.make_data()
        spec = white_square_trigger(3, 1, 7)
        pd = poisoner.poison_dataset(data, spec, 0.1, seed=1)
        assert len(pd.poisoned_indices) == 10
        assert (pd.data.labels[pd.poisoned_indices] == 7).all()
        # untouched rows keep their pixels and labels
        mask = np.ones(len(data), dtype=bool)
        mask[pd.poisoned_indices] = False
        assert pd.data.images[mask].tobytes() == data.images[mask].tobytes()
        assert (pd.data.labels[mask] == data.labels[mask]).all()

    def test_target_label_samples_never_selected(self):
        data = self.make_data()
        pd = poisoner.poison_dataset(data, white_square_trigger(3, 1, 7), 0.3, seed=2)
        assert (data.labels[pd.poisoned_indices] != 7).all()

    def test_count_rounds_half_up(self):
        data = self.make_data(n=25)
        pd = poisoner.poison_dataset(data, white_square_trigger(3, 1, 7), 0.1, seed=3)
        assert len(pd.poisoned_indices) == 3  # 2.5 rounds up

    def test_rate_rounding_to_zero_rejected(self):
        data = self.make_data(n=10)
        with pytest.raises(ValueError, match="zero"):
            poisoner.poison_dataset(data, white_square_trigger(3, 1, 7), 0.01, seed=0)

    def test_seed_determinism(self):
        data = self.make_data()
        spec = white_square_trigger(3, 1, 7)
        a = poisoner.poison_dataset(data, spec, 0.2, seed=4)
        b = poisoner.poison_dataset(data, spec, 0.2, seed=4)
        c = poisoner.poison_dataset(data, spec, 0.2, seed=5)
        assert np.array_equal(a.poisoned_indices, b.poisoned_indices)
        assert a.data.images.tobytes() == b.data.images.tobytes()
        assert not np.array_equal(a.poisoned_indices, c.poisoned_indices)


class TestAttackSuccessRate:
    def make_eval(self):
        # labels 0..9 over dark images; the probe fires only on a lit corner
        images = np.zeros((20, 6, 6, 1))
        labels = np.arange(20) % 10
        return LabeledDataset(images, labels)

    def test_perfect_trigger_for_probe_model(self):
        spec = white_square_trigger(3, 1, 7, ("fixed", 0, 0))
        asr = poisoner.attack_success_rate(PixelProbe(), self.make_eval(), spec, 7)
        assert asr == 1.0

    def test_off_corner_trigger_never_fires(self):
        spec = white_square_trigger(3, 1, 7, ("fixed", 3, 3))
        asr = poisoner.attack_success_rate(PixelProbe(), self.make_eval(), spec, 7)
        assert asr == 0.0

    def test_target_label_samples_excluded(self):
        # probe sends unlit images to 0, so scoring target 0 on unlit data
        # would be 1.0 only because of the exclusion arithmetic
        ds = self.make_eval()
        spec = white_square_trigger(3, 1, 0, ("fixed", 3, 3))
        asr = poisoner.attack_success_rate(PixelProbe(), ds, spec, 0)
        assert asr == 1.0  # 18 of 18 non-zero-label samples predicted 0

    def test_full_image_additive_perturbation(self):
        pert = np.zeros((6, 6, 1))
        pert[0, 0, 0] = 5.0  # clipped to lift the corner pixel to 1.0
        asr = poisoner.attack_success_rate(PixelProbe(), self.make_eval(), pert, 7)
        assert asr == 1.0

    def test_perturbation_shape_mismatch_rejected(self):
        with pytest.raises(ValueError, match="perturbation"):
            poisoner.attack_success_rate(PixelProbe(), self.make_eval(),
                                         np.zeros((3, 3, 1)), 7)

    def test_all_target_label_rejected(self):
        ds = LabeledDataset(np.zeros((4, 6, 6, 1)), np.full(4, 7))
        spec = white_square_trigger(3, 1, 7)
        with pytest.raises(ValueError, match="target label"):
            poisoner.attack_success_rate(PixelProbe(), ds, spec, 7)
