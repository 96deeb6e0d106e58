import numpy as np
import pytest

import autodiff as ad
from attacks import (AttackConfig, TransformSampler, attack_objective, attack_sequence, dump_inspection,
                     eot_distance, fgs, iterative_fgs, squared_l2)
from classifier import loss_and_input_grad
from edge_penalty import PenaltyWeights, edge_mask_for
from errors import (BelowResolutionError, ConfigError, DataValidationError, LabelError, ShapeError,
                    UsageError)
from geodata import ImageChip
from patch_model import PhysicalPatch, Placement, covered_means


def toy_config(**overrides):
    fields = dict(target_label=1, targeted=True, frames_attacked=2, n=4, element_size_m=1.0,
                  weights=PenaltyWeights(1e-3, 0.0), phases=((20, 1e-2),), jitter_px=0, seed=0)
    fields.update(overrides)
    return AttackConfig(**fields)


@pytest.fixture
def toy_sequence(make_sequence, rng):
    return make_sequence([rng.uniform(0, 1, (8, 8, 3)) for _ in range(3)], label=0, scene_id="toy",
                         gsd_m_per_px=1.0)


# -- configuration ---------------------------------------------------------

@pytest.mark.parametrize("overrides", [
    {"target_label": None},
    {"frames_attacked": 0},
    {"n": 0},
    {"element_size_m": 0.0},
    {"phases": ((10, 0.0),)},
    {"jitter_px": -1},
    {"canny_low": 0.3, "canny_high": 0.2},
])
def test_invalid_attack_config(overrides):
    with pytest.raises(ConfigError):
        toy_config(**overrides)


def test_non_targeted_needs_no_target():
    cfg = toy_config(target_label=None, targeted=False)
    assert cfg.total_epochs == 20
    assert AttackConfig.from_dict(cfg.to_dict()) == cfg


def test_sequence_checks(toy_sequence):
    with pytest.raises(UsageError):
        toy_config(frames_attacked=4).check_sequence(toy_sequence, 2)
    with pytest.raises(UsageError):
        toy_config(target_label=0).check_sequence(toy_sequence, 2)
    with pytest.raises(LabelError):
        toy_config(target_label=5).check_sequence(toy_sequence, 2)
    toy_config().check_sequence(toy_sequence, 2)


def test_sampler_bounds_and_determinism():
    draws = TransformSampler(2, seed=4).sample(500)
    assert draws.shape == (500, 2)
    assert draws.min() == -2 and draws.max() == 2
    np.testing.assert_array_equal(draws, TransformSampler(2, seed=4).sample(500))
    assert not TransformSampler(0, seed=4).sample(3).any()


# -- digital baselines -----------------------------------------------------

def test_fgs_with_zero_step_is_identity(make_linear_model, rng):
    chip = rng.uniform(0, 1, (8, 8, 3)).astype(np.float32)
    np.testing.assert_array_equal(fgs(make_linear_model(), chip, 0.0), chip)


def test_fgs_stays_in_the_ball_and_the_box(make_linear_model, rng):
    chip = rng.uniform(0, 1, (8, 8, 3)).astype(np.float32)
    adv = fgs(make_linear_model(), chip, 0.1)
    assert np.abs(adv - chip).max() <= 0.1 + 1e-6
    assert adv.min() >= 0 and adv.max() <= 1


def test_fgs_first_order_gain(make_linear_model, rng):
    model = make_linear_model()
    chip = rng.uniform(0.2, 0.8, (8, 8, 3))
    eps = 0.01
    adv = fgs(model, chip, eps, label=1, project=False, precision=ad.Precision.VERIFY)
    _, grad = loss_and_input_grad(model, chip, 1, ad.Precision.VERIFY)
    assert np.sum(grad * (adv - chip)) == pytest.approx(eps * np.abs(grad).sum(), rel=1e-9)


def test_fgs_keeps_chip_metadata(make_linear_model, make_meta, rng):
    chip = ImageChip(rng.uniform(0, 1, (8, 8, 3)), make_meta(gsd_m_per_px=0.7))
    adv = fgs(make_linear_model(), chip, 0.05)
    assert isinstance(adv, ImageChip)
    assert adv.metadata == chip.metadata


def test_iterative_single_full_step_equals_fgs(make_linear_model, rng):
    model = make_linear_model()
    chip = rng.uniform(0, 1, (8, 8, 3)).astype(np.float32)
    np.testing.assert_allclose(iterative_fgs(model, chip, 0.05, 0.05, 1), fgs(model, chip, 0.05), atol=1e-7)


def test_iterative_on_a_linear_model_saturates_to_fgs(make_linear_model, rng):
    # the loss gradient of a two-class linear model has a fixed sign pattern
    model = make_linear_model()
    chip = rng.uniform(0, 1, (8, 8, 3)).astype(np.float32)
    np.testing.assert_allclose(iterative_fgs(model, chip, 0.04, 0.01, 10), fgs(model, chip, 0.04), atol=1e-7)


def test_iterative_parameters(make_linear_model):
    with pytest.raises(ConfigError):
        iterative_fgs(make_linear_model(), np.zeros((8, 8, 3)), 0.1, 0.0, 3)
    with pytest.raises(ConfigError):
        fgs(make_linear_model(), np.zeros((8, 8, 3)), -0.1)


# -- distance ---------------------------------------------------------------

def test_eot_distance():
    zeros, ones = np.zeros((2, 2, 3)), np.ones((2, 2, 3))
    assert squared_l2(zeros, ones) == 12.0
    assert eot_distance([zeros, zeros], [ones, zeros]) == 6.0
    assert eot_distance([ones], [ones]) == 0.0


def test_eot_distance_needs_matching_samples():
    with pytest.raises(ShapeError):
        eot_distance([np.zeros(3)], [])
    with pytest.raises(DataValidationError):
        eot_distance([], [])


# -- physical patch attack -------------------------------------------------

def test_objective_gradient_matches_finite_differences(make_linear_model, toy_sequence, rng):
    model = make_linear_model()
    frames = toy_sequence.frames[:2]
    edges = [edge_mask_for(f, sigma=1.0) for f in frames]
    patch = PhysicalPatch(4, 1.0, rng.uniform(0, 1, (4, 4, 3)))
    offsets = np.array([[0, 1], [-1, 0]])
    weights = PenaltyWeights(1e-2, 1e-1)

    def objective(elements):
        return attack_objective(model, frames, edges, patch, elements, offsets, 1, True, weights)[0]

    assert ad.finite_diff_check(objective, patch.elements).max_rel_error <= 1e-4


def test_objective_decreases_every_epoch(make_linear_model, toy_sequence):
    _, result = attack_sequence(make_linear_model(), toy_sequence, toy_config())
    objectives = [t.objective for t in result.objective_trace]
    assert len(objectives) == 20
    assert all(b < a for a, b in zip(objectives, objectives[1:]))


def test_penalty_alone_pulls_patch_to_covered_pixels(make_linear_model, make_sequence, rng):
    pixels = [rng.uniform(0, 1, (8, 8, 3)) for _ in range(2)]
    seq = make_sequence(pixels, label=0, gsd_m_per_px=1.0)
    cfg = toy_config(weights=PenaltyWeights(1.0, 0.0), phases=((40, 4.0),))
    patch, _ = attack_sequence(make_linear_model(weights=np.zeros((192, 2))), seq, cfg)
    placement = Placement.centered(8)
    expected = np.mean([covered_means(f.pixels, patch, 1.0, placement) for f in seq.frames], axis=0)
    np.testing.assert_allclose(patch.elements, expected, atol=1e-4)


def test_attack_is_reproducible(make_linear_model, toy_sequence):
    cfg = toy_config(jitter_px=1, seed=3)
    a_patch, a = attack_sequence(make_linear_model(), toy_sequence, cfg)
    b_patch, b = attack_sequence(make_linear_model(), toy_sequence, cfg)
    np.testing.assert_array_equal(a_patch.elements, b_patch.elements)
    assert a.to_dict() == b.to_dict()


def test_large_steps_stay_in_the_unit_cube(make_linear_model, toy_sequence):
    # class 0 grows with brightness, so the target-1 gradient is about +0.2 on every element
    weights = np.tile([0.1, -0.1], (192, 1))
    model = make_linear_model(weights=weights)
    assert model.predict_labels(np.stack([f.pixels for f in toy_sequence.frames])).tolist() == [0, 0, 0]
    patch, result = attack_sequence(model, toy_sequence, toy_config(phases=((5, 100.0),)))
    assert result.objective_trace[0].loss > 5
    np.testing.assert_array_equal(patch.elements, 0.0)


def test_every_frame_is_evaluated(make_linear_model, toy_sequence):
    _, result = attack_sequence(make_linear_model(), toy_sequence, toy_config(frames_attacked=1))
    assert [r.attacked for r in result.records] == [True, False, False]
    assert all(r.evaluable and r.pixel_count == 16 for r in result.records)
    assert result.eot_distance is not None and result.eot_distance > 0
    assert result.config["frames_attacked"] == 1


def test_patch_below_resolution_is_refused(make_linear_model, toy_sequence):
    with pytest.raises(BelowResolutionError):
        attack_sequence(make_linear_model(), toy_sequence, toy_config(n=1, element_size_m=0.1))


def test_non_targeted_success_means_error(make_linear_model, toy_sequence):
    cfg = toy_config(target_label=None, targeted=False, phases=((10, 1.0),))
    _, result = attack_sequence(make_linear_model(scale=0.5), toy_sequence, cfg)
    assert result.target_label is None
    assert all(r.success == r.error for r in result.records)


def test_inspection_dump(make_linear_model, toy_sequence, tmp_path):
    cfg = toy_config(phases=((2, 1e-2),))
    patch, _ = attack_sequence(make_linear_model(), toy_sequence, cfg)
    written = dump_inspection(toy_sequence, patch, cfg, tmp_path)
    assert sorted(p.name for p in written) == [
        "composite_000.ppm", "composite_001.ppm", "composite_002.ppm", "edges_000.pbm", "edges_001.pbm"]
    assert all(p.exists() for p in written)
