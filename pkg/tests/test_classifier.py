import json
import math

import numpy as np
import pytest

import autodiff as ad
from classifier import (CHECKPOINT_VERSION, Dataset, ModelConfig, accuracy, build_model, load_checkpoint,
                        loss_and_input_grad, predict, read_checkpoint, save_checkpoint, train)
from errors import CheckpointError, ConfigError, DataValidationError, LabelError, ShapeError


def assert_same_params(a, b):
    assert list(a.params) == list(b.params)
    for name in a.params:
        np.testing.assert_array_equal(a.params[name], b.params[name])


def test_build_is_deterministic(tiny_config):
    assert_same_params(build_model(tiny_config), build_model(tiny_config))


def test_default_parameter_count():
    # conv 3->16, 16->32, 32->64 (3x3 + bias), dense 8*8*64 -> 128, head 128 -> 6
    expected = (27 * 16 + 16) + (144 * 32 + 32) + (288 * 64 + 64) + (4096 * 128 + 128) + (128 * 6 + 6)
    assert build_model(ModelConfig()).parameter_count == expected == 548774


def test_indivisible_input_size():
    with pytest.raises(ConfigError):
        ModelConfig(input_size=30, conv_filters=(4, 4))


def test_needs_two_classes():
    with pytest.raises(ConfigError):
        ModelConfig(class_count=1)


def test_minimal_config_forward_on_zeros():
    model = build_model(ModelConfig(input_size=32, class_count=2, conv_filters=(4,), dense_widths=(8,)))
    logits = model.logits(ad.Tensor(np.zeros((32, 32, 3)))).data
    assert logits.shape == (2,)
    assert np.all(np.isfinite(logits))


def test_predict_probabilities_and_purity(tiny_config, rng):
    model = build_model(tiny_config)
    chip = rng.uniform(0, 1, size=(8, 8, 3)).astype(np.float32)
    label, probs = predict(model, chip)
    assert probs.sum() == pytest.approx(1.0, abs=1e-5)
    assert label == int(np.argmax(probs))
    again = predict(model, chip)
    assert again[0] == label
    np.testing.assert_array_equal(again[1], probs)


def test_predict_ties_go_to_lowest_index(make_linear_model):
    model = make_linear_model(weights=np.zeros((192, 2)))
    label, probs = predict(model, np.full((8, 8, 3), 0.5, dtype=np.float32))
    assert label == 0
    np.testing.assert_allclose(probs, [0.5, 0.5])


def test_predict_shape_mismatch(tiny_config):
    with pytest.raises(ShapeError):
        predict(build_model(tiny_config), np.zeros((16, 16, 3), dtype=np.float32))


def test_uniform_logits_loss_is_log_k(make_linear_model):
    model = make_linear_model(class_count=3, weights=np.zeros((192, 3)))
    loss, grad = loss_and_input_grad(model, np.full((8, 8, 3), 0.3, dtype=np.float32), 1)
    assert loss == pytest.approx(math.log(3), rel=1e-6)
    assert grad.shape == (8, 8, 3)


def test_saturated_prediction_has_near_zero_gradient(make_linear_model, rng):
    model = make_linear_model(weights=rng.normal(0, 0.05, size=(192, 2)))
    params = model.params
    params["head.bias"] = np.array([60.0, 0.0], dtype=np.float32)
    model._set_params(params)
    _, grad = loss_and_input_grad(model, rng.uniform(0, 1, size=(8, 8, 3)), 0)
    assert np.abs(grad).max() < 1e-6


def test_label_out_of_range(tiny_config):
    with pytest.raises(LabelError):
        loss_and_input_grad(build_model(tiny_config), np.zeros((8, 8, 3)), 3)


def test_input_gradient_matches_finite_differences(tiny_config, rng):
    model = build_model(tiny_config)
    chip = rng.uniform(0, 1, size=(8, 8, 3))
    _, grad = loss_and_input_grad(model, chip, 2, ad.Precision.VERIFY)
    check = ad.finite_diff_check(lambda x: ad.softmax_cross_entropy(model.logits(x), 2), chip)
    assert check.max_rel_error <= 1e-3
    np.testing.assert_allclose(grad, check.analytic)


def test_step_against_gradient_lowers_loss(tiny_config, rng):
    model = build_model(tiny_config)
    chip = rng.uniform(0.2, 0.8, size=(8, 8, 3))
    loss, grad = loss_and_input_grad(model, chip, 0, ad.Precision.VERIFY)
    lowered, _ = loss_and_input_grad(model, chip - 1e-3 * grad / np.abs(grad).max(), 0, ad.Precision.VERIFY)
    assert lowered < loss


def test_queries_never_touch_parameters(tiny_config, rng):
    model = build_model(tiny_config)
    before = model.params
    chip = rng.uniform(0, 1, size=(8, 8, 3))
    predict(model, chip)
    loss_and_input_grad(model, chip, 1)
    for name, arr in before.items():
        np.testing.assert_array_equal(model.params[name], arr)
        assert not model.params[name].flags.writeable


# -- training --------------------------------------------------------------

def random_dataset(rng, count, size=8, classes=3):
    images = rng.uniform(0, 1, size=(count, size, size, 3)).astype(np.float32)
    return Dataset(images, rng.integers(0, classes, size=count))


def test_zero_learning_rate_changes_nothing(tiny_config, rng):
    model = build_model(tiny_config)
    before = model.params
    log = train(model, random_dataset(rng, 10), epochs=3, lr=0.0, batch=4, seed=0)
    for name, arr in before.items():
        np.testing.assert_array_equal(model.params[name], arr)
    losses = [e.train_loss for e in log.epochs]
    assert losses == pytest.approx([losses[0]] * 3, rel=1e-5)


def test_single_example_is_memorized(rng):
    model = build_model(ModelConfig(input_size=4, class_count=2, conv_filters=(), dense_widths=(), seed=2))
    data = Dataset(rng.uniform(0, 1, size=(1, 4, 4, 3)).astype(np.float32), np.array([1]))
    log = train(model, data, epochs=30, lr=0.5, batch=1, seed=0)
    assert log.epochs[-1].train_loss < 0.05
    assert accuracy(model, data) == 1.0


def test_training_is_reproducible(tiny_config, rng):
    data = random_dataset(rng, 12)
    models = [build_model(tiny_config) for _ in range(2)]
    logs = [train(m, data, epochs=2, lr=0.1, batch=5, seed=9) for m in models]
    assert_same_params(*models)
    assert logs[0].to_dict() == logs[1].to_dict()


def test_training_log_records_validation_accuracy(tiny_config, rng):
    log = train(build_model(tiny_config), random_dataset(rng, 8), epochs=2, lr=0.1, batch=4, seed=0,
                validation=random_dataset(rng, 6))
    assert len(log.epochs) == 2
    assert 0.0 <= log.final_val_accuracy <= 1.0


def test_empty_dataset_is_rejected(tiny_config):
    empty = Dataset.from_sequences([])
    with pytest.raises(DataValidationError):
        train(build_model(tiny_config), empty, epochs=1, lr=0.1, batch=1, seed=0)


def test_dataset_shape_must_match_model(tiny_config, rng):
    with pytest.raises(DataValidationError):
        train(build_model(tiny_config), random_dataset(rng, 4, size=16), epochs=1, lr=0.1, batch=2, seed=0)


def test_dataset_from_sequences_labels_every_frame(make_sequence, rng):
    seqs = [make_sequence([rng.uniform(0, 1, (8, 8, 3)) for _ in range(3)], label=2, scene_id="a"),
            make_sequence([rng.uniform(0, 1, (8, 8, 3)) for _ in range(2)], label=0, scene_id="b")]
    data = Dataset.from_sequences(seqs)
    assert data.images.shape == (5, 8, 8, 3)
    assert data.labels.tolist() == [2, 2, 2, 0, 0]


# -- checkpoints -----------------------------------------------------------

def test_checkpoint_round_trip_is_bit_exact(tiny_config, rng, tmp_path):
    model = build_model(tiny_config)
    train(model, random_dataset(rng, 6), epochs=1, lr=0.1, batch=3, seed=0)
    path = tmp_path / "model.ckpt"
    save_checkpoint(model, path)
    loaded = load_checkpoint(path)
    assert loaded.config == model.config
    assert_same_params(loaded, model)
    chips = rng.uniform(0, 1, size=(4, 8, 8, 3)).astype(np.float32)
    np.testing.assert_array_equal(loaded.predict_labels(chips), model.predict_labels(chips))


def test_header_count_matches_blob(tiny_config, tmp_path):
    path = tmp_path / "model.ckpt"
    save_checkpoint(build_model(tiny_config), path)
    ckpt = read_checkpoint(path)
    assert ckpt.header["parameter_count"] == len(ckpt.blob) // 4
    assert ckpt.header["format_version"] == CHECKPOINT_VERSION


def test_truncated_checkpoint_is_refused(tiny_config, tmp_path):
    path = tmp_path / "model.ckpt"
    save_checkpoint(build_model(tiny_config), path)
    path.write_bytes(path.read_bytes()[:-4])
    with pytest.raises(CheckpointError):
        load_checkpoint(path)


def test_version_mismatch_is_refused(tiny_config, tmp_path):
    path = tmp_path / "model.ckpt"
    save_checkpoint(build_model(tiny_config), path)
    head, _, blob = path.read_bytes().partition(b"\n\n")
    header = json.loads(head)
    header["format_version"] = CHECKPOINT_VERSION + 1
    path.write_bytes(json.dumps(header).encode() + b"\n\n" + blob)
    with pytest.raises(CheckpointError):
        load_checkpoint(path)


def _rewrite_header(path, edit):
    head, _, blob = path.read_bytes().partition(b"\n\n")
    path.write_bytes(json.dumps(edit(json.loads(head))).encode() + b"\n\n" + blob)


@pytest.mark.parametrize("edit", [
    lambda h: [h],
    lambda h: {k: v for k, v in h.items() if k != "layers"},
    lambda h: {k: v for k, v in h.items() if k != "config"},
    lambda h: {**h, "layers": [{"name": "conv0.kernel"}]},
    lambda h: {**h, "parameter_count": "many"},
], ids=["not-an-object", "no-layers", "no-config", "layer-without-shape", "bad-count"])
def test_malformed_header_is_refused(tiny_config, tmp_path, edit):
    path = tmp_path / "model.ckpt"
    save_checkpoint(build_model(tiny_config), path)
    _rewrite_header(path, edit)
    with pytest.raises(CheckpointError):
        load_checkpoint(path)


def test_missing_checkpoint(tmp_path):
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "absent.ckpt")


@pytest.mark.slow
def test_default_benchmark_reaches_accuracy_gate():
    from scene_synth import SynthConfig, generate_scene, plan_dataset

    config = SynthConfig()
    manifest = plan_dataset(config)
    seqs = {split: [generate_scene(e.class_index, e.seed, config, e.scene_id) for e in manifest.split(split)]
            for split in ("train", "val")}
    model = build_model(ModelConfig())
    log = train(model, Dataset.from_sequences(seqs["train"]), epochs=20, lr=0.05, batch=32, seed=0,
                validation=Dataset.from_sequences(seqs["val"]))
    assert log.final_val_accuracy >= 0.90
