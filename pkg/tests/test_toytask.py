"""Scene generator and toy model tests."""

import numpy as np
import pytest

from setmatch.autodiff import Tape, backward
from setmatch.seeding import substream
from setmatch.setloss import GroundTruthSet, LossConfig, hungarian_loss_decomposed
from setmatch.toytask import (
    ModelParams,
    SceneConfig,
    attach_params,
    decode_features,
    format_scene_record,
    generate_scene,
    generate_scenes,
    init_params,
    model_forward,
    oracle_params,
    param_gradients,
    parse_scene_record,
)

SMALL = SceneConfig(max_objects=2, num_slots=4, num_classes=3, feature_dim=16, seed=0)


class TestGenerator:
    def test_single_object_config(self):
        cfg = SceneConfig(max_objects=1, num_slots=2, num_classes=2, feature_dim=6)
        scene = generate_scene(cfg, substream(0, "t"))
        assert scene.truth.m == 1
        block = scene.features[: cfg.block_size]
        assert np.sum(block[:2] == 1.0) == 1
        assert np.all(scene.features[cfg.block_size :] == 0.0)

    def test_deterministic_given_seed(self):
        a = generate_scenes(SMALL, 20, substream(5, "data"))
        b = generate_scenes(SMALL, 20, substream(5, "data"))
        for x, y in zip(a, b):
            np.testing.assert_array_equal(x.features, y.features)
            np.testing.assert_array_equal(x.truth.boxes, y.truth.boxes)
            np.testing.assert_array_equal(x.truth.classes, y.truth.classes)

    def test_class_frequencies_uniform(self):
        rng = substream(0, "freq")
        counts = np.zeros(SMALL.num_classes)
        total = 0
        for scene in generate_scenes(SMALL, 10000, rng):
            for c in scene.truth.classes:
                counts[c] += 1
                total += 1
        p = 1.0 / SMALL.num_classes
        sigma = np.sqrt(p * (1 - p) * total)
        assert np.all(np.abs(counts - total * p) <= 3 * sigma)

    def test_objects_sorted_by_center_x(self):
        for i in range(50):
            scene = generate_scene(SMALL, substream(i, "sort"))
            cx = scene.truth.boxes[:, 0]
            assert np.all(np.diff(cx) >= 0)

    def test_decode_round_trip(self):
        rng = substream(1, "roundtrip")
        for _ in range(1000):
            scene = generate_scene(SMALL, rng)
            decoded = decode_features(SMALL, scene.features)
            np.testing.assert_array_equal(decoded.classes, scene.truth.classes)
            np.testing.assert_allclose(decoded.boxes, scene.truth.boxes, atol=1e-12)

    def test_capacity_validated(self):
        with pytest.raises(ValueError, match="feature_dim"):
            SceneConfig(max_objects=4, num_slots=8, num_classes=4, feature_dim=16)

    def test_bad_size_range(self):
        with pytest.raises(ValueError, match="size_range"):
            SceneConfig(size_range=(0.0, 0.5))


class TestRecordFormat:
    def test_round_trip_at_four_decimals(self):
        scene = generate_scene(SMALL, substream(3, "record"))
        line = format_scene_record(scene.truth)
        parsed = parse_scene_record(line)
        np.testing.assert_array_equal(parsed.classes, scene.truth.classes)
        np.testing.assert_allclose(parsed.boxes, scene.truth.boxes, atol=5e-5)

    def test_announced_count_checked(self):
        with pytest.raises(ValueError, match="announces"):
            parse_scene_record("2; 0 0.5 0.5 0.2 0.2")


class TestModel:
    def test_zero_weights_give_uniform_heads(self):
        params = init_params(SMALL, hidden=32, rng=substream(0, "init"))
        zero = ModelParams(**{k: np.zeros_like(v) for k, v in params.as_arrays().items()})
        scene = generate_scene(SMALL, substream(1, "z"))
        preds = model_forward(zero, scene.features)
        k1 = SMALL.num_classes + 1
        np.testing.assert_allclose(preds.class_logprobs.values, -np.log(k1), atol=1e-12)
        np.testing.assert_allclose(preds.boxes.values, 0.5, atol=1e-12)

    def test_forward_deterministic(self):
        params = init_params(SMALL, hidden=32, rng=substream(2, "init"))
        scene = generate_scene(SMALL, substream(2, "d"))
        a = model_forward(params, scene.features)
        b = model_forward(params, scene.features)
        np.testing.assert_array_equal(a.class_logprobs.values, b.class_logprobs.values)
        np.testing.assert_array_equal(a.boxes.values, b.boxes.values)

    def test_gradients_generically_nonzero(self):
        params = init_params(SMALL, hidden=32, rng=substream(3, "init"))
        scene = generate_scene(SMALL, substream(3, "g"))
        tape = Tape()
        attached = attach_params(params, tape)
        preds = model_forward(attached, scene.features)
        _, bd = hungarian_loss_decomposed(preds, scene.truth, LossConfig())
        grads = param_gradients(attached, backward(bd.total))
        for name, g in grads.items():
            assert np.any(g != 0.0), name

    def test_feature_padding_invariance(self):
        # widening the feature vector with zeros, and the weight matrix with
        # zero columns, leaves every prediction unchanged
        params = init_params(SMALL, hidden=32, rng=substream(4, "init"))
        scene = generate_scene(SMALL, substream(4, "p"))
        wide = SceneConfig(
            max_objects=SMALL.max_objects,
            num_slots=SMALL.num_slots,
            num_classes=SMALL.num_classes,
            feature_dim=SMALL.feature_dim * 2,
        )
        arrays = params.as_arrays()
        arrays["w1"] = np.concatenate(
            [params.w1, np.zeros((params.w1.shape[0], SMALL.feature_dim))], axis=1
        )
        wide_params = ModelParams(**arrays)
        wide_features = np.concatenate([scene.features, np.zeros(SMALL.feature_dim)])
        base = model_forward(params, scene.features)
        widened = model_forward(wide_params, wide_features)
        np.testing.assert_array_equal(base.class_logprobs.values, widened.class_logprobs.values)
        np.testing.assert_array_equal(base.boxes.values, widened.boxes.values)

    def test_oracle_params_copy_blocks(self):
        cfg = SceneConfig()
        params = oracle_params(cfg)
        rng = substream(5, "oracle")
        for _ in range(20):
            scene = generate_scene(cfg, rng)
            preds = model_forward(params, scene.features)
            m = scene.truth.m
            np.testing.assert_allclose(
                preds.boxes.values[:m], scene.truth.boxes, atol=1e-4
            )
            assert np.array_equal(
                np.argmax(preds.class_logprobs.values[:m, : cfg.num_classes], axis=1),
                scene.truth.classes,
            )
