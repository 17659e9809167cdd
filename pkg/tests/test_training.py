"""Trainer tests: optimizer arithmetic, schedule, augmentation,
standardisation, finite-difference gradient checks, and small end-to-end
training runs."""

import numpy as np
import pytest

from gradcheck import check_graph_gradients
from spiking_resnet import backprop
from spiking_resnet.datasets import Dataset
from spiking_resnet.errors import TrainingDivergedError
from spiking_resnet.graph import LayerKind, LayerNode, ModelGraph, build_resnet
from spiking_resnet.training import (
    FULL_SCHEDULE,
    OptimizerState,
    TrainConfig,
    apply_standardization,
    augment,
    evaluate_ann,
    lr_at_epoch,
    sgd_momentum_step,
    standardize,
    train,
)


class TestSgdMomentum:
    def test_plain_sgd_reduction(self):
        p = {"w": np.zeros(1, dtype=np.float32)}
        g = {"w": np.ones(1, dtype=np.float32)}
        sgd_momentum_step(p, g, OptimizerState(), lr=0.1, momentum=0.0)
        assert p["w"][0] == pytest.approx(-0.1)

    def test_zero_gradient_keeps_params(self):
        p = {"w": np.full(3, 2.5, dtype=np.float32)}
        g = {"w": np.zeros(3, dtype=np.float32)}
        sgd_momentum_step(p, g, OptimizerState(), lr=0.5, momentum=0.9)
        np.testing.assert_array_equal(p["w"], np.full(3, 2.5, dtype=np.float32))

    def test_two_steps_hand_recursion(self):
        p = {"w": np.zeros(1, dtype=np.float32)}
        g = {"w": np.ones(1, dtype=np.float32)}
        state = OptimizerState()
        sgd_momentum_step(p, g, state, lr=1.0, momentum=0.9)
        sgd_momentum_step(p, g, state, lr=1.0, momentum=0.9)
        assert p["w"][0] == pytest.approx(-2.9)


class TestLrSchedule:
    def test_paper_shaped_schedule(self):
        cfg = TrainConfig(**FULL_SCHEDULE)
        assert lr_at_epoch(cfg, 1) == pytest.approx(0.01)
        assert lr_at_epoch(cfg, 3) == pytest.approx(0.1)
        assert lr_at_epoch(cfg, 83) == pytest.approx(0.1)
        assert lr_at_epoch(cfg, 84) == pytest.approx(0.01)
        assert lr_at_epoch(cfg, 95) == pytest.approx(0.001)

    def test_epoch_out_of_range(self):
        cfg = TrainConfig()
        with pytest.raises(ValueError):
            lr_at_epoch(cfg, cfg.total_epochs)
        with pytest.raises(ValueError):
            lr_at_epoch(cfg, -1)

    def test_invalid_config_rejected(self):
        with pytest.raises(ValueError):
            TrainConfig(momentum=1.0)
        with pytest.raises(ValueError):
            TrainConfig(decay_epochs=(25, 20))
        with pytest.raises(ValueError):
            TrainConfig(decay_epochs=(40,), total_epochs=30)


class _FixedRng:
    """Deterministic stand-in for a Generator: scripted draws."""

    def __init__(self, ints, floats):
        self._ints = list(ints)
        self._floats = list(floats)

    def integers(self, low, high):
        return self._ints.pop(0)

    def random(self):
        return self._floats.pop(0)


class TestAugment:
    def test_centre_crop_is_identity(self):
        img = np.random.default_rng(0).normal(size=(3, 8, 8)).astype(np.float32)
        out = augment(img, _FixedRng([4, 4], [0.9]), pad=4)
        np.testing.assert_array_equal(out, img)

    def test_double_flip_is_identity(self):
        img = np.random.default_rng(1).normal(size=(1, 6, 6)).astype(np.float32)
        once = augment(img, _FixedRng([4, 4], [0.0]), pad=4)
        twice = augment(once, _FixedRng([4, 4], [0.0]), pad=4)
        np.testing.assert_array_equal(twice, img)

    def test_flip_frequency(self):
        rng = np.random.default_rng(123)
        img = np.zeros((1, 4, 4), dtype=np.float32)
        img[0, 0, 0] = 1.0
        flips = 0
        for _ in range(10_000):
            out = augment(img, rng, pad=0)
            flips += int(out[0, 0, -1] == 1.0)
        assert 0.47 <= flips / 10_000 <= 0.53

    def test_offsets_cover_grid(self):
        rng = np.random.default_rng(5)
        img = np.arange(1, 37, dtype=np.float32).reshape(1, 6, 6)
        seen = set()
        for _ in range(2000):
            out = augment(img, rng, pad=1, flip_prob=0.0)
            seen.add(out.tobytes())
        assert len(seen) == 9  # all (2*1+1)^2 offsets reached


class TestStandardize:
    def _dataset(self, images, split="train"):
        return Dataset(images=images.astype(np.float32),
                       labels=np.zeros(images.shape[0], dtype=np.int64),
                       num_classes=10, split=split)

    def test_constant_dataset_maps_to_zero(self):
        ds = self._dataset(np.full((5, 1, 2, 2), 3.7))
        out, stats = standardize(ds)
        np.testing.assert_allclose(out.images, 0.0, atol=1e-4)
        assert stats.source_split == "train"

    def test_two_point_dataset(self):
        images = np.stack([np.zeros((1, 2, 2)), np.full((1, 2, 2), 2.0)])
        out, _ = standardize(self._dataset(images))
        np.testing.assert_allclose(out.images[0], -1.0, rtol=1e-5)
        np.testing.assert_allclose(out.images[1], 1.0, rtol=1e-5)

    def test_idempotent_up_to_eps(self):
        rng = np.random.default_rng(0)
        ds = self._dataset(rng.uniform(size=(50, 3, 4, 4)))
        once, _ = standardize(ds)
        twice, stats2 = standardize(once)
        np.testing.assert_allclose(stats2.mean, 0.0, atol=1e-5)
        np.testing.assert_allclose(stats2.std, 1.0, atol=1e-4)
        np.testing.assert_allclose(twice.images, once.images, atol=1e-3)

    def test_same_stats_applied_to_test_split(self):
        rng = np.random.default_rng(1)
        train_ds = self._dataset(rng.uniform(size=(20, 1, 2, 2)))
        test_ds = self._dataset(rng.uniform(size=(10, 1, 2, 2)), split="test")
        _, stats = standardize(train_ds)
        out = apply_standardization(test_ds, stats)
        assert out.stats is stats
        assert out.stats.source_split == "train"
        expected = (test_ds.images - stats.mean) / stats.std
        np.testing.assert_allclose(out.images, expected.astype(np.float32))


class TestGradients:
    def test_small_conv_bn_fc_graph(self):
        g = build_resnet(8, (2, 3, 4), num_classes=3, input_shape=(1, 8, 8), seed=0)
        rng = np.random.default_rng(0)
        x = rng.normal(size=(4, 1, 8, 8)).astype(np.float32)
        y = rng.integers(0, 3, size=4)
        check_graph_gradients(g, x, y, tol=1e-3, sample_per_tensor=8)

    def test_projection_shortcut_gradients(self):
        g = build_resnet(8, (2, 3, 4), num_classes=3, input_shape=(1, 8, 8),
                         projection_shortcuts=True, seed=1)
        rng = np.random.default_rng(1)
        x = rng.normal(size=(3, 1, 8, 8)).astype(np.float32)
        y = rng.integers(0, 3, size=3)
        check_graph_gradients(g, x, y, tol=1e-3, sample_per_tensor=6)

    def test_frozen_shortcuts_get_no_grads(self):
        g = build_resnet(8, (2, 3, 4), num_classes=3, input_shape=(1, 8, 8))
        rng = np.random.default_rng(2)
        x = rng.normal(size=(2, 1, 8, 8)).astype(np.float32)
        y = rng.integers(0, 3, size=2)
        _, _, grads, _ = backprop.loss_and_grads(g, x, y)
        frozen = [n.id for n in g.nodes.values() if not n.trainable]
        assert frozen and all(nid not in grads for nid in frozen)


class TestTrainLoop:
    def _toy_linear_dataset(self, n=200, seed=0):
        rng = np.random.default_rng(seed)
        labels = rng.integers(0, 2, size=n)
        centers = np.array([[-1.5, -1.5], [1.5, 1.5]], dtype=np.float32)
        images = (centers[labels] + rng.normal(0, 0.3, size=(n, 2))).astype(np.float32)
        return Dataset(images=images.reshape(n, 2, 1, 1), labels=labels.astype(np.int64),
                       num_classes=2)

    def _fc_graph(self, seed=0):
        rng = np.random.default_rng(seed)
        nodes = {
            0: LayerNode(0, LayerKind.INPUT, attrs={"shape": [2, 1, 1]}),
            1: LayerNode(
                1, LayerKind.FULLY_CONNECTED,
                params={"weight": rng.normal(0, 0.1, size=(2, 2)).astype(np.float32),
                        "bias": np.zeros(2, dtype=np.float32)},
                inputs=[0],
            ),
        }
        return ModelGraph(nodes, meta={"input_shape": [2, 1, 1], "num_classes": 2})

    def test_separable_toy_reaches_99_percent(self):
        ds = self._toy_linear_dataset()
        g = self._fc_graph()
        cfg = TrainConfig(total_epochs=20, warmup_epochs=2, decay_epochs=(15,),
                          warmup_lr=0.05, main_lr=0.5, batch_size=32, augment=False)
        trained, history = train(g, ds, cfg)
        assert history[-1]["train_acc"] >= 0.99

    def test_zero_epochs_keeps_weights(self):
        ds = self._toy_linear_dataset()
        g = self._fc_graph()
        cfg = TrainConfig(total_epochs=0, decay_epochs=(), augment=False)
        trained, history = train(g, ds, cfg)
        assert history == []
        np.testing.assert_array_equal(trained.nodes[1].params["weight"],
                                      g.nodes[1].params["weight"])

    def test_same_seed_is_bit_identical(self):
        ds = self._toy_linear_dataset()
        g = self._fc_graph()
        cfg = TrainConfig(total_epochs=3, warmup_epochs=1, decay_epochs=(2,),
                          batch_size=16, augment=False, seed=7)
        t1, h1 = train(g, ds, cfg)
        t2, h2 = train(g, ds, cfg)
        np.testing.assert_array_equal(t1.nodes[1].params["weight"],
                                      t2.nodes[1].params["weight"])
        assert h1 == h2

    def test_loss_decreases_first_steps(self):
        rng = np.random.default_rng(0)
        g = build_resnet(8, (2, 3, 4), num_classes=3, input_shape=(1, 8, 8), seed=3)
        x = rng.normal(size=(16, 1, 8, 8)).astype(np.float32)
        y = rng.integers(0, 3, size=16)
        from spiking_resnet.training import _trainable_params

        state = OptimizerState()
        losses = []
        for _ in range(5):
            loss, _, grads, _ = backprop.loss_and_grads(g, x, y)
            losses.append(loss)
            flat = {(n, p): a for n, pg in grads.items() for p, a in pg.items()}
            params = {k: v for k, v in _trainable_params(g).items() if k in flat}
            sgd_momentum_step(params, {k: flat[k] for k in params}, state,
                              lr=1e-3, momentum=0.0)
        assert losses[-1] < losses[0]

    @pytest.mark.filterwarnings("ignore:overflow:RuntimeWarning")
    @pytest.mark.filterwarnings("ignore:invalid value:RuntimeWarning")
    def test_divergence_aborts_with_location(self):
        ds = self._toy_linear_dataset()
        ds.images *= np.float32(1e39)  # overflows float32 to inf
        g = self._fc_graph()
        cfg = TrainConfig(total_epochs=2, warmup_epochs=1, decay_epochs=(),
                          augment=False)
        with pytest.raises(TrainingDivergedError, match="epoch 0"):
            train(g, ds, cfg)

    def test_bn_running_stats_converge(self):
        g = build_resnet(8, (2, 3, 4), num_classes=3, input_shape=(1, 8, 8), seed=4)
        rng = np.random.default_rng(5)
        x = rng.normal(1.0, 2.0, size=(64, 1, 8, 8)).astype(np.float32)
        bn_id = next(i for i, n in g.nodes.items() if n.kind == LayerKind.BATCHNORM)
        from spiking_resnet.training import BN_RUNNING_MOMENTUM

        for _ in range(100):
            _, _, _, bn_stats = backprop.forward_train(g, x)
            bmean, bvar = bn_stats[bn_id]
            node = g.nodes[bn_id]
            m = BN_RUNNING_MOMENTUM
            node.params["mean"] = ((1 - m) * node.params["mean"] + m * bmean).astype(np.float32)
            node.params["var"] = ((1 - m) * node.params["var"] + m * bvar).astype(np.float32)
        np.testing.assert_allclose(g.nodes[bn_id].params["mean"], bmean, rtol=1e-3, atol=1e-4)
        np.testing.assert_allclose(g.nodes[bn_id].params["var"], bvar, rtol=1e-3, atol=1e-4)


class TestEvaluate:
    def test_accuracy_on_known_predictions(self):
        g = TestTrainLoop()._fc_graph(seed=1)
        ds = TestTrainLoop()._toy_linear_dataset(n=50, seed=2)
        acc = evaluate_ann(g, ds)
        logits = g.forward(ds.images)
        expected = float((logits.argmax(axis=1) == ds.labels).mean())
        assert acc == pytest.approx(expected)
