#!/usr/bin/env python3
# -*- coding: utf-8 -*-
"""
分类头测试：前向、梯度、动量 SGD、三种训练方式
"""

import sys
import unittest
from pathlib import Path

import numpy as np

sys.path.insert(0, str(Path(__file__).parent.parent))

from tailcal.config.schema import BalancedSamplerConfig, EvalConfig, TrainSchedule, WorldConfig
from tailcal.core.evaluation import ap_per_category
from tailcal.core.heads import (
    Head,
    HeadGradient,
    MomentumState,
    ProposalBank,
    TrainingDivergedError,
    cross_entropy,
    epoch_order,
    forward,
    image_repeat_factors,
    init_head,
    labels_to_columns,
    repeat_factors,
    sample_balanced_batch,
    sample_class_set,
    sgd_step,
    train_balanced,
    train_cascade,
    train_repeat_sampled,
    train_standard,
    training_loss,
)
from tailcal.core.twostage import BACKGROUND, decode_detections
from tailcal.core.world import (
    Category,
    GtObject,
    SceneImage,
    World,
    assign_bin,
    generate_proposal_set,
    generate_world,
)
from tailcal.utils import derive_rng

SHORT_SCHEDULE = TrainSchedule(total_epochs=2, lr_stages=[(0, 0.05), (1, 0.005)], minibatch_size=8)


def small_world(**overrides):
    params = dict(num_categories=8, feature_dim=6, zipf_exponent=1.0, total_instances=160,
                  objects_per_image=(1, 3), background_per_image=2, seed=11)
    params.update(overrides)
    return generate_world(WorldConfig(**params))


def separable_single_class_world(num_images=100, num_val=20):
    """单类别、无噪声、背景框远小于真值框的手工世界，标签与特征都线性可分"""
    cfg = WorldConfig(num_categories=1, feature_dim=4, total_instances=num_images, objects_per_image=(1, 1),
                      proposal_recall=1.0, box_jitter=0.0, background_per_image=3, feature_noise=0.0,
                      background_scale=0.1, box_size=(0.05, 0.1))
    box = (0.6, 0.6, 0.95, 0.95)
    images = [SceneImage(i, (GtObject(box, 0),)) for i in range(num_images + num_val)]
    return World(
        categories=(Category(id=0, train_count=num_images, bin=assign_bin(num_images), val_count=num_val),),
        prototypes=np.array([[3.0, 0.0, 0.0, 0.0]]),
        train_images=tuple(images[:num_images]),
        val_images=tuple(images[num_images:]),
        config=cfg,
    )


def validation_ap(world, head, proposals):
    cfg = EvalConfig(max_detections=100000)
    dets = decode_detections(proposals, forward(head, proposals.features), 0.0, 0.5, 100000)
    return float(np.mean(list(ap_per_category(dets, world.val_images, cfg).values())))


def random_head(rng, classes=3, dim=4):
    return Head(
        weights=rng.standard_normal((classes + 1, dim)),
        biases=rng.standard_normal(classes + 1),
        class_order=tuple(range(classes)),
    )


class TestForward(unittest.TestCase):
    """测试前向传播"""

    def test_zero_head_is_uniform(self):
        head = Head(np.zeros((5, 3)), np.zeros(5), (0, 1, 2, 3))
        scores = forward(head, np.random.default_rng(0).standard_normal((6, 3))).scores
        np.testing.assert_allclose(scores, 0.2)

    def test_rows_sum_to_one(self):
        rng = np.random.default_rng(1)
        head = random_head(rng, classes=7, dim=5)
        scores = forward(head, rng.standard_normal((50, 5)) * 30).scores
        np.testing.assert_allclose(scores.sum(axis=1), 1.0, atol=1e-12)
        self.assertTrue(np.all(scores >= 0.0))

    def test_matches_reference_softmax(self):
        rng = np.random.default_rng(2)
        head = random_head(rng)
        features = rng.standard_normal((10, 4))
        logits = features @ head.weights.T + head.biases
        expected = np.exp(logits) / np.exp(logits).sum(axis=1, keepdims=True)
        np.testing.assert_allclose(forward(head, features).scores, expected, rtol=1e-12)

    def test_bias_shift_invariance(self):
        rng = np.random.default_rng(3)
        head = random_head(rng)
        shifted = Head(head.weights, head.biases + 100.0, head.class_order)
        features = rng.standard_normal((8, 4))
        np.testing.assert_allclose(forward(head, features).scores, forward(shifted, features).scores, atol=1e-12)

    def test_dimension_mismatch(self):
        head = random_head(np.random.default_rng(4))
        with self.assertRaises(ValueError):
            forward(head, np.zeros((2, 5)))

    def test_invalid_head_shape(self):
        with self.assertRaises(ValueError):
            Head(np.zeros((3, 2)), np.zeros(3), (0, 1, 2))
        with self.assertRaises(ValueError):
            Head(np.full((2, 2), np.nan), np.zeros(2), (0,))


class TestGradient(unittest.TestCase):
    """解析梯度与中心差分对比"""

    def test_finite_differences(self):
        rng = np.random.default_rng(5)
        eps = 1e-6
        for _ in range(50):
            head = random_head(rng)
            features = rng.standard_normal((6, 4))
            targets = rng.integers(0, 4, size=6)
            _, grad = cross_entropy(head, features, targets)

            numeric = np.zeros_like(head.weights)
            for i in np.ndindex(head.weights.shape):
                plus, minus = head.weights.copy(), head.weights.copy()
                plus[i] += eps
                minus[i] -= eps
                f_plus, _ = cross_entropy(Head(plus, head.biases, head.class_order), features, targets)
                f_minus, _ = cross_entropy(Head(minus, head.biases, head.class_order), features, targets)
                numeric[i] = (f_plus - f_minus) / (2 * eps)

            numeric_b = np.zeros_like(head.biases)
            for j in range(head.biases.size):
                plus, minus = head.biases.copy(), head.biases.copy()
                plus[j] += eps
                minus[j] -= eps
                f_plus, _ = cross_entropy(Head(head.weights, plus, head.class_order), features, targets)
                f_minus, _ = cross_entropy(Head(head.weights, minus, head.class_order), features, targets)
                numeric_b[j] = (f_plus - f_minus) / (2 * eps)

            for analytic, approx in ((grad.weights, numeric), (grad.biases, numeric_b)):
                error = np.abs(analytic - approx) / np.maximum(1e-8, np.abs(analytic) + np.abs(approx))
                self.assertLess(float(error.max()), 1e-5)

    def test_empty_batch(self):
        head = random_head(np.random.default_rng(6))
        loss, grad = cross_entropy(head, np.zeros((0, 4)), np.zeros(0, dtype=int))
        self.assertEqual(loss, 0.0)
        self.assertFalse(np.any(grad.weights))


class TestSgdStep(unittest.TestCase):
    """测试动量 SGD 单步"""

    def setUp(self):
        self.head = Head(np.zeros((3, 2)), np.zeros(3), (0, 1))
        self.ones = HeadGradient(np.ones((3, 2)), np.ones(3))

    def test_plain_step(self):
        updated, _ = sgd_step(self.head, self.ones, 0.1, 0.0, MomentumState.zeros_like(self.head))
        np.testing.assert_allclose(updated.weights, -0.1)
        np.testing.assert_allclose(updated.biases, -0.1)

    def test_zero_lr_is_identity(self):
        updated, _ = sgd_step(self.head, self.ones, 0.0, 0.9, MomentumState.zeros_like(self.head))
        np.testing.assert_array_equal(updated.weights, self.head.weights)

    def test_momentum_accumulates(self):
        lr, grad = 0.1, HeadGradient(np.full((3, 2), 0.5), np.full(3, 0.5))
        head, velocity = self.head, MomentumState.zeros_like(self.head)
        for _ in range(2):
            head, velocity = sgd_step(head, grad, lr, 0.9, velocity)
        np.testing.assert_allclose(head.weights, -lr * 0.5 * 2.9, rtol=1e-12)

    def test_input_not_mutated(self):
        velocity = MomentumState.zeros_like(self.head)
        sgd_step(self.head, self.ones, 0.1, 0.9, velocity)
        self.assertFalse(np.any(self.head.weights))
        self.assertFalse(np.any(velocity.weights))

    def test_non_finite_gradient(self):
        bad = HeadGradient(np.full((3, 2), np.inf), np.zeros(3))
        with self.assertRaises(TrainingDivergedError):
            sgd_step(self.head, bad, 0.1, 0.9, MomentumState.zeros_like(self.head))


class TestStandardTraining(unittest.TestCase):
    """测试标准训练"""

    def test_same_seed_same_head(self):
        world = small_world()
        a = train_standard(world, SHORT_SCHEDULE, derive_rng(0, "train"))
        b = train_standard(world, SHORT_SCHEDULE, derive_rng(0, "train"))
        np.testing.assert_array_equal(a.weights, b.weights)
        np.testing.assert_array_equal(a.biases, b.biases)

    def test_different_seed_differs(self):
        world = small_world()
        a = train_standard(world, SHORT_SCHEDULE, derive_rng(0, "train"))
        b = train_standard(world, SHORT_SCHEDULE, derive_rng(1, "train"))
        self.assertFalse(np.array_equal(a.weights, b.weights))

    def test_training_reduces_loss(self):
        world = small_world(feature_noise=0.0, box_jitter=0.0, proposal_recall=1.0)
        bank = ProposalBank.build(world, derive_rng(0, "bank"))
        initial = init_head(world.class_order, world.feature_dim, derive_rng(0, "init"))
        head = train_standard(world, SHORT_SCHEDULE, derive_rng(0, "train"), bank=bank)
        self.assertLess(training_loss(head, bank.all()), training_loss(initial, bank.all()))

    def test_loss_non_increasing_per_epoch(self):
        # 训练 k 个 epoch 的结果就是更长训练的前 k 个 epoch
        world = small_world(feature_noise=0.0, box_jitter=0.0, proposal_recall=1.0)
        bank = ProposalBank.build(world, derive_rng(0, "bank"))
        losses = [training_loss(init_head(world.class_order, world.feature_dim, derive_rng(0, "train")), bank.all())]
        for epochs in range(1, 7):
            schedule = TrainSchedule(total_epochs=epochs, lr_stages=[(0, 0.01)], minibatch_size=8)
            head = train_standard(world, schedule, derive_rng(0, "train"), bank=bank)
            losses.append(training_loss(head, bank.all()))
        for before, after in zip(losses, losses[1:]):
            self.assertLessEqual(after, before + 1e-12, losses)

    def test_separable_single_class_accuracy(self):
        world = separable_single_class_world()
        bank = ProposalBank.build(world, derive_rng(0, "bank"))
        schedule = TrainSchedule(total_epochs=10, lr_stages=[(0, 0.05)], minibatch_size=4)
        head = train_standard(world, schedule, derive_rng(0, "train"), bank=bank)
        batch = bank.all()
        predicted = forward(head, batch.features).scores.argmax(axis=1)
        accuracy = float(np.mean(predicted == labels_to_columns(head, batch.labels)))
        self.assertGreater(accuracy, 0.99)

    def test_class_order_follows_world(self):
        world = small_world()
        head = train_standard(world, SHORT_SCHEDULE, derive_rng(0, "train"))
        self.assertEqual(head.class_order, world.class_order)
        self.assertEqual(head.num_classes, world.num_categories + 1)


class TestBalancedSampling(unittest.TestCase):
    """测试类别均衡采样与重训练"""

    def test_labels_within_sampled_classes(self):
        world = small_world()
        rng = derive_rng(0, "balanced")
        cfg = BalancedSamplerConfig(classes_per_step=3)
        for _ in range(30):
            batch = sample_balanced_batch(world, cfg, rng)
            self.assertEqual(len(batch.sampled_classes), 3)
            allowed = set(batch.sampled_classes) | {BACKGROUND}
            self.assertTrue(set(batch.labels.tolist()) <= allowed)
            # 每张采样图像至少贡献它所含采样类别的真值框
            self.assertTrue(np.count_nonzero(batch.labels != BACKGROUND) >= 3)

    def test_background_excluded_when_disabled(self):
        world = small_world()
        rng = derive_rng(0, "balanced")
        cfg = BalancedSamplerConfig(classes_per_step=4, include_background=False)
        for _ in range(20):
            batch = sample_balanced_batch(world, cfg, rng)
            self.assertNotIn(BACKGROUND, batch.labels.tolist())

    def test_more_classes_than_exist(self):
        world = small_world()
        batch = sample_balanced_batch(world, BalancedSamplerConfig(classes_per_step=50), derive_rng(0, "all"))
        self.assertEqual(batch.sampled_classes, world.class_order)

    def test_class_frequency(self):
        rng = np.random.default_rng(7)
        num_categories, draws = 40, 10000
        hits = np.zeros(num_categories)
        for _ in range(draws):
            chosen = sample_class_set(num_categories, 16, rng)
            self.assertEqual(len(set(chosen.tolist())), 16)
            hits[chosen] += 1
        np.testing.assert_allclose(hits / draws, 16 / num_categories, atol=0.02)

    def test_same_seed_same_head(self):
        world = small_world()
        cfg = BalancedSamplerConfig(classes_per_step=4)
        a = train_balanced(world, None, cfg, SHORT_SCHEDULE, derive_rng(0, "rhead"))
        b = train_balanced(world, None, cfg, SHORT_SCHEDULE, derive_rng(0, "rhead"))
        np.testing.assert_array_equal(a.weights, b.weights)

    def test_mismatched_base_rejected(self):
        world = small_world()
        base = init_head((0, 1), world.feature_dim, np.random.default_rng(0))
        with self.assertRaises(ValueError):
            train_balanced(world, base, BalancedSamplerConfig(), SHORT_SCHEDULE, derive_rng(0, "rhead"))


class TestBalancedWorld(unittest.TestCase):
    """类别数均衡的世界上，均衡采样与标准训练的效果相当"""

    def test_balanced_matches_standard(self):
        world = generate_world(WorldConfig(num_categories=8, feature_dim=8, zipf_exponent=0.0, total_instances=800,
                                           objects_per_image=(1, 4), feature_noise=2.0, seed=21))
        self.assertEqual(len({c.train_count for c in world.categories}), 1)
        schedule = TrainSchedule(total_epochs=6, lr_stages=[(0, 0.05), (4, 0.005)], minibatch_size=8)
        standard = train_standard(world, schedule, derive_rng(0, "train"))
        balanced = train_balanced(world, None, BalancedSamplerConfig(classes_per_step=4), schedule,
                                  derive_rng(0, "rhead"))
        proposals = generate_proposal_set(world.val_images, world, derive_rng(0, "val-proposals"))
        ap_standard = validation_ap(world, standard, proposals)
        ap_balanced = validation_ap(world, balanced, proposals)
        self.assertGreater(ap_standard, 0.0)
        self.assertLessEqual(abs(ap_balanced - ap_standard), 0.1 * max(ap_balanced, ap_standard))


class TestRepeatFactors(unittest.TestCase):
    """测试重复因子采样"""

    def test_frequent_class_not_repeated(self):
        np.testing.assert_allclose(repeat_factors([900, 100], 0.1), [1.0, 1.0])

    def test_rare_class_factor(self):
        # f = t / 100 -> r = 10
        factors = repeat_factors([99999, 1], 0.001)
        self.assertAlmostEqual(factors[1], np.sqrt(0.001 / 1e-5), places=9)
        self.assertAlmostEqual(factors[1], 10.0, places=9)
        self.assertEqual(factors[0], 1.0)

    def test_sqrt_ten(self):
        factors = repeat_factors([9999, 1], 0.001)
        self.assertAlmostEqual(factors[1], np.sqrt(10.0), places=9)

    def test_invalid_inputs(self):
        with self.assertRaises(ValueError):
            repeat_factors([10, 0], 0.001)
        with self.assertRaises(ValueError):
            repeat_factors([10, 5], 1.5)

    def test_image_factor_is_max_over_objects(self):
        world = small_world()
        per_class = repeat_factors(world.train_counts(), 0.2)
        per_image = image_repeat_factors(world, 0.2)
        for image, factor in zip(world.train_images, per_image):
            self.assertEqual(factor, max(per_class[obj.category_id] for obj in image.objects))

    def test_epoch_order_expected_repeats(self):
        rng = np.random.default_rng(8)
        factors = np.array([1.0, 1.5, 2.25, 3.0])
        totals = np.zeros(4)
        epochs = 4000
        for _ in range(epochs):
            totals += np.bincount(epoch_order(4, rng, factors), minlength=4)
        np.testing.assert_allclose(totals / epochs, factors, rtol=0.02)

    def test_epoch_order_without_factors_is_permutation(self):
        order = epoch_order(10, np.random.default_rng(9))
        self.assertEqual(sorted(order.tolist()), list(range(10)))

    def test_tiny_threshold_equals_standard(self):
        world = small_world()
        bank = ProposalBank.build(world, derive_rng(0, "bank"))
        standard = train_standard(world, SHORT_SCHEDULE, derive_rng(3, "train"), bank=bank)
        repeated = train_repeat_sampled(world, 1e-9, SHORT_SCHEDULE, derive_rng(3, "train"), bank=bank)
        np.testing.assert_array_equal(standard.weights, repeated.weights)
        np.testing.assert_array_equal(standard.biases, repeated.biases)


class TestCascade(unittest.TestCase):
    """测试级联分类头"""

    def test_one_head_per_stage(self):
        world = small_world()
        heads = train_cascade(world, SHORT_SCHEDULE, derive_rng(0, "cascade"), iou_thresholds=(0.5, 0.6))
        self.assertEqual(len(heads), 2)
        self.assertFalse(np.array_equal(heads[0].weights, heads[1].weights))

    def test_balanced_stages(self):
        world = small_world()
        heads = train_cascade(world, SHORT_SCHEDULE, derive_rng(0, "cascade"), iou_thresholds=(0.5,),
                              balanced=BalancedSamplerConfig(classes_per_step=4))
        self.assertEqual(heads[0].class_order, world.class_order)


if __name__ == "__main__":
    unittest.main()
