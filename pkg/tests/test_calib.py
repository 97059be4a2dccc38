#!/usr/bin/env python3
# -*- coding: utf-8 -*-
"""
分数组合策略测试
"""

import sys
import unittest
from pathlib import Path

import numpy as np

sys.path.insert(0, str(Path(__file__).parent.parent))

from tailcal.config.schema import EvalConfig, WorldConfig
from tailcal.core.calib import (
    BinSplit,
    ScoreMatrix,
    ScoreShapeError,
    Strategy,
    average_heads,
    background_ratio,
    cascade_scores,
    combine,
    combine_detections_det,
    ensemble_models,
)
from tailcal.core.evaluation import ap_per_category
from tailcal.core.heads import Head, forward
from tailcal.core.twostage import Detection, decode_detections
from tailcal.core.world import Category, assign_bin, generate_proposal_set, generate_world
from tailcal.utils import derive_rng

CLASS_ORDER = (0, 1, 2, 3)


def random_scores(rng, n=12, class_order=CLASS_ORDER):
    raw = rng.random((n, len(class_order) + 1))
    return ScoreMatrix(raw / raw.sum(axis=1, keepdims=True), class_order)


def split(tail):
    tail = frozenset(tail)
    return BinSplit(tail_classes=tail, manyshot_classes=frozenset(CLASS_ORDER) - tail)


class TestBinSplit(unittest.TestCase):
    """测试类别划分"""

    def test_from_categories(self):
        categories = [Category(id=i, train_count=n, bin=assign_bin(n)) for i, n in enumerate([3, 40, 400, 4000])]
        result = BinSplit.from_categories(categories, tail_bins=(0, 1))
        self.assertEqual(result.tail_classes, frozenset({0, 1}))
        self.assertEqual(result.manyshot_classes, frozenset({2, 3}))
        self.assertTrue(result.covers(CLASS_ORDER))

    def test_overlap_rejected(self):
        with self.assertRaises(ValueError):
            BinSplit(tail_classes=frozenset({1}), manyshot_classes=frozenset({1, 2}))

    def test_incomplete_split_rejected(self):
        rng = np.random.default_rng(0)
        partial = BinSplit(tail_classes=frozenset({0}), manyshot_classes=frozenset({1}))
        with self.assertRaises(ScoreShapeError):
            combine("cat", random_scores(rng), random_scores(rng), partial)


class TestCombine(unittest.TestCase):
    """测试分数矩阵组合"""

    def setUp(self):
        rng = np.random.default_rng(1)
        self.orig = random_scores(rng)
        self.new = random_scores(rng)

    def test_only_returns_new(self):
        result = combine("only", self.orig, self.new, split({0}))
        np.testing.assert_array_equal(result.scores, self.new.scores)

    def test_avg_of_identical_is_identity(self):
        result = combine("avg", self.orig, self.orig, split({0, 1}))
        np.testing.assert_allclose(result.scores, self.orig.scores, rtol=1e-15)

    def test_avg_rows_stay_normalized(self):
        result = combine("avg", self.orig, self.new, split({0}))
        np.testing.assert_allclose(result.scores.sum(axis=1), 1.0, atol=1e-12)

    def test_cat_takes_tail_columns_from_new(self):
        result = combine("cat", self.orig, self.new, split({1, 3}))
        np.testing.assert_array_equal(result.scores[:, [1, 3]], self.new.scores[:, [1, 3]])
        np.testing.assert_array_equal(result.scores[:, [0, 2, 4]], self.orig.scores[:, [0, 2, 4]])

    def test_cat_empty_tail_is_orig(self):
        result = combine("cat", self.orig, self.new, split(set()))
        np.testing.assert_array_equal(result.scores, self.orig.scores)

    def test_cat_thr_zeroes_small_scores(self):
        result = combine("cat-thr", self.orig, self.new, split({0, 1, 2, 3}), threshold=0.2)
        tail = result.scores[:, :4]
        source = self.new.scores[:, :4]
        np.testing.assert_array_equal(tail, np.where(source > 0.2, source, 0.0))
        np.testing.assert_array_equal(result.background, self.orig.background)

    def test_cat_thr_zero_threshold_equals_cat(self):
        a = combine("cat-thr", self.orig, self.new, split({0, 2}), threshold=0.0)
        b = combine("cat", self.orig, self.new, split({0, 2}))
        np.testing.assert_array_equal(a.scores, b.scores)

    def test_cat_scale_equal_backgrounds_is_cat(self):
        new_scores = self.new.scores.copy()
        new_scores[:, -1] = self.orig.scores[:, -1]
        new = ScoreMatrix(new_scores, CLASS_ORDER)
        a = combine("cat-scale", self.orig, new, split({0, 1}))
        b = combine("cat", self.orig, new, split({0, 1}))
        np.testing.assert_allclose(a.scores, b.scores, rtol=1e-12)

    def test_cat_scale_factor(self):
        k = background_ratio(self.orig, self.new)
        self.assertAlmostEqual(k, self.orig.background.mean() / self.new.background.mean(), places=12)
        self.assertAlmostEqual(background_ratio(self.orig, self.new, invert=True), 1.0 / k, places=12)
        result = combine("cat-scale", self.orig, self.new, split({2}))
        np.testing.assert_allclose(result.scores[:, 2], self.new.scores[:, 2] * k, rtol=1e-12)

    def test_inputs_not_mutated(self):
        before = self.orig.scores.copy()
        for strategy in ("avg", "cat", "cat-thr", "cat-scale"):
            combine(strategy, self.orig, self.new, split({0, 1}))
        np.testing.assert_array_equal(self.orig.scores, before)

    def test_shape_mismatch(self):
        other = random_scores(np.random.default_rng(2), n=5)
        with self.assertRaises(ScoreShapeError):
            combine("avg", self.orig, other, split({0}))

    def test_class_order_mismatch(self):
        other = ScoreMatrix(self.new.scores, (3, 2, 1, 0))
        with self.assertRaises(ScoreShapeError):
            combine("avg", self.orig, other, split({0}))

    def test_det_requires_detection_merge(self):
        with self.assertRaises(ValueError):
            combine("det", self.orig, self.new, split({0}))

    def test_unknown_strategy(self):
        with self.assertRaises(ValueError):
            combine("sum", self.orig, self.new, split({0}))

    def test_report_names(self):
        self.assertEqual(Strategy("cat-thr").report_name, "rhead-cat-thr")
        self.assertEqual([s.value for s in Strategy], ["only", "avg", "det", "cat", "cat-thr", "cat-scale"])


class TestDetMerge(unittest.TestCase):
    """测试 det 策略的检测结果合并"""

    def test_each_head_owns_its_classes(self):
        orig = [Detection(0, (0, 0, 1, 1), 0, 0.9), Detection(0, (0, 0, 1, 1), 1, 0.8)]
        new = [Detection(0, (0, 0, 1, 1), 0, 0.7), Detection(0, (0, 0, 1, 1), 1, 0.6)]
        merged = combine_detections_det(orig, new, split({1}))
        self.assertEqual(merged, [orig[0], new[1]])

    def test_cap_keeps_highest_scores(self):
        orig = [Detection(0, (0, 0, 1, 1), 0, 0.1 * i) for i in range(1, 6)]
        new = [Detection(0, (0, 0, 1, 1), 1, 0.15 * i) for i in range(1, 6)]
        merged = combine_detections_det(orig, new, split({1}), per_image_cap=3)
        self.assertEqual([d.score for d in merged], sorted((d.score for d in orig + new), reverse=True)[:3])

    def test_cap_300_of_400(self):
        rng = np.random.default_rng(6)
        orig = [Detection(0, (0, 0, 1, 1), 2 + i % 2, float(s)) for i, s in enumerate(rng.random(200))]
        new = [Detection(0, (0, 0, 1, 1), i % 2, float(s)) for i, s in enumerate(rng.random(200))]
        result = combine_detections_det(orig, new, split({0, 1}), per_image_cap=300)
        expected = sorted((d.score for d in orig + new), reverse=True)[:300]
        self.assertEqual([d.score for d in result], expected)

    def test_cap_is_per_image(self):
        orig = [Detection(image, (0, 0, 1, 1), 0, 0.5) for image in (0, 0, 1, 1, 1)]
        merged = combine_detections_det(orig, [], split(set()), per_image_cap=2)
        self.assertEqual(sorted(d.image_id for d in merged), [0, 0, 1, 1])


class TestColumnSourcing(unittest.TestCase):
    """检测数不设上限时，每个类别的 AP 只取决于提供它那一列分数的分类头"""

    @classmethod
    def setUpClass(cls):
        cls.world = generate_world(WorldConfig(num_categories=6, feature_dim=4, total_instances=800, seed=8))
        cls.proposals = generate_proposal_set(cls.world.val_images, cls.world, derive_rng(8, "val-proposals"))
        cls.split = BinSplit.from_categories(cls.world.categories, tail_bins=(0, 1))
        rng = np.random.default_rng(8)
        rows, dim = cls.world.num_categories + 1, cls.world.feature_dim
        cls.orig = forward(Head(rng.standard_normal((rows, dim)), rng.standard_normal(rows), cls.world.class_order),
                           cls.proposals.features)
        cls.new = forward(Head(rng.standard_normal((rows, dim)), rng.standard_normal(rows), cls.world.class_order),
                          cls.proposals.features)
        cls.eval_cfg = EvalConfig(max_detections=100000)

    def decode(self, scores, threshold=0.0):
        return decode_detections(self.proposals, scores, threshold, 0.5, 100000)

    def ap(self, dets):
        return ap_per_category(dets, self.world.val_images, self.eval_cfg)

    def assert_sourced(self, combined, orig, new):
        self.assertTrue(self.split.tail_classes and self.split.manyshot_classes)
        for category, value in combined.items():
            source = new if category in self.split.tail_classes else orig
            self.assertAlmostEqual(value, source[category], delta=1e-12, msg=f"category {category}")

    def test_score_strategies(self):
        orig, new = self.ap(self.decode(self.orig)), self.ap(self.decode(self.new))
        for strategy in (Strategy.CAT, Strategy.CAT_SCALE):
            with self.subTest(strategy=strategy.value):
                combined = self.ap(self.decode(combine(strategy, self.orig, self.new, self.split)))
                self.assert_sourced(combined, orig, new)

    def test_only_uses_new_head(self):
        new = self.ap(self.decode(self.new))
        combined = self.ap(self.decode(combine(Strategy.ONLY, self.orig, self.new, self.split)))
        self.assertEqual(combined, new)

    def test_cat_thr_matches_thresholded_new_head(self):
        # 过滤阈值与解码阈值相同时尾部列等价于新分类头单独解码
        orig, new = self.ap(self.decode(self.orig, 0.05)), self.ap(self.decode(self.new, 0.05))
        combined = self.ap(self.decode(combine(Strategy.CAT_THR, self.orig, self.new, self.split, threshold=0.05),
                                       0.05))
        self.assert_sourced(combined, orig, new)

    def test_det_merge(self):
        dets_orig, dets_new = self.decode(self.orig), self.decode(self.new)
        combined = self.ap(combine_detections_det(dets_orig, dets_new, self.split, 100000))
        self.assert_sourced(combined, self.ap(dets_orig), self.ap(dets_new))


class TestAveraging(unittest.TestCase):
    """测试多阶段平均与模型集成"""

    def test_single_matrix_unchanged(self):
        matrix = random_scores(np.random.default_rng(3))
        self.assertIs(average_heads([matrix]), matrix)

    def test_average_stays_normalized(self):
        rng = np.random.default_rng(4)
        result = ensemble_models([random_scores(rng) for _ in range(3)])
        np.testing.assert_allclose(result.scores.sum(axis=1), 1.0, atol=1e-12)

    def test_ensemble_with_uniform_moves_toward_uniform(self):
        rng = np.random.default_rng(6)
        width = len(CLASS_ORDER) + 1
        logits = 4.0 * rng.standard_normal((20, width))
        peaked = np.exp(logits) / np.exp(logits).sum(axis=1, keepdims=True)
        strong = ScoreMatrix(peaked, CLASS_ORDER)
        uniform = ScoreMatrix(np.full((20, width), 1.0 / width), CLASS_ORDER)
        result = ensemble_models([strong, uniform])
        before = np.abs(strong.scores - 1.0 / width)
        after = np.abs(result.scores - 1.0 / width)
        self.assertTrue(np.all(after <= before + 1e-15))
        np.testing.assert_allclose(after, before / 2.0, atol=1e-15)
        self.assertTrue(np.all(result.scores.max(axis=1) <= strong.scores.max(axis=1)))

    def test_ensemble_keeps_shared_argmax(self):
        rng = np.random.default_rng(7)
        a, b = random_scores(rng, n=50), random_scores(rng, n=50)
        # 第 2 类在 A 的每一行都占优，B 只在一半的行上同意
        a.scores[:, 2] += 2.0
        b.scores[:25, 2] += 2.0
        result = ensemble_models([a, b])
        agree = a.scores.argmax(axis=1) == b.scores.argmax(axis=1)
        self.assertTrue(agree[:25].all())
        np.testing.assert_array_equal(result.scores[agree].argmax(axis=1), a.scores[agree].argmax(axis=1))
        np.testing.assert_array_equal(result.scores[:25].argmax(axis=1), np.full(25, 2))

    def test_empty_rejected(self):
        with self.assertRaises(ValueError):
            average_heads([])

    def test_cascade_scores_average_forward(self):
        rng = np.random.default_rng(5)
        heads = [Head(rng.standard_normal((5, 3)), rng.standard_normal(5), CLASS_ORDER) for _ in range(3)]
        features = rng.standard_normal((7, 3))
        expected = np.mean([forward(h, features).scores for h in heads], axis=0)
        np.testing.assert_allclose(cascade_scores(heads, features).scores, expected, rtol=1e-12)


if __name__ == "__main__":
    unittest.main()
