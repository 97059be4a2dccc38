"""
分类校准：组合原分类头与重训练分类头的预测

支持的组合策略（CLI/配置中的枚举值）：
    only       只使用新分类头
    avg        两个分类头逐元素平均
    det        两个分类头分别解码，再按类别来源合并检测结果
    cat        尾部类别取新分类头分数，其余类别及背景取原分类头分数
    cat-thr    同 cat，但新分类头中不超过阈值的分数先置零
    cat-scale  同 cat，但新分类头前景分数先乘以背景均值之比
另外提供多阶段分类头平均与多模型集成。所有函数不修改输入。
"""

import logging
from dataclasses import dataclass
from enum import Enum
from typing import Dict, FrozenSet, Iterable, List, Sequence, Tuple

import numpy as np

from .twostage import Detection

logger = logging.getLogger("tailcal.core.calib")


class ScoreShapeError(ValueError):
    """分数矩阵形状或类别顺序不一致"""


class Strategy(str, Enum):
    ONLY = "only"
    AVG = "avg"
    DET = "det"
    CAT = "cat"
    CAT_THR = "cat-thr"
    CAT_SCALE = "cat-scale"

    @property
    def report_name(self) -> str:
        return f"rhead-{self.value}"


@dataclass(frozen=True, eq=False)
class ScoreMatrix:
    """
    (N, C+1) 的候选框类别分数，最后一列为背景

    分类头直接输出的矩阵每行和为 1；组合后的矩阵可能不再归一化。
    """
    scores: np.ndarray
    class_order: Tuple[int, ...]

    def __post_init__(self):
        if self.scores.ndim != 2 or self.scores.shape[1] != len(self.class_order) + 1:
            raise ScoreShapeError(
                f"分数矩阵形状 {self.scores.shape} 与类别数 {len(self.class_order)}+1 不一致"
            )

    @property
    def shape(self) -> Tuple[int, int]:
        return self.scores.shape

    @property
    def background(self) -> np.ndarray:
        return self.scores[:, -1]

    def __len__(self) -> int:
        return int(self.scores.shape[0])


@dataclass(frozen=True)
class BinSplit:
    """尾部类别由新分类头负责，多样本类别由原分类头负责"""
    tail_classes: FrozenSet[int]
    manyshot_classes: FrozenSet[int]

    def __post_init__(self):
        if self.tail_classes & self.manyshot_classes:
            raise ValueError("尾部类别与多样本类别集合必须不相交")

    @classmethod
    def from_categories(cls, categories: Iterable, tail_bins: Sequence[int] = (0, 1),
                        edges: Sequence[int] = (10, 100, 1000)) -> "BinSplit":
        """按训练实例数所在区间划分类别；tail_bins 为新分类头负责的区间编号"""
        from .world import assign_bin

        tail, many = set(), set()
        for category in categories:
            if int(assign_bin(category.train_count, edges)) in set(tail_bins):
                tail.add(category.id)
            else:
                many.add(category.id)
        return cls(tail_classes=frozenset(tail), manyshot_classes=frozenset(many))

    def covers(self, class_order: Sequence[int]) -> bool:
        return (self.tail_classes | self.manyshot_classes) == set(class_order)


def _check_pair(orig: ScoreMatrix, new: ScoreMatrix, split: BinSplit) -> None:
    if orig.shape != new.shape:
        raise ScoreShapeError(f"分数矩阵形状不一致: {orig.shape} vs {new.shape}")
    if orig.class_order != new.class_order:
        raise ScoreShapeError("分数矩阵的类别顺序不一致")
    if not split.covers(orig.class_order):
        raise ScoreShapeError("BinSplit 的类别并集必须等于全部前景类别")


def _tail_columns(class_order: Sequence[int], split: BinSplit) -> np.ndarray:
    return np.array([i for i, c in enumerate(class_order) if c in split.tail_classes], dtype=int)


def _concatenate(orig: ScoreMatrix, new_scores: np.ndarray, split: BinSplit) -> ScoreMatrix:
    out = orig.scores.copy()
    columns = _tail_columns(orig.class_order, split)
    out[:, columns] = new_scores[:, columns]
    return ScoreMatrix(scores=out, class_order=orig.class_order)


def background_ratio(orig: ScoreMatrix, new: ScoreMatrix, invert: bool = False) -> float:
    """
    cat-scale 的缩放系数 k = mean(原分类头背景分数) / mean(新分类头背景分数)

    invert 为 True 时取倒数。
    """
    orig_mean = float(np.mean(orig.background)) if len(orig) else 0.0
    new_mean = float(np.mean(new.background)) if len(new) else 0.0
    if orig_mean == 0.0 or new_mean == 0.0:
        raise ValueError("背景分数均值为 0，无法计算缩放系数")
    return new_mean / orig_mean if invert else orig_mean / new_mean


def combine(strategy: str, orig: ScoreMatrix, new: ScoreMatrix, split: BinSplit,
            threshold: float = 0.05, invert_scale: bool = False) -> ScoreMatrix:
    """
    按策略组合原分类头与新分类头的分数矩阵

    Args:
        strategy: only / avg / cat / cat-thr / cat-scale（det 见 combine_detections_det）
        orig: 原分类头分数
        new: 新分类头分数（同一组候选框）
        split: 尾部/多样本类别划分
        threshold: cat-thr 的过滤阈值
        invert_scale: cat-scale 缩放方向取反

    Returns:
        组合后的分数矩阵
    """
    strategy = Strategy(strategy)
    _check_pair(orig, new, split)

    if strategy is Strategy.ONLY:
        return new
    if strategy is Strategy.AVG:
        return ScoreMatrix(scores=(orig.scores + new.scores) / 2.0, class_order=orig.class_order)
    if strategy is Strategy.CAT:
        return _concatenate(orig, new.scores, split)
    if strategy is Strategy.CAT_THR:
        filtered = np.where(new.scores > threshold, new.scores, 0.0)
        return _concatenate(orig, filtered, split)
    if strategy is Strategy.CAT_SCALE:
        k = background_ratio(orig, new, invert_scale)
        logger.info(f"cat-scale 缩放系数 k={k:.6f}")
        scaled = new.scores.copy()
        scaled[:, :-1] *= k
        return _concatenate(orig, scaled, split)
    raise ValueError("det 策略作用于检测结果，请使用 combine_detections_det")


def _cap_per_image(detections: List[Detection], per_image_cap: int) -> List[Detection]:
    by_image: Dict[int, List[Tuple[int, Detection]]] = {}
    for index, det in enumerate(detections):
        by_image.setdefault(det.image_id, []).append((index, det))
    result = []
    for image_id in sorted(by_image):
        ranked = sorted(by_image[image_id], key=lambda item: (-item[1].score, item[1].category_id, item[0]))
        result.extend(det for _, det in ranked[:per_image_cap])
    return result


def combine_detections_det(dets_orig: Sequence[Detection], dets_new: Sequence[Detection], split: BinSplit,
                           per_image_cap: int = 300) -> List[Detection]:
    """
    两个“专家”分别解码后合并：原分类头负责多样本类别，新分类头负责尾部类别，
    合并后按分数重新施加每图像上限
    """
    merged = [d for d in dets_orig if d.category_id in split.manyshot_classes]
    merged.extend(d for d in dets_new if d.category_id in split.tail_classes)
    return _cap_per_image(merged, per_image_cap)


def average_heads(scores: Sequence[ScoreMatrix]) -> ScoreMatrix:
    """
    多个分类头（如级联各阶段）分数的逐元素平均；归一化的行平均后仍归一化
    """
    if not scores:
        raise ValueError("至少需要一个分数矩阵")
    first = scores[0]
    for other in scores[1:]:
        if other.shape != first.shape or other.class_order != first.class_order:
            raise ScoreShapeError("待平均的分数矩阵形状或类别顺序不一致")
    if len(scores) == 1:
        return first
    total = np.zeros_like(first.scores)
    for matrix in scores:
        total = total + matrix.scores
    return ScoreMatrix(scores=total / len(scores), class_order=first.class_order)


def ensemble_models(score_sets: Sequence[ScoreMatrix]) -> ScoreMatrix:
    """多模型集成：在同一组候选框上对各模型分数取平均"""
    return average_heads(score_sets)


def cascade_scores(heads: Sequence, features: np.ndarray) -> ScoreMatrix:
    """级联各阶段分类头的前向结果取平均"""
    from .heads import forward

    return average_heads([forward(head, features) for head in heads])
