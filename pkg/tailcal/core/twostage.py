"""
两阶段检测流水线的几何与后处理原语

IoU、候选框与真值匹配、NMS，以及把分数矩阵解码为最终检测结果。
所有函数均为纯函数，结果与图像处理顺序无关。
"""

import logging
from dataclasses import dataclass
from typing import TYPE_CHECKING, Any, List, Optional, Sequence, Tuple

import numpy as np

if TYPE_CHECKING:
    from .calib import ScoreMatrix

logger = logging.getLogger("tailcal.core.twostage")

BACKGROUND = -1


def _as_box_array(boxes: Any) -> np.ndarray:
    """接受 (N,4) 数组、候选框/真值/检测对象序列或带 boxes 属性的集合"""
    if hasattr(boxes, "boxes") and isinstance(getattr(boxes, "boxes"), np.ndarray):
        return boxes.boxes
    if isinstance(boxes, np.ndarray):
        return boxes.reshape(-1, 4).astype(float, copy=False)
    items = list(boxes)
    if not items:
        return np.zeros((0, 4))
    if hasattr(items[0], "box"):
        return np.array([item.box for item in items], dtype=float)
    return np.array(items, dtype=float).reshape(-1, 4)


def iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """
    两组矩形两两之间的 IoU

    Args:
        a: (N, 4) 矩形 [x1, y1, x2, y2]
        b: (M, 4) 矩形

    Returns:
        (N, M) IoU 矩阵，取值 [0, 1]
    """
    a = np.asarray(a, dtype=float).reshape(-1, 4)
    b = np.asarray(b, dtype=float).reshape(-1, 4)
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])

    xx1 = np.maximum(a[:, None, 0], b[None, :, 0])
    yy1 = np.maximum(a[:, None, 1], b[None, :, 1])
    xx2 = np.minimum(a[:, None, 2], b[None, :, 2])
    yy2 = np.minimum(a[:, None, 3], b[None, :, 3])
    inter = np.maximum(0.0, xx2 - xx1) * np.maximum(0.0, yy2 - yy1)
    union = area_a[:, None] + area_b[None, :] - inter
    with np.errstate(divide="ignore", invalid="ignore"):
        ious = np.where(union > 0, inter / union, 0.0)
    return np.clip(ious, 0.0, 1.0)


def iou(a: Sequence[float], b: Sequence[float]) -> float:
    """两个矩形的交并比（对称，取值 [0,1]）"""
    return float(iou_matrix(np.asarray(a), np.asarray(b))[0, 0])


@dataclass(frozen=True)
class Detection:
    image_id: int
    box: Tuple[float, float, float, float]
    category_id: int
    score: float

    def __post_init__(self):
        if self.category_id < 0:
            raise ValueError(f"检测结果必须属于前景类别: {self.category_id}")
        if not np.isfinite(self.score):
            raise ValueError(f"检测分数必须有限: {self.score}")


@dataclass(frozen=True)
class MatchResult:
    label: int  # 前景类别 id，或 BACKGROUND
    matched_gt_index: Optional[int]
    iou: float

    @property
    def is_background(self) -> bool:
        return self.label == BACKGROUND


def assign_labels(boxes: np.ndarray, gt_boxes: np.ndarray, gt_labels: np.ndarray,
                  iou_threshold: float = 0.5) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """
    向量化的最大 IoU 匹配

    Returns:
        (labels, gt_index, best_iou)：labels 中背景为 BACKGROUND，
        gt_index 对背景为 -1；IoU 并列时取下标较小的真值
    """
    n = boxes.shape[0]
    if gt_boxes.shape[0] == 0 or n == 0:
        return np.full(n, BACKGROUND, dtype=int), np.full(n, -1, dtype=int), np.zeros(n)
    ious = iou_matrix(boxes, gt_boxes)
    best = np.argmax(ious, axis=1)
    best_iou = ious[np.arange(n), best]
    foreground = best_iou >= iou_threshold
    labels = np.where(foreground, np.asarray(gt_labels, dtype=int)[best], BACKGROUND)
    gt_index = np.where(foreground, best, -1)
    return labels, gt_index, best_iou


def match_proposals(proposals: Any, gts: Sequence[Any], iou_threshold: float = 0.5) -> List[MatchResult]:
    """
    把同一图像的候选框匹配到 IoU 最大的真值

    Args:
        proposals: 候选框序列（或 ProposalSet / (N,4) 数组）
        gts: GtObject 序列
        iou_threshold: 前景匹配阈值，默认 0.5

    Returns:
        每个候选框的 MatchResult；IoU 低于阈值或没有真值时为背景
    """
    if not (0.0 < iou_threshold < 1.0):
        raise ValueError(f"匹配阈值必须在 (0,1) 内: {iou_threshold}")
    boxes = _as_box_array(proposals)
    gt_boxes = _as_box_array(gts)
    gt_labels = np.array([g.category_id for g in gts], dtype=int)
    labels, gt_index, best_iou = assign_labels(boxes, gt_boxes, gt_labels, iou_threshold)
    return [
        MatchResult(
            label=int(labels[i]),
            matched_gt_index=None if gt_index[i] < 0 else int(gt_index[i]),
            iou=float(best_iou[i]),
        )
        for i in range(boxes.shape[0])
    ]


def _nms_order(boxes: np.ndarray, scores: np.ndarray) -> np.ndarray:
    # 分数降序，同分按 x1、y1 升序，再按输入顺序
    return np.lexsort((np.arange(len(scores)), boxes[:, 1], boxes[:, 0], -scores))


def nms_indices(boxes: np.ndarray, scores: np.ndarray, iou_threshold: float,
                ious: Optional[np.ndarray] = None) -> np.ndarray:
    """
    贪心 NMS，返回保留下标（按保留顺序）

    某个框被保留当且仅当它与所有已保留框的 IoU 都小于阈值。
    ious 可传入预先计算好的 IoU 矩阵。
    """
    if len(scores) == 0:
        return np.zeros(0, dtype=int)
    if ious is None:
        ious = iou_matrix(boxes, boxes)
    suppress = ious >= iou_threshold
    keep: List[int] = []
    for i in _nms_order(boxes, scores):
        if not keep or not suppress[i, keep].any():
            keep.append(int(i))
    return np.array(keep, dtype=int)


def nms(dets: Sequence[Detection], iou_threshold: float) -> List[Detection]:
    """
    单图像、单类别检测结果的贪心非极大值抑制

    Returns:
        保留的检测结果（输入的子序列，分数不变），按分数降序
    """
    if not dets:
        return []
    if len({(d.image_id, d.category_id) for d in dets}) > 1:
        raise ValueError("nms 的输入必须属于同一图像和同一类别")
    boxes = np.array([d.box for d in dets], dtype=float)
    scores = np.array([d.score for d in dets], dtype=float)
    return [dets[i] for i in nms_indices(boxes, scores, iou_threshold)]


def decode_detections(proposals: Any, scores: "ScoreMatrix", score_threshold: float = 0.05,
                      nms_iou: float = 0.5, max_per_image: int = 300) -> List[Detection]:
    """
    把分数矩阵解码为检测结果

    对每个候选框和每个分数大于阈值的前景类别生成候选检测，逐类别 NMS，
    每张图像按分数保留前 max_per_image 个。分数行不要求归一化。

    Args:
        proposals: ProposalSet（或候选框序列），行顺序与分数矩阵一致
        scores: (N, C+1) 分数矩阵，最后一列为背景
        score_threshold: 分数阈值（严格大于）
        nms_iou: NMS 的 IoU 阈值
        max_per_image: 每张图像的检测上限

    Returns:
        检测结果，按图像 id 升序、图像内分数降序
    """
    from .world import ProposalSet

    if not isinstance(proposals, ProposalSet):
        proposals = ProposalSet.from_proposals(list(proposals), feature_dim=0)
    matrix = np.asarray(scores.scores, dtype=float)
    num_fg = len(scores.class_order)
    if matrix.ndim != 2 or matrix.shape[0] != len(proposals) or matrix.shape[1] != num_fg + 1:
        raise ValueError(
            f"分数矩阵形状 {matrix.shape} 与候选框数 {len(proposals)} / 类别数 {num_fg}+1 不匹配"
        )
    if max_per_image < 1:
        raise ValueError(f"max_per_image 必须为正: {max_per_image}")

    class_order = np.asarray(scores.class_order, dtype=int)
    detections: List[Detection] = []
    for image_id in np.unique(proposals.image_ids):
        rows = np.flatnonzero(proposals.image_ids == image_id)
        boxes = proposals.boxes[rows]
        fg = matrix[rows, :num_fg]
        candidate = fg > score_threshold
        if not candidate.any():
            continue
        ious = iou_matrix(boxes, boxes)

        kept_rows, kept_cols = [], []
        for col in np.flatnonzero(candidate.any(axis=0)):
            local = np.flatnonzero(candidate[:, col])
            keep = nms_indices(boxes[local], fg[local, col], nms_iou, ious[np.ix_(local, local)])
            kept_rows.append(local[keep])
            kept_cols.append(np.full(len(keep), col, dtype=int))
        r = np.concatenate(kept_rows)
        c = np.concatenate(kept_cols)
        s = fg[r, c]
        order = np.lexsort((r, c, -s))[:max_per_image]
        for k in order:
            detections.append(Detection(
                image_id=int(image_id),
                box=tuple(float(v) for v in boxes[r[k]]),
                category_id=int(class_order[c[k]]),
                score=float(s[k]),
            ))
    return detections
