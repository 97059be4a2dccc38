"""
COCO 风格的 AP / AR 评估

- ap_per_category: 逐类别、逐 IoU 阈值的贪心匹配，101 点插值 AP，再对阈值取平均；
- binned_report: 按训练实例数区间汇总 AP，并给出每个区间的类别数；
- proposal_recall: 前 k 个候选框的平均召回率；
- oracle_gt_label_eval: 用匹配到的真值类别替代预测类别的上界评估。
"""

import logging
from dataclasses import dataclass, field, replace
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np

from ..config.schema import EvalConfig
from .twostage import Detection, assign_labels, iou_matrix
from .world import DEFAULT_BIN_EDGES, ProposalSet, SceneImage, assign_bin, bin_labels

logger = logging.getLogger("tailcal.core.evaluation")


@dataclass(frozen=True)
class EvalReport:
    name: str
    overall_ap: Optional[float]
    per_category_ap: Dict[int, float]
    per_bin_ap: Dict[str, Optional[float]]
    per_bin_class_count: Dict[str, int]
    per_bin_train_class_count: Dict[str, int] = field(default_factory=dict)
    bin_weighted_ap: Optional[float] = None
    ar_at_k: Optional[float] = None
    proposal_k: Optional[int] = None

    def with_recall(self, ar: float, k: int) -> "EvalReport":
        return replace(self, ar_at_k=ar, proposal_k=k)

    def renamed(self, name: str) -> "EvalReport":
        return replace(self, name=name)

    def summary(self) -> Dict[str, Any]:
        """JSON 摘要（不含逐类别 AP，逐类别结果写入 CSV）"""
        return {
            "name": self.name,
            "overall_ap": self.overall_ap,
            "bin_weighted_ap": self.bin_weighted_ap,
            "per_bin_ap": dict(self.per_bin_ap),
            "per_bin_class_count": dict(self.per_bin_class_count),
            "per_bin_train_class_count": dict(self.per_bin_train_class_count),
            "ar_at_k": self.ar_at_k,
            "proposal_k": self.proposal_k,
        }


def _gt_index(gts: Sequence[SceneImage]) -> Dict[Tuple[int, int], np.ndarray]:
    index: Dict[Tuple[int, int], List[Tuple[float, ...]]] = {}
    for image in gts:
        for obj in image.objects:
            index.setdefault((image.id, obj.category_id), []).append(obj.box)
    return {key: np.array(boxes, dtype=float) for key, boxes in index.items()}


def _cap_detections(dets: Sequence[Detection], max_detections: int) -> List[Tuple[int, Detection]]:
    """每张图像按分数保留前 max_detections 个，返回 (输入下标, 检测) 列表"""
    by_image: Dict[int, List[Tuple[int, Detection]]] = {}
    for index, det in enumerate(dets):
        by_image.setdefault(det.image_id, []).append((index, det))
    kept = []
    for items in by_image.values():
        if len(items) > max_detections:
            items = sorted(items, key=lambda item: (-item[1].score, item[0]))[:max_detections]
        kept.extend(items)
    kept.sort(key=lambda item: item[0])
    return kept


def interpolated_ap(tp: np.ndarray, num_gt: int, recall_thresholds: np.ndarray) -> float:
    """
    由按分数降序排列的 TP 标记计算插值 AP

    在召回率 r 处的精度取所有召回率 ≥ r 的截断点上的最大精度；
    不可达的召回率点精度记为 0。
    """
    if num_gt <= 0:
        raise ValueError("num_gt 必须为正")
    if tp.size == 0:
        return 0.0
    tp_sum = np.cumsum(tp, dtype=float)
    fp_sum = np.cumsum(~tp, dtype=float)
    recall = tp_sum / num_gt
    precision = tp_sum / (tp_sum + fp_sum)
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    positions = np.searchsorted(recall, recall_thresholds, side="left")
    q = np.zeros(len(recall_thresholds))
    valid = positions < len(recall)
    q[valid] = envelope[positions[valid]]
    return float(np.mean(q))


def _match_category(det_images: np.ndarray, det_ious: List[Optional[np.ndarray]],
                    gt_counts: Dict[int, int], threshold: float) -> np.ndarray:
    """按给定顺序逐个检测贪心匹配未被占用的、IoU 最大的真值"""
    tp = np.zeros(len(det_images), dtype=bool)
    taken = {image_id: np.zeros(n, dtype=bool) for image_id, n in gt_counts.items()}
    for i, ious in enumerate(det_ious):
        if ious is None:
            continue
        available = np.where(taken[det_images[i]], -1.0, ious)
        best = int(np.argmax(available))
        if available[best] >= threshold:
            taken[det_images[i]][best] = True
            tp[i] = True
    return tp


def ap_per_category(dets: Sequence[Detection], gts: Sequence[SceneImage], cfg: EvalConfig) -> Dict[int, float]:
    """
    逐类别 AP

    Args:
        dets: 检测结果（带分数）
        gts: 带真值的图像
        cfg: 评估配置（IoU 阈值、召回率采样点、每图像检测上限）

    Returns:
        {category_id: AP}；没有真值的类别不出现在结果中
    """
    gt_boxes = _gt_index(gts)
    gt_per_category: Dict[int, Dict[int, int]] = {}
    for (image_id, category_id), boxes in gt_boxes.items():
        gt_per_category.setdefault(category_id, {})[image_id] = len(boxes)

    dets_per_category: Dict[int, List[Tuple[int, Detection]]] = {}
    for index, det in _cap_detections(dets, cfg.max_detections):
        dets_per_category.setdefault(det.category_id, []).append((index, det))

    recall_thresholds = cfg.recall_thresholds
    result: Dict[int, float] = {}
    for category_id in sorted(gt_per_category):
        counts = gt_per_category[category_id]
        num_gt = sum(counts.values())
        items = dets_per_category.get(category_id, [])
        if not items:
            result[category_id] = 0.0
            continue
        order = sorted(items, key=lambda item: (-item[1].score, item[0]))
        det_images = np.array([det.image_id for _, det in order], dtype=int)
        det_ious: List[Optional[np.ndarray]] = []
        for _, det in order:
            boxes = gt_boxes.get((det.image_id, category_id))
            det_ious.append(None if boxes is None else iou_matrix(np.asarray(det.box), boxes)[0])

        per_threshold = [
            interpolated_ap(_match_category(det_images, det_ious, counts, t), num_gt, recall_thresholds)
            for t in cfg.iou_thresholds
        ]
        result[category_id] = float(np.mean(per_threshold))
    return result


def binned_report(per_category_ap: Dict[int, float], categories: Sequence, split_edges: Sequence[int] = DEFAULT_BIN_EDGES,
                  name: str = "report") -> EvalReport:
    """
    按训练实例数区间汇总逐类别 AP

    区间 AP 是该区间内出现在评估集中的类别的平均 AP；空区间记为 None（不是 0）。
    同时报告每个区间的评估类别数与训练类别数。
    """
    labels = bin_labels(split_edges)
    values: Dict[str, List[float]] = {label: [] for label in labels}
    train_counts = {label: 0 for label in labels}
    for category in categories:
        label = labels[int(assign_bin(category.train_count, split_edges))]
        train_counts[label] += 1
        if category.id in per_category_ap:
            values[label].append(per_category_ap[category.id])

    per_bin_ap = {label: (float(np.mean(v)) if v else None) for label, v in values.items()}
    per_bin_count = {label: len(v) for label, v in values.items()}
    present = [ap for v in values.values() for ap in v]
    overall = float(np.mean(present)) if present else None
    occupied = [ap for ap in per_bin_ap.values() if ap is not None]
    bin_weighted = float(np.mean(occupied)) if occupied else None

    known = {c.id for c in categories}
    stray = set(per_category_ap) - known
    if stray:
        logger.warning(f"{len(stray)} 个类别不在类别表中，未计入报告: {sorted(stray)[:10]}")

    return EvalReport(
        name=name,
        overall_ap=overall,
        per_category_ap={c: per_category_ap[c] for c in sorted(per_category_ap) if c in known},
        per_bin_ap=per_bin_ap,
        per_bin_class_count=per_bin_count,
        per_bin_train_class_count=train_counts,
        bin_weighted_ap=bin_weighted,
    )


def count_report(categories: Sequence, split_edges: Sequence[int] = DEFAULT_BIN_EDGES,
                 name: str = "counts") -> EvalReport:
    """只含类别数统计的报告：每个区间的训练类别数与出现在验证集中的类别数"""
    labels = bin_labels(split_edges)
    train_counts = {label: 0 for label in labels}
    val_counts = {label: 0 for label in labels}
    for category in categories:
        label = labels[int(assign_bin(category.train_count, split_edges))]
        train_counts[label] += 1
        if category.val_count > 0:
            val_counts[label] += 1
    return EvalReport(
        name=name,
        overall_ap=None,
        per_category_ap={},
        per_bin_ap={label: None for label in labels},
        per_bin_class_count=val_counts,
        per_bin_train_class_count=train_counts,
    )


def _as_proposal_set(proposals: Any) -> ProposalSet:
    if isinstance(proposals, ProposalSet):
        return proposals
    return ProposalSet.from_proposals(list(proposals), feature_dim=0)


def proposal_recall(proposals: Any, gts: Sequence[SceneImage], k: int, cfg: EvalConfig) -> float:
    """
    前 k 个候选框的平均召回率（AR@k）

    每张图像按 objectness 降序取前 k 个候选框，依次与 IoU 最大的未匹配真值配对
    （一个真值至多匹配一个候选框），在各 IoU 阈值下统计召回率后取平均。
    """
    proposals = _as_proposal_set(proposals)
    total_gt = sum(len(image.objects) for image in gts)
    if total_gt == 0:
        return 0.0
    matched = np.zeros(len(cfg.iou_thresholds))
    for image in gts:
        if not image.objects:
            continue
        rows = np.flatnonzero(proposals.image_ids == image.id)
        if rows.size == 0:
            continue
        order = rows[np.lexsort((rows, -proposals.objectness[rows]))][:k]
        ious = iou_matrix(proposals.boxes[order], image.boxes)
        for t_index, threshold in enumerate(cfg.iou_thresholds):
            taken = np.zeros(len(image.objects), dtype=bool)
            for row in ious:
                available = np.where(taken, -1.0, row)
                best = int(np.argmax(available))
                if available[best] >= threshold:
                    taken[best] = True
            matched[t_index] += taken.sum()
    return float(np.mean(matched / total_gt))


def oracle_detections(proposals: Any, gts: Sequence[SceneImage], iou_threshold: float = 0.5) -> List[Detection]:
    """
    真值标签上界：匹配到真值（IoU ≥ 阈值）的候选框以真值类别、以 IoU 为分数成为检测结果，
    未匹配的候选框丢弃
    """
    proposals = _as_proposal_set(proposals)
    detections = []
    for image in gts:
        rows = np.flatnonzero(proposals.image_ids == image.id)
        if rows.size == 0 or not image.objects:
            continue
        labels, _, best_iou = assign_labels(proposals.boxes[rows], image.boxes, image.category_ids, iou_threshold)
        for local, row in enumerate(rows):
            if labels[local] >= 0:
                detections.append(Detection(
                    image_id=image.id,
                    box=tuple(float(v) for v in proposals.boxes[row]),
                    category_id=int(labels[local]),
                    score=float(best_iou[local]),
                ))
    return detections


def oracle_gt_label_eval(proposals: Any, gts: Sequence[SceneImage], cfg: EvalConfig, categories: Sequence,
                         split_edges: Sequence[int] = DEFAULT_BIN_EDGES, name: str = "props-gt") -> EvalReport:
    """用真值类别标记候选框后评估，隔离分类错误与候选框质量"""
    dets = oracle_detections(proposals, gts)
    return binned_report(ap_per_category(dets, gts, cfg), categories, split_edges, name=name)


def evaluate_detections(dets: Sequence[Detection], world, cfg: EvalConfig,
                        split_edges: Sequence[int] = DEFAULT_BIN_EDGES, name: str = "report") -> EvalReport:
    """在世界的验证集上评估检测结果并按区间汇总"""
    per_category = ap_per_category(dets, world.val_images, cfg)
    report = binned_report(per_category, world.categories, split_edges, name=name)
    logger.info(
        f"[{name}] AP={_fmt(report.overall_ap)} "
        + " ".join(f"{label}={_fmt(ap)}" for label, ap in report.per_bin_ap.items())
    )
    return report


def _fmt(value: Optional[float]) -> str:
    return "n/a" if value is None else f"{100 * value:.1f}"
