"""
冻结特征上的线性 softmax 分类头

三种训练方式：
- 标准训练：按图像均匀采样小批量，使用全部候选框；
- 类别均衡重训练：每步采样若干类别、每类一张图像，只保留这些类别的候选框与真值框；
- 图像级重复采样：按重复因子对包含稀有类别的图像过采样。
特征来自世界生成器（即冻结的 backbone），只有分类头参数被更新。
"""

import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from tqdm import tqdm

from ..config.schema import BalancedSamplerConfig, TrainSchedule
from .calib import ScoreMatrix
from .twostage import BACKGROUND, assign_labels
from .world import World, class_features, proposal_set_for_image

logger = logging.getLogger("tailcal.core.heads")


class TrainingDivergedError(RuntimeError):
    """梯度或损失出现非有限值"""


@dataclass(frozen=True, eq=False)
class Head:
    """
    (C+1) x D 线性分类头，最后一行是背景类
    """
    weights: np.ndarray
    biases: np.ndarray
    class_order: Tuple[int, ...]

    def __post_init__(self):
        rows = len(self.class_order) + 1
        if self.weights.ndim != 2 or self.weights.shape[0] != rows:
            raise ValueError(f"权重形状 {self.weights.shape} 与类别数 {rows} 不一致")
        if self.biases.shape != (rows,):
            raise ValueError(f"偏置形状 {self.biases.shape} 与类别数 {rows} 不一致")
        if not (np.all(np.isfinite(self.weights)) and np.all(np.isfinite(self.biases))):
            raise ValueError("分类头参数包含非有限值")

    @property
    def num_classes(self) -> int:
        """含背景的类别数"""
        return self.weights.shape[0]

    @property
    def feature_dim(self) -> int:
        return self.weights.shape[1]

    @property
    def background_index(self) -> int:
        return len(self.class_order)

    def column_of(self) -> Dict[int, int]:
        return {category_id: column for column, category_id in enumerate(self.class_order)}


@dataclass(frozen=True, eq=False)
class HeadGradient:
    weights: np.ndarray
    biases: np.ndarray


@dataclass(eq=False)
class MomentumState:
    """重球动量的速度缓存"""
    weights: np.ndarray
    biases: np.ndarray

    @classmethod
    def zeros_like(cls, head: Head) -> "MomentumState":
        return cls(weights=np.zeros_like(head.weights), biases=np.zeros_like(head.biases))


def init_head(class_order: Sequence[int], feature_dim: int, rng: np.random.Generator,
              scale: float = 0.01) -> Head:
    """小尺度球面随机初始化权重，偏置为 0"""
    rows = len(class_order) + 1
    return Head(
        weights=rng.standard_normal((rows, feature_dim)) * scale,
        biases=np.zeros(rows),
        class_order=tuple(int(c) for c in class_order),
    )


def _softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    exp = np.exp(shifted)
    return exp / exp.sum(axis=1, keepdims=True)


def forward(head: Head, features: np.ndarray) -> ScoreMatrix:
    """
    分类头前向：按行 softmax(features · Wᵀ + b)

    Args:
        head: 分类头
        features: (N, D) 特征矩阵

    Returns:
        (N, C+1) 分数矩阵，每行和为 1
    """
    features = np.asarray(features, dtype=float)
    if features.ndim != 2 or features.shape[1] != head.feature_dim:
        raise ValueError(f"特征形状 {features.shape} 与分类头维度 {head.feature_dim} 不匹配")
    logits = features @ head.weights.T + head.biases
    return ScoreMatrix(scores=_softmax(logits), class_order=head.class_order)


def labels_to_columns(head: Head, labels: np.ndarray) -> np.ndarray:
    """类别 id（背景为 BACKGROUND）转为分数矩阵列下标"""
    columns = head.column_of()
    return np.array(
        [head.background_index if label == BACKGROUND else columns[int(label)] for label in labels],
        dtype=int,
    )


def cross_entropy(head: Head, features: np.ndarray, targets: np.ndarray) -> Tuple[float, HeadGradient]:
    """
    平均交叉熵损失及其解析梯度

    Args:
        head: 分类头
        features: (N, D)
        targets: (N,) 列下标（背景为最后一列）

    Returns:
        (loss, gradient)
    """
    n = features.shape[0]
    if n == 0:
        return 0.0, HeadGradient(np.zeros_like(head.weights), np.zeros_like(head.biases))
    logits = features @ head.weights.T + head.biases
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(shifted).sum(axis=1))
    loss = float(np.mean(log_norm - shifted[np.arange(n), targets]))

    delta = np.exp(shifted - log_norm[:, None])
    delta[np.arange(n), targets] -= 1.0
    delta /= n
    return loss, HeadGradient(weights=delta.T @ features, biases=delta.sum(axis=0))


def sgd_step(head: Head, grad: HeadGradient, lr: float, momentum: float,
             velocity: MomentumState) -> Tuple[Head, MomentumState]:
    """
    经典（重球）动量 SGD：v ← μ·v + g；w ← w − lr·v

    Returns:
        (更新后的分类头, 更新后的速度)；输入对象不被修改
    """
    if not (np.all(np.isfinite(grad.weights)) and np.all(np.isfinite(grad.biases))):
        raise TrainingDivergedError("梯度包含非有限值，训练终止")
    v_w = momentum * velocity.weights + grad.weights
    v_b = momentum * velocity.biases + grad.biases
    weights = head.weights - lr * v_w
    biases = head.biases - lr * v_b
    if not (np.all(np.isfinite(weights)) and np.all(np.isfinite(biases))):
        raise TrainingDivergedError("参数更新后出现非有限值，训练终止")
    updated = Head(weights=weights, biases=biases, class_order=head.class_order)
    return updated, MomentumState(weights=v_w, biases=v_b)


@dataclass(frozen=True, eq=False)
class LabeledBatch:
    """一个训练小批量：特征与类别标签（背景为 BACKGROUND）"""
    features: np.ndarray
    labels: np.ndarray
    sampled_classes: Tuple[int, ...] = ()

    def __len__(self) -> int:
        return int(self.labels.shape[0])


@dataclass(eq=False)
class ProposalBank:
    """
    训练图像的候选框缓存：每张图像的特征与匹配标签
    """
    features: List[np.ndarray] = field(default_factory=list)
    labels: List[np.ndarray] = field(default_factory=list)

    @classmethod
    def build(cls, world: World, rng: np.random.Generator, iou_threshold: float = 0.5) -> "ProposalBank":
        bank = cls()
        for image in world.train_images:
            proposals = proposal_set_for_image(image, world, rng)
            labels, _, _ = assign_labels(proposals.boxes, image.boxes, image.category_ids, iou_threshold)
            bank.features.append(proposals.features)
            bank.labels.append(labels)
        return bank

    def __len__(self) -> int:
        return len(self.features)

    def batch(self, positions: Sequence[int]) -> LabeledBatch:
        return LabeledBatch(
            features=np.concatenate([self.features[p] for p in positions]),
            labels=np.concatenate([self.labels[p] for p in positions]),
        )

    def all(self) -> LabeledBatch:
        return self.batch(range(len(self)))


def _apply_step(head: Head, velocity: MomentumState, batch: LabeledBatch, lr: float,
                schedule: TrainSchedule, epoch: int, step: int) -> Tuple[Head, MomentumState, float]:
    targets = labels_to_columns(head, batch.labels)
    loss, grad = cross_entropy(head, batch.features, targets)
    if not np.isfinite(loss):
        raise TrainingDivergedError(f"损失为非有限值 (epoch {epoch}, step {step})")
    logger.debug(f"epoch {epoch} step {step} batch={len(batch)} loss={loss:.6f}")
    if schedule.weight_decay > 0:
        grad = HeadGradient(weights=grad.weights + schedule.weight_decay * head.weights, biases=grad.biases)
    try:
        head, velocity = sgd_step(head, grad, lr, schedule.momentum, velocity)
    except TrainingDivergedError as e:
        raise TrainingDivergedError(f"{e} (epoch {epoch}, step {step})") from e
    return head, velocity, loss


def epoch_order(num_images: int, rng: np.random.Generator,
                repeat_factors: Optional[np.ndarray] = None) -> np.ndarray:
    """
    一个 epoch 的图像抽取顺序

    无重复因子（或全为整数）时每张图像出现 factor 次；含小数部分时按随机取整
    决定额外重复，使期望出现次数等于重复因子。
    """
    if repeat_factors is None:
        return rng.permutation(num_images)
    factors = np.asarray(repeat_factors, dtype=float)
    whole = np.floor(factors)
    fraction = factors - whole
    repeats = whole.astype(int)
    if np.any(fraction > 0):
        repeats = repeats + (rng.random(num_images) < fraction).astype(int)
    return rng.permutation(np.repeat(np.arange(num_images), repeats))


def _train_on_bank(world: World, bank: ProposalBank, schedule: TrainSchedule, rng: np.random.Generator,
                   repeat_factors: Optional[np.ndarray], show_progress: bool, name: str) -> Head:
    head = init_head(world.class_order, world.feature_dim, rng, schedule.init_scale)
    velocity = MomentumState.zeros_like(head)
    step = 0
    for epoch in range(schedule.total_epochs):
        lr = schedule.lr_at(epoch)
        order = epoch_order(len(bank), rng, repeat_factors)
        batches = range(0, len(order), schedule.minibatch_size)
        losses = []
        for start in tqdm(batches, desc=f"{name} epoch {epoch + 1}", disable=not show_progress, leave=False):
            batch = bank.batch(order[start:start + schedule.minibatch_size])
            head, velocity, loss = _apply_step(head, velocity, batch, lr, schedule, epoch, step)
            losses.append(loss)
            step += 1
        logger.info(f"[{name}] epoch {epoch + 1}/{schedule.total_epochs} lr={lr:g} loss={np.mean(losses):.4f}")
    return head


def train_standard(world: World, schedule: TrainSchedule, rng: np.random.Generator,
                   iou_threshold: float = 0.5, bank: Optional[ProposalBank] = None,
                   show_progress: bool = False) -> Head:
    """
    标准训练：从头训练分类头，小批量在训练图像列表上均匀抽取

    Args:
        world: 世界
        schedule: 训练日程
        rng: 随机数生成器（同一 seed 结果一致）
        iou_threshold: 候选框与真值匹配阈值
        bank: 预先生成的候选框缓存（为空时用 rng 生成）
        show_progress: 是否显示进度条

    Returns:
        训练好的分类头
    """
    if bank is None:
        bank = ProposalBank.build(world, rng, iou_threshold)
    return _train_on_bank(world, bank, schedule, rng, None, show_progress, "standard")


def sample_class_set(num_categories: int, classes_per_step: int, rng: np.random.Generator) -> np.ndarray:
    """不放回地均匀采样 classes_per_step 个类别下标"""
    k = min(classes_per_step, num_categories)
    return np.sort(rng.choice(num_categories, size=k, replace=False))


def sample_balanced_batch(world: World, cfg: BalancedSamplerConfig, rng: np.random.Generator) -> LabeledBatch:
    """
    类别均衡采样一个小批量

    均匀采样若干个不同类别，每类采样包含它的训练图像；生成候选框并与真值匹配后，
    只保留匹配到所采样类别的候选框，再加上这些类别的真值框，其余前景候选框忽略；
    include_background 时再随机保留至多 background_ratio × 前景数 个背景候选框。
    """
    class_order = world.class_order
    sampled = [class_order[i] for i in sample_class_set(world.num_categories, cfg.classes_per_step, rng)]
    sampled_set = set(sampled)

    fg_features, fg_labels, bg_features = [], [], []
    for category_id in sampled:
        containing = world.images_containing(category_id)
        if not containing:
            raise ValueError(f"类别 {category_id} 没有包含它的训练图像")
        for position in rng.choice(len(containing), size=cfg.images_per_class, replace=True):
            image = world.train_images[containing[int(position)]]
            proposals = proposal_set_for_image(image, world, rng)
            labels, _, _ = assign_labels(proposals.boxes, image.boxes, image.category_ids, cfg.iou_threshold)

            keep = np.isin(labels, sampled)
            fg_features.append(proposals.features[keep])
            fg_labels.append(labels[keep])

            gt_labels = image.category_ids
            gt_keep = np.flatnonzero(np.isin(gt_labels, sampled))
            fg_features.append(class_features(world, gt_labels[gt_keep], np.ones(gt_keep.size), rng))
            fg_labels.append(gt_labels[gt_keep])

            if cfg.include_background:
                bg_features.append(proposals.features[labels == BACKGROUND])

    features = np.concatenate(fg_features)
    labels = np.concatenate(fg_labels)
    if cfg.include_background and bg_features:
        pool = np.concatenate(bg_features)
        budget = min(len(pool), int(np.floor(cfg.background_ratio * len(labels))))
        if budget > 0:
            chosen = np.sort(rng.choice(len(pool), size=budget, replace=False))
            features = np.concatenate([features, pool[chosen]])
            labels = np.concatenate([labels, np.full(budget, BACKGROUND, dtype=int)])
    return LabeledBatch(features=features, labels=labels, sampled_classes=tuple(sorted(sampled_set)))


def balanced_steps_per_epoch(world: World, cfg: BalancedSamplerConfig, schedule: TrainSchedule) -> int:
    """均衡训练一个 epoch 的步数：与标准训练处理相同数量的图像"""
    if schedule.steps_per_epoch is not None:
        return schedule.steps_per_epoch
    images_per_step = cfg.classes_per_step * cfg.images_per_class
    return max(1, -(-len(world.train_images) // images_per_step))


def train_balanced(world: World, base: Optional[Head], cfg: BalancedSamplerConfig, schedule: TrainSchedule,
                   rng: np.random.Generator, show_progress: bool = False) -> Head:
    """
    类别均衡重训练分类头

    新分类头随机初始化（不继承 base 的参数）；base 仅用于校验类别顺序与特征维度。

    Args:
        world: 世界
        base: 原分类头（可为 None）
        cfg: 均衡采样配置
        schedule: 训练日程
        rng: 随机数生成器

    Returns:
        新训练的分类头
    """
    if base is not None:
        if base.class_order != world.class_order or base.feature_dim != world.feature_dim:
            raise ValueError("原分类头与世界的类别顺序或特征维度不一致")
    head = init_head(world.class_order, world.feature_dim, rng, schedule.init_scale)
    velocity = MomentumState.zeros_like(head)
    steps = balanced_steps_per_epoch(world, cfg, schedule)
    step = 0
    for epoch in range(schedule.total_epochs):
        lr = schedule.lr_at(epoch)
        losses = []
        for _ in tqdm(range(steps), desc=f"balanced epoch {epoch + 1}", disable=not show_progress, leave=False):
            batch = sample_balanced_batch(world, cfg, rng)
            head, velocity, loss = _apply_step(head, velocity, batch, lr, schedule, epoch, step)
            losses.append(loss)
            step += 1
        logger.info(f"[balanced] epoch {epoch + 1}/{schedule.total_epochs} lr={lr:g} loss={np.mean(losses):.4f}")
    return head


def repeat_factors(counts: Sequence[int], t: float) -> np.ndarray:
    """
    类别级重复因子 r_c = max(1, sqrt(t / f_c))，f_c = count_c / Σcounts

    Args:
        counts: 各类别训练实例数（必须为正）
        t: 频率阈值，(0,1)

    Returns:
        各类别重复因子
    """
    counts = np.asarray(counts, dtype=float)
    if counts.size == 0 or np.any(counts <= 0):
        raise ValueError("重复因子要求所有类别实例数为正")
    if not (0.0 < t < 1.0):
        raise ValueError(f"阈值 t 必须在 (0,1) 内: {t}")
    freq = counts / counts.sum()
    return np.maximum(1.0, np.sqrt(t / freq))


def image_repeat_factors(world: World, t: float) -> np.ndarray:
    """图像重复因子：图像中所含类别重复因子的最大值（无目标的图像为 1）"""
    factors = repeat_factors(world.train_counts(), t)
    column = {category_id: i for i, category_id in enumerate(world.class_order)}
    result = np.ones(len(world.train_images))
    for position, image in enumerate(world.train_images):
        if image.objects:
            result[position] = max(factors[column[obj.category_id]] for obj in image.objects)
    return result


def train_repeat_sampled(world: World, t: float, schedule: TrainSchedule, rng: np.random.Generator,
                         iou_threshold: float = 0.5, bank: Optional[ProposalBank] = None,
                         show_progress: bool = False) -> Head:
    """
    图像级重复采样训练：与标准训练相同，但图像按重复因子过采样

    t 足够小时所有因子为 1，抽取过程与 train_standard 完全一致。
    """
    if bank is None:
        bank = ProposalBank.build(world, rng, iou_threshold)
    factors = image_repeat_factors(world, t)
    logger.info(f"重复采样: t={t:g}, 平均图像重复因子 {factors.mean():.4f}, 最大 {factors.max():.4f}")
    if np.all(factors == 1.0):
        factors = None
    return _train_on_bank(world, bank, schedule, rng, factors, show_progress, "repeat")


def train_cascade(world: World, schedule: TrainSchedule, rng: np.random.Generator,
                  iou_thresholds: Sequence[float] = (0.5, 0.6, 0.7), balanced: Optional[BalancedSamplerConfig] = None,
                  show_progress: bool = False) -> List[Head]:
    """
    级联模型的各阶段分类头：每个阶段使用更高的匹配 IoU 阈值

    balanced 给定时各阶段用类别均衡采样重训练，否则使用标准训练。
    """
    heads = []
    for stage, threshold in enumerate(iou_thresholds):
        logger.info(f"训练级联第 {stage + 1} 阶段分类头 (IoU 阈值 {threshold})")
        if balanced is None:
            heads.append(train_standard(world, schedule, rng, iou_threshold=threshold, show_progress=show_progress))
        else:
            stage_cfg = balanced.model_copy(update={"iou_threshold": threshold})
            heads.append(train_balanced(world, None, stage_cfg, schedule, rng, show_progress=show_progress))
    return heads


def training_loss(head: Head, batch: LabeledBatch) -> float:
    """在给定批量（通常是全部训练候选框）上的平均交叉熵"""
    loss, _ = cross_entropy(head, batch.features, labels_to_columns(head, batch.labels))
    return loss
