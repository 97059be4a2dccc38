"""
合成长尾检测世界

生成类别（Zipf 分布的实例数）、类别原型特征、训练/验证图像及其真值框，
并模拟 RPN 生成的候选框（proposal）及其冻结特征。
世界生成是 (config, seed) 的纯函数，生成后不再修改。
"""

import logging
from dataclasses import dataclass, field
from enum import IntEnum
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from ..config.schema import WorldConfig
from ..utils import derive_rng
from .twostage import iou_matrix

logger = logging.getLogger("tailcal.core.world")

Box = Tuple[float, float, float, float]

DEFAULT_BIN_EDGES: Tuple[int, int, int] = (10, 100, 1000)
MIN_BOX_EXTENT = 1e-3
MIN_CATEGORIES = 4


class WorldConfigError(ValueError):
    """配置无法满足实例数约束"""


class BinId(IntEnum):
    """按训练实例数划分的四个类别区间"""
    RARE = 0      # (0, 10)
    FEW = 1       # [10, 100)
    MANY = 2      # [100, 1000)
    FREQUENT = 3  # [1000, -]

    @property
    def label(self) -> str:
        return BIN_LABELS[int(self)]


BIN_LABELS = ("(0,10)", "[10,100)", "[100,1000)", "[1000,-]")


def bin_labels(edges: Sequence[int] = DEFAULT_BIN_EDGES) -> Tuple[str, str, str, str]:
    """给定区间边界的四个区间名称"""
    e1, e2, e3 = edges
    return (f"(0,{e1})", f"[{e1},{e2})", f"[{e2},{e3})", f"[{e3},-]")


def assign_bin(train_count: int, edges: Sequence[int] = DEFAULT_BIN_EDGES) -> BinId:
    """
    根据训练实例数确定类别区间

    区间左闭右开：count == 10 属于 [10,100)，count == 1000 属于 [1000,-]；
    count == 0 归入最尾部区间，使该映射对所有非负整数成立。
    """
    if train_count < 0:
        raise ValueError(f"训练实例数不能为负: {train_count}")
    e1, e2, e3 = edges
    if train_count < e1:
        return BinId.RARE
    if train_count < e2:
        return BinId.FEW
    if train_count < e3:
        return BinId.MANY
    return BinId.FREQUENT


@dataclass(frozen=True)
class Category:
    id: int
    train_count: int
    bin: BinId
    val_count: int = 0

    @property
    def in_val(self) -> bool:
        return self.val_count > 0


@dataclass(frozen=True)
class GtObject:
    box: Box
    category_id: int

    def __post_init__(self):
        x1, y1, x2, y2 = self.box
        if not (x2 > x1 and y2 > y1):
            raise ValueError(f"真值框必须有正的宽高: {self.box}")


@dataclass(frozen=True)
class SceneImage:
    id: int
    objects: Tuple[GtObject, ...]

    @property
    def boxes(self) -> np.ndarray:
        if not self.objects:
            return np.zeros((0, 4))
        return np.array([obj.box for obj in self.objects], dtype=float)

    @property
    def category_ids(self) -> np.ndarray:
        return np.array([obj.category_id for obj in self.objects], dtype=int)


@dataclass(frozen=True, eq=False)
class Proposal:
    box: Box
    feature: np.ndarray
    objectness: float
    image_id: int
    gt_index: Optional[int] = None  # 生成该候选框的真值下标；背景候选框为 None


@dataclass(frozen=True, eq=False)
class ProposalSet:
    """
    一组候选框的列式存储，行顺序即候选框下标
    """
    boxes: np.ndarray
    features: np.ndarray
    objectness: np.ndarray
    image_ids: np.ndarray
    gt_indices: np.ndarray  # -1 表示背景候选框

    def __len__(self) -> int:
        return int(self.boxes.shape[0])

    @classmethod
    def empty(cls, feature_dim: int) -> "ProposalSet":
        return cls(
            boxes=np.zeros((0, 4)),
            features=np.zeros((0, feature_dim)),
            objectness=np.zeros(0),
            image_ids=np.zeros(0, dtype=int),
            gt_indices=np.zeros(0, dtype=int),
        )

    @classmethod
    def from_proposals(cls, proposals: Sequence[Proposal], feature_dim: Optional[int] = None) -> "ProposalSet":
        if not proposals:
            if feature_dim is None:
                raise ValueError("空候选框序列需要指定 feature_dim")
            return cls.empty(feature_dim)
        return cls(
            boxes=np.array([p.box for p in proposals], dtype=float),
            features=np.stack([np.asarray(p.feature, dtype=float) for p in proposals]),
            objectness=np.array([p.objectness for p in proposals], dtype=float),
            image_ids=np.array([p.image_id for p in proposals], dtype=int),
            gt_indices=np.array([-1 if p.gt_index is None else p.gt_index for p in proposals], dtype=int),
        )

    @classmethod
    def concatenate(cls, parts: Sequence["ProposalSet"], feature_dim: int) -> "ProposalSet":
        if not parts:
            return cls.empty(feature_dim)
        return cls(
            boxes=np.concatenate([p.boxes for p in parts]),
            features=np.concatenate([p.features for p in parts]),
            objectness=np.concatenate([p.objectness for p in parts]),
            image_ids=np.concatenate([p.image_ids for p in parts]),
            gt_indices=np.concatenate([p.gt_indices for p in parts]),
        )

    def select(self, indices: np.ndarray) -> "ProposalSet":
        return ProposalSet(
            boxes=self.boxes[indices],
            features=self.features[indices],
            objectness=self.objectness[indices],
            image_ids=self.image_ids[indices],
            gt_indices=self.gt_indices[indices],
        )

    def to_proposals(self) -> List[Proposal]:
        return [
            Proposal(
                box=tuple(float(v) for v in self.boxes[i]),
                feature=self.features[i],
                objectness=float(self.objectness[i]),
                image_id=int(self.image_ids[i]),
                gt_index=None if self.gt_indices[i] < 0 else int(self.gt_indices[i]),
            )
            for i in range(len(self))
        ]


@dataclass(frozen=True, eq=False)
class World:
    categories: Tuple[Category, ...]
    prototypes: np.ndarray
    train_images: Tuple[SceneImage, ...]
    val_images: Tuple[SceneImage, ...]
    config: WorldConfig
    _train_index: Dict[int, Tuple[int, ...]] = field(init=False, repr=False)
    _images_by_id: Dict[int, SceneImage] = field(init=False, repr=False)

    def __post_init__(self):
        index: Dict[int, List[int]] = {c.id: [] for c in self.categories}
        for position, image in enumerate(self.train_images):
            for category_id in sorted({obj.category_id for obj in image.objects}):
                if category_id not in index:
                    raise ValueError(f"图像 {image.id} 引用了未知类别 {category_id}")
                index[category_id].append(position)
        object.__setattr__(self, "_train_index", {k: tuple(v) for k, v in index.items()})
        by_id = {image.id: image for image in self.train_images}
        by_id.update({image.id: image for image in self.val_images})
        object.__setattr__(self, "_images_by_id", by_id)

    @property
    def num_categories(self) -> int:
        return len(self.categories)

    @property
    def feature_dim(self) -> int:
        return int(self.prototypes.shape[1])

    @property
    def class_order(self) -> Tuple[int, ...]:
        return tuple(c.id for c in self.categories)

    def train_counts(self) -> np.ndarray:
        return np.array([c.train_count for c in self.categories], dtype=int)

    def images_containing(self, category_id: int) -> Tuple[int, ...]:
        """包含该类别的训练图像在 train_images 中的位置"""
        return self._train_index.get(category_id, ())

    def image(self, image_id: int) -> SceneImage:
        if image_id not in self._images_by_id:
            raise KeyError(f"图像不属于该世界: {image_id}")
        return self._images_by_id[image_id]


def sample_counts(num_categories: int, zipf_exponent: float, total_instances: int) -> List[int]:
    """
    按 Zipf 定律分配各类别的训练实例数

    排名 r 的类别质量正比于 r^(-s)；归一化后四舍五入，每类至少 1 个，
    余数（可正可负）记到排名第一的类别上。

    计数完全由 (C, s, N) 决定，不需要随机数生成器；同一组参数总是得到同一组计数。
    接受任意 C >= 1（例如 C=2, s=0, N=10 得到 [5, 5]）。C >= 4 的下限由 generate_world 检查，
    某个区间为空时 generate_world 只记录警告，需要时请调大 N。

    Args:
        num_categories: 类别数 C
        zipf_exponent: 指数 s（0 表示均匀分布）
        total_instances: 实例总数 N

    Returns:
        按排名排列的 C 个正整数，总和为 N
    """
    if num_categories < 1:
        raise ValueError(f"类别数必须为正: {num_categories}")
    if total_instances < num_categories:
        raise ValueError(f"实例总数 {total_instances} 小于类别数 {num_categories}")
    if zipf_exponent < 0:
        raise ValueError(f"Zipf 指数不能为负: {zipf_exponent}")

    ranks = np.arange(1, num_categories + 1, dtype=float)
    mass = ranks ** (-float(zipf_exponent))
    raw = total_instances * mass / mass.sum()
    counts = np.maximum(np.floor(raw + 0.5).astype(np.int64), 1)
    counts[0] += total_instances - int(counts.sum())
    if counts[0] < 1:
        raise ValueError("无法在保证每类至少一个实例的前提下分配实例数，请增大实例总数")
    return [int(c) for c in counts]


def _layout_images(counts: np.ndarray, cfg: WorldConfig, rng: np.random.Generator,
                   start_id: int) -> Tuple[SceneImage, ...]:
    """
    把各类别的实例随机分配到图像中，实例数严格等于 counts
    """
    labels = rng.permutation(np.repeat(np.arange(len(counts)), counts))
    total = int(labels.size)
    if total == 0:
        return ()

    smin, smax = cfg.box_size
    widths = rng.uniform(smin, smax, size=total)
    heights = rng.uniform(smin, smax, size=total)
    x1 = rng.uniform(0.0, 1.0 - widths)
    y1 = rng.uniform(0.0, 1.0 - heights)
    x2 = np.minimum(x1 + widths, 1.0)
    y2 = np.minimum(y1 + heights, 1.0)

    lo, hi = cfg.objects_per_image
    sizes = rng.integers(lo, hi + 1, size=total // lo + 1)
    ends = np.cumsum(sizes)
    n_images = int(np.searchsorted(ends, total)) + 1
    bounds = np.concatenate([[0], np.minimum(ends[:n_images], total)])

    images = []
    for k in range(n_images):
        objects = tuple(
            GtObject(
                box=(float(x1[i]), float(y1[i]), float(x2[i]), float(y2[i])),
                category_id=int(labels[i]),
            )
            for i in range(bounds[k], bounds[k + 1])
        )
        images.append(SceneImage(id=start_id + k, objects=objects))
    return tuple(images)


def generate_world(cfg: WorldConfig) -> World:
    """
    根据配置生成合成长尾世界（同一配置与 seed 结果逐位一致）

    Args:
        cfg: 世界配置

    Returns:
        World 实例
    """
    if cfg.num_categories < MIN_CATEGORIES:
        raise WorldConfigError(f"类别数至少为 {MIN_CATEGORIES}: {cfg.num_categories}")

    rng = derive_rng(cfg.seed, "world")
    counts = np.array(sample_counts(cfg.num_categories, cfg.zipf_exponent, cfg.total_instances))
    val_counts = np.floor(counts * cfg.val_fraction + 0.5).astype(np.int64)

    scale = cfg.prototype_scale / np.sqrt(cfg.feature_dim)
    prototypes = rng.standard_normal((cfg.num_categories, cfg.feature_dim)) * scale

    train_images = _layout_images(counts, cfg, rng, start_id=0)
    val_images = _layout_images(val_counts, cfg, rng, start_id=len(train_images))

    categories = tuple(
        Category(id=c, train_count=int(counts[c]), bin=assign_bin(int(counts[c])), val_count=int(val_counts[c]))
        for c in range(cfg.num_categories)
    )
    occupied = {c.bin for c in categories}
    if len(occupied) < len(BinId):
        missing = [b.label for b in BinId if b not in occupied]
        logger.warning(f"部分区间没有类别: {missing}，如需四个区间均非空请增大 total_instances")

    world = World(
        categories=categories,
        prototypes=prototypes,
        train_images=train_images,
        val_images=val_images,
        config=cfg,
    )
    logger.info(
        f"生成世界: {cfg.num_categories} 类, {len(train_images)} 张训练图像, "
        f"{len(val_images)} 张验证图像, {int(counts.sum())} 个训练实例"
    )
    return world


def class_features(world: World, category_ids: np.ndarray, ious: np.ndarray,
                   rng: np.random.Generator) -> np.ndarray:
    """
    前景特征：原型 + 球面噪声，噪声幅度按 sigma 和 (1 - IoU) 缩放

    定位越差（IoU 越低）特征越嘈杂；IoU 为 1 时特征恰为原型。
    """
    cfg = world.config
    noise = rng.standard_normal((len(category_ids), world.feature_dim)) / np.sqrt(world.feature_dim)
    scale = (cfg.feature_noise * (1.0 - np.asarray(ious, dtype=float)))[:, None]
    return world.prototypes[np.asarray(category_ids, dtype=int)] + scale * noise


def _jitter_boxes(boxes: np.ndarray, jitter: float, rng: np.random.Generator) -> np.ndarray:
    widths = boxes[:, 2] - boxes[:, 0]
    heights = boxes[:, 3] - boxes[:, 1]
    scale = np.stack([widths, heights, widths, heights], axis=1)
    jittered = boxes + jitter * scale * rng.standard_normal(boxes.shape)
    jittered = np.clip(jittered, 0.0, 1.0)
    for lo, hi in ((0, 2), (1, 3)):
        narrow = jittered[:, hi] - jittered[:, lo] < MIN_BOX_EXTENT
        if np.any(narrow):
            upper = np.minimum(1.0, jittered[narrow, lo] + MIN_BOX_EXTENT)
            jittered[narrow, hi] = upper
            jittered[narrow, lo] = upper - MIN_BOX_EXTENT
    return jittered


def _random_boxes(n: int, cfg: WorldConfig, rng: np.random.Generator) -> np.ndarray:
    smin, smax = cfg.box_size
    widths = rng.uniform(smin, smax, size=n)
    heights = rng.uniform(smin, smax, size=n)
    x1 = rng.uniform(0.0, 1.0 - widths)
    y1 = rng.uniform(0.0, 1.0 - heights)
    return np.stack([x1, y1, np.minimum(x1 + widths, 1.0), np.minimum(y1 + heights, 1.0)], axis=1)


def proposal_set_for_image(image: SceneImage, world: World, rng: np.random.Generator) -> ProposalSet:
    """
    模拟单张图像的 RPN 输出（列式）

    每个真值以概率 p_rec 产生一个抖动后的候选框，特征为原型加定位相关噪声；
    另外产生 B 个随机背景候选框，特征取自背景分布（不含原型）。
    """
    cfg = world.config
    gt_boxes = image.boxes
    gt_labels = image.category_ids
    n_gt = len(image.objects)

    recalled = np.flatnonzero(rng.random(n_gt) < cfg.proposal_recall)
    pos_boxes = _jitter_boxes(gt_boxes[recalled], cfg.box_jitter, rng)
    if recalled.size:
        own_iou = np.diagonal(iou_matrix(pos_boxes, gt_boxes[recalled])).copy()
        best_iou = iou_matrix(pos_boxes, gt_boxes).max(axis=1)
    else:
        own_iou = np.zeros(0)
        best_iou = np.zeros(0)
    pos_features = class_features(world, gt_labels[recalled], own_iou, rng)

    n_bg = cfg.background_per_image
    bg_boxes = _random_boxes(n_bg, cfg, rng)
    bg_features = rng.standard_normal((n_bg, world.feature_dim)) * (cfg.background_scale / np.sqrt(world.feature_dim))
    bg_objectness = rng.uniform(0.0, cfg.background_objectness_max, size=n_bg)

    return ProposalSet(
        boxes=np.concatenate([pos_boxes, bg_boxes]),
        features=np.concatenate([pos_features, bg_features]),
        objectness=np.concatenate([best_iou, bg_objectness]),
        image_ids=np.full(recalled.size + n_bg, image.id, dtype=int),
        gt_indices=np.concatenate([recalled, np.full(n_bg, -1)]).astype(int),
    )


def generate_proposals(image: SceneImage, world: World, rng: np.random.Generator) -> List[Proposal]:
    """
    模拟单张图像的 RPN 候选框

    Args:
        image: 属于该世界的图像
        world: 世界
        rng: 随机数生成器

    Returns:
        候选框列表（先前景后背景）
    """
    world.image(image.id)
    return proposal_set_for_image(image, world, rng).to_proposals()


def generate_proposal_set(images: Sequence[SceneImage], world: World, rng: np.random.Generator) -> ProposalSet:
    """对一组图像依次生成候选框并按图像顺序拼接"""
    parts = [proposal_set_for_image(image, world, rng) for image in images]
    return ProposalSet.concatenate(parts, world.feature_dim)


def summarize_world(world: World, edges: Sequence[int] = DEFAULT_BIN_EDGES) -> Dict[str, Dict[str, int]]:
    """
    按区间统计类别数与实例数（训练集、验证集）
    """
    labels = bin_labels(edges)
    summary = {
        "train_classes": {label: 0 for label in labels},
        "val_classes": {label: 0 for label in labels},
        "train_instances": {label: 0 for label in labels},
        "val_instances": {label: 0 for label in labels},
    }
    for category in world.categories:
        label = labels[int(assign_bin(category.train_count, edges))]
        summary["train_classes"][label] += 1
        summary["train_instances"][label] += category.train_count
        if category.in_val:
            summary["val_classes"][label] += 1
            summary["val_instances"][label] += category.val_count
    return summary
