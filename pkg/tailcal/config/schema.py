"""
实验配置的类型化模型

YAML 配置中的每个顶层段落对应一个 pydantic 模型：
world / schedule / sampler / calibration / decode / eval / experiment。
"""

import os
from typing import List, Literal, Optional, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from ..utils import fingerprint
from .loader import ConfigLoader


STRATEGIES = ("only", "avg", "det", "cat", "cat-thr", "cat-scale")
TRAINING_MODES = ("standard", "balanced", "repeat")
PRESETS = ("table1", "table2", "table3", "table4", "table5", "table6", "table7", "table8")


class _Frozen(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    def fingerprint(self) -> str:
        """配置指纹（规范化 JSON 的 sha256）"""
        return fingerprint(self.model_dump(mode="json"))


class WorldConfig(_Frozen):
    """
    合成长尾世界的生成参数

    特征单位：原型与背景特征的每维标准差为 scale / sqrt(D)，
    因此原型范数约为 prototype_scale，背景特征范数约为 background_scale。
    """
    num_categories: int = Field(default=100, ge=1)
    feature_dim: int = Field(default=32, ge=1)
    zipf_exponent: float = Field(default=1.6, ge=0.0)
    total_instances: int = Field(default=20000, ge=1)
    objects_per_image: Tuple[int, int] = (1, 8)
    proposal_recall: float = Field(default=0.9, ge=0.0, le=1.0)
    box_jitter: float = Field(default=0.1, ge=0.0)
    background_per_image: int = Field(default=8, ge=0)
    feature_noise: float = Field(default=18.0, ge=0.0)
    prototype_scale: float = Field(default=3.0, gt=0.0)
    background_scale: float = Field(default=1.0, gt=0.0)
    background_objectness_max: float = Field(default=0.3, ge=0.0, le=1.0)
    box_size: Tuple[float, float] = (0.05, 0.4)
    val_fraction: float = Field(default=0.2, gt=0.0, le=1.0)
    seed: int = Field(default=0, ge=0)

    @model_validator(mode="after")
    def check_ranges(self) -> "WorldConfig":
        lo, hi = self.objects_per_image
        if lo < 1 or hi < lo:
            raise ValueError(f"objects_per_image 区间无效: {self.objects_per_image}")
        smin, smax = self.box_size
        if not (0.0 < smin <= smax < 1.0):
            raise ValueError(f"box_size 区间无效: {self.box_size}")
        if self.total_instances < self.num_categories:
            raise ValueError(
                f"total_instances ({self.total_instances}) 不能小于 num_categories ({self.num_categories})"
            )
        return self


class TrainSchedule(_Frozen):
    """
    SGD 训练日程：按 epoch 分段的学习率、动量、每步图像数
    """
    total_epochs: int = Field(default=12, ge=1)
    lr_stages: List[Tuple[int, float]] = [(0, 0.01), (8, 0.001), (11, 0.0001)]
    momentum: float = Field(default=0.9, ge=0.0, lt=1.0)
    minibatch_size: int = Field(default=8, ge=1)
    weight_decay: float = Field(default=0.0, ge=0.0)
    init_scale: float = Field(default=0.01, ge=0.0)
    steps_per_epoch: Optional[int] = Field(default=None, ge=1)

    @field_validator("lr_stages")
    @classmethod
    def check_stages(cls, stages: List[Tuple[int, float]]) -> List[Tuple[int, float]]:
        if not stages:
            raise ValueError("lr_stages 不能为空")
        if stages[0][0] != 0:
            raise ValueError("第一个学习率阶段必须从 epoch 0 开始")
        boundaries = [b for b, _ in stages]
        if any(b2 <= b1 for b1, b2 in zip(boundaries, boundaries[1:])):
            raise ValueError(f"学习率阶段边界必须严格递增: {boundaries}")
        if any(lr <= 0 for _, lr in stages):
            raise ValueError("学习率必须为正数")
        return stages

    def lr_at(self, epoch: int) -> float:
        """返回第 epoch 个 epoch（从 0 开始）使用的学习率"""
        lr = self.lr_stages[0][1]
        for boundary, rate in self.lr_stages:
            if epoch >= boundary:
                lr = rate
        return lr


class BalancedSamplerConfig(_Frozen):
    """
    类别均衡采样：每步采样若干类别，每个类别采样若干张包含它的图像
    """
    classes_per_step: int = Field(default=16, ge=1)
    images_per_class: int = Field(default=1, ge=1)
    include_background: bool = True
    background_ratio: float = Field(default=1.0, ge=0.0)
    iou_threshold: float = Field(default=0.5, gt=0.0, lt=1.0)


class CalibrationConfig(_Frozen):
    """
    新旧分类头的组合方式
    """
    strategy: Literal["only", "avg", "det", "cat", "cat-thr", "cat-scale"] = "cat"
    bin_edges: Tuple[int, int, int] = (10, 100, 1000)
    tail_bins: List[int] = [0, 1]
    new_head_threshold: float = Field(default=0.05, ge=0.0, le=1.0)
    invert_scale: bool = False
    cascade_iou_thresholds: List[float] = [0.5, 0.6, 0.7]
    cascade_tail_bins: List[int] = [0]
    ensemble_seeds: List[int] = [0, 1]

    @field_validator("bin_edges")
    @classmethod
    def check_edges(cls, edges: Tuple[int, int, int]) -> Tuple[int, int, int]:
        if not (0 < edges[0] < edges[1] < edges[2]):
            raise ValueError(f"bin_edges 必须为严格递增的正整数: {edges}")
        return edges

    @field_validator("tail_bins", "cascade_tail_bins")
    @classmethod
    def check_bins(cls, bins: List[int]) -> List[int]:
        if any(b not in (0, 1, 2, 3) for b in bins):
            raise ValueError(f"bin 编号必须在 0..3 之间: {bins}")
        return sorted(set(bins))

    @field_validator("ensemble_seeds")
    @classmethod
    def check_seeds(cls, seeds: List[int]) -> List[int]:
        if not seeds or any(s < 0 for s in seeds):
            raise ValueError(f"ensemble_seeds 必须为非空的非负整数列表: {seeds}")
        return seeds


class DecodeConfig(_Frozen):
    """
    分数矩阵解码为检测结果的参数
    """
    score_threshold: float = Field(default=0.0, ge=0.0, le=1.0)
    nms_iou: float = Field(default=0.5, gt=0.0, le=1.0)
    max_per_image: int = Field(default=300, ge=1)
    match_iou: float = Field(default=0.5, gt=0.0, lt=1.0)


def _default_iou_thresholds() -> List[float]:
    return [round(0.5 + 0.05 * i, 2) for i in range(10)]


class EvalConfig(_Frozen):
    """
    COCO 风格评估参数
    """
    iou_thresholds: List[float] = Field(default_factory=_default_iou_thresholds)
    recall_points: int = Field(default=101, ge=2)
    max_detections: int = Field(default=300, ge=1)
    proposal_k: int = Field(default=1000, ge=1)

    @field_validator("iou_thresholds")
    @classmethod
    def check_thresholds(cls, thresholds: List[float]) -> List[float]:
        if not thresholds:
            raise ValueError("iou_thresholds 不能为空")
        if any(not (0.0 < t <= 1.0) for t in thresholds):
            raise ValueError(f"IoU 阈值必须在 (0,1] 内: {thresholds}")
        if any(b <= a for a, b in zip(thresholds, thresholds[1:])):
            raise ValueError(f"IoU 阈值必须严格递增: {thresholds}")
        return thresholds

    @property
    def recall_thresholds(self) -> np.ndarray:
        return np.linspace(0.0, 1.0, self.recall_points)


class ExperimentConfig(_Frozen):
    """
    一次完整实验的配置
    """
    world: WorldConfig = Field(default_factory=WorldConfig)
    world_path: Optional[str] = None
    training_mode: Literal["standard", "balanced", "repeat"] = "standard"
    repeat_threshold: float = Field(default=0.01, gt=0.0, lt=1.0)
    schedule: TrainSchedule = Field(default_factory=TrainSchedule)
    sampler: BalancedSamplerConfig = Field(default_factory=BalancedSamplerConfig)
    calibration: CalibrationConfig = Field(default_factory=CalibrationConfig)
    decode: DecodeConfig = Field(default_factory=DecodeConfig)
    eval: EvalConfig = Field(default_factory=EvalConfig)
    output_dir: str = "./output"
    seed: int = Field(default=0, ge=0)

    @field_validator("world_path")
    @classmethod
    def check_world_path(cls, path: Optional[str]) -> Optional[str]:
        if path is not None and not os.path.exists(path):
            raise ValueError(f"世界文件不存在: {path}")
        return path

    @classmethod
    def from_loader(cls, loader: ConfigLoader) -> "ExperimentConfig":
        """
        从 ConfigLoader 文档构建实验配置

        Args:
            loader: 已加载的配置

        Returns:
            ExperimentConfig 实例
        """
        sections = {}
        for name in ("world", "schedule", "sampler", "calibration", "decode", "eval"):
            value = loader.get(name)
            if value is not None:
                sections[name] = value
        experiment = dict(loader.get("experiment", {}) or {})
        return cls(**sections, **experiment)
