"""
文件格式：世界 JSON、类别计数 CSV、检测结果 JSON Lines、分类头检查点、评估报告
"""

import csv
import io
import json
import logging
import os
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, ValidationError, field_validator

from ..config.schema import WorldConfig
from ..utils import fingerprint
from .evaluation import EvalReport
from .heads import Head
from .twostage import Detection
from .world import Category, GtObject, SceneImage, World, assign_bin

logger = logging.getLogger("tailcal.core.io")

PathLike = Union[str, Path]


class DetectionFormatError(ValueError):
    """检测结果记录格式错误"""


class DetectionRecord(BaseModel):
    """COCO 结果风格的检测记录，bbox 为角点坐标 [x1, y1, x2, y2]"""
    model_config = ConfigDict(extra="ignore", strict=False)

    image_id: int
    category_id: int
    bbox: Tuple[float, float, float, float]
    score: float

    @field_validator("score")
    @classmethod
    def finite_score(cls, v: float) -> float:
        if not np.isfinite(v):
            raise ValueError("score 必须为有限值")
        return v

    @field_validator("category_id")
    @classmethod
    def foreground(cls, v: int) -> int:
        if v < 0:
            raise ValueError("category_id 必须为前景类别")
        return v


def _write_text(path: PathLike, text: str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        f.write(text)


# ---------------------------------------------------------------- 世界

def world_to_dict(world: World) -> Dict[str, Any]:
    return {
        "config": world.config.model_dump(mode="json"),
        "categories": [
            {"id": c.id, "train_count": c.train_count, "val_count": c.val_count}
            for c in world.categories
        ],
        "prototypes": world.prototypes.tolist(),
        "train_images": [_image_to_dict(image) for image in world.train_images],
        "val_images": [_image_to_dict(image) for image in world.val_images],
    }


def _image_to_dict(image: SceneImage) -> Dict[str, Any]:
    return {
        "id": image.id,
        "objects": [{"box": list(obj.box), "category_id": obj.category_id} for obj in image.objects],
    }


def _image_from_dict(payload: Dict[str, Any]) -> SceneImage:
    return SceneImage(
        id=int(payload["id"]),
        objects=tuple(
            GtObject(box=tuple(float(v) for v in obj["box"]), category_id=int(obj["category_id"]))
            for obj in payload["objects"]
        ),
    )


def world_from_dict(payload: Dict[str, Any]) -> World:
    config = WorldConfig(**payload["config"])
    categories = tuple(
        Category(
            id=int(c["id"]),
            train_count=int(c["train_count"]),
            bin=assign_bin(int(c["train_count"])),
            val_count=int(c.get("val_count", 0)),
        )
        for c in payload["categories"]
    )
    prototypes = np.array(payload["prototypes"], dtype=float)
    if prototypes.shape != (len(categories), config.feature_dim):
        raise ValueError(f"原型矩阵形状 {prototypes.shape} 与类别数/特征维度不一致")
    world = World(
        categories=categories,
        prototypes=prototypes,
        train_images=tuple(_image_from_dict(i) for i in payload["train_images"]),
        val_images=tuple(_image_from_dict(i) for i in payload["val_images"]),
        config=config,
    )
    known = set(world.class_order)
    for image in world.train_images + world.val_images:
        for obj in image.objects:
            if obj.category_id not in known:
                raise ValueError(f"图像 {image.id} 引用了未知类别 {obj.category_id}")
    return world


def save_world(world: World, path: PathLike) -> None:
    _write_text(path, json.dumps(world_to_dict(world)))
    logger.info(f"世界已保存: {path}")


def load_world(path: PathLike) -> World:
    if not os.path.exists(path):
        raise FileNotFoundError(f"世界文件不存在: {path}")
    with open(path, "r", encoding="utf-8") as f:
        return world_from_dict(json.load(f))


# ---------------------------------------------------------------- 类别计数

def read_count_file(path: PathLike) -> List[Category]:
    """
    读取类别计数 CSV：表头 category_id,count，可选第三列 val_count

    用于对真实数据集的类别做区间划分。
    """
    if not os.path.exists(path):
        raise FileNotFoundError(f"计数文件不存在: {path}")
    categories = []
    with open(path, "r", encoding="utf-8", newline="") as f:
        reader = csv.DictReader(f)
        if reader.fieldnames is None or not {"category_id", "count"} <= set(reader.fieldnames):
            raise ValueError(f"计数文件表头必须包含 category_id,count: {path}")
        for line_no, row in enumerate(reader, start=2):
            try:
                count = int(row["count"])
                category_id = int(row["category_id"])
                val_count = int(row["val_count"]) if row.get("val_count") not in (None, "") else 0
            except (TypeError, ValueError) as e:
                raise ValueError(f"line {line_no}: 无法解析计数行 {row}") from e
            if count < 0:
                raise ValueError(f"line {line_no}: count 不能为负")
            categories.append(Category(id=category_id, train_count=count, bin=assign_bin(count), val_count=val_count))
    ids = [c.id for c in categories]
    if len(set(ids)) != len(ids):
        raise ValueError(f"计数文件中存在重复的 category_id: {path}")
    return categories


# ---------------------------------------------------------------- 检测结果

def detection_to_record(det: Detection) -> Dict[str, Any]:
    return {
        "image_id": det.image_id,
        "category_id": det.category_id,
        "bbox": [float(v) for v in det.box],
        "score": float(det.score),
    }


def export_detections(dets: Sequence[Detection], path: PathLike) -> None:
    """按 JSON Lines 写出检测结果（浮点数以完整精度写出）"""
    lines = [json.dumps(detection_to_record(d), sort_keys=True) for d in dets]
    _write_text(path, "".join(line + "\n" for line in lines))


def _record_error(where: str, error: ValidationError) -> DetectionFormatError:
    problems = []
    for item in error.errors():
        field = ".".join(str(part) for part in item["loc"]) or "<record>"
        if item["type"] == "missing":
            problems.append(f"缺少字段 '{field}'")
        else:
            problems.append(f"字段 '{field}' 无效: {item['msg']}")
    return DetectionFormatError(f"{where}: " + "; ".join(problems))


def _parse_record(payload: Any, where: str) -> Detection:
    """where 是错误信息中的位置前缀：JSON Lines 用 line N，数组格式用 record N"""
    if not isinstance(payload, dict):
        raise DetectionFormatError(f"{where}: 记录必须是 JSON 对象")
    try:
        record = DetectionRecord.model_validate(payload)
    except ValidationError as e:
        raise _record_error(where, e) from e
    x1, y1, x2, y2 = record.bbox
    if not (x2 > x1 and y2 > y1):
        raise DetectionFormatError(f"{where}: 字段 'bbox' 无效: 需要 x2 > x1 且 y2 > y1")
    return Detection(image_id=record.image_id, box=record.bbox, category_id=record.category_id, score=record.score)


def import_detections(path: PathLike) -> List[Detection]:
    """
    读取检测结果：JSON Lines（每行一条记录），或 COCO 风格的 JSON 数组

    格式错误的记录会被拒绝，错误信息指明字段，并带行号（数组格式为记录序号）。
    """
    if not os.path.exists(path):
        raise FileNotFoundError(f"检测结果文件不存在: {path}")
    with open(path, "r", encoding="utf-8") as f:
        text = f.read()

    stripped = text.lstrip()
    if stripped.startswith("["):
        try:
            payload = json.loads(text)
        except json.JSONDecodeError as e:
            raise DetectionFormatError(f"line {e.lineno}: JSON 解析失败: {e.msg}") from e
        # 数组格式按记录序号（从 1 开始）定位
        return [_parse_record(item, f"record {index}") for index, item in enumerate(payload, start=1)]

    detections = []
    for line_no, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        try:
            payload = json.loads(line)
        except json.JSONDecodeError as e:
            raise DetectionFormatError(f"line {line_no}: JSON 解析失败: {e.msg}") from e
        detections.append(_parse_record(payload, f"line {line_no}"))
    return detections


# ---------------------------------------------------------------- 分类头检查点

def save_head(head: Head, path: PathLike, config_fingerprint: str = "", meta: Optional[Dict[str, Any]] = None) -> None:
    payload = {
        "class_order": list(head.class_order),
        "weights": head.weights.tolist(),
        "biases": head.biases.tolist(),
        "fingerprint": config_fingerprint,
        "meta": meta or {},
    }
    _write_text(path, json.dumps(payload, sort_keys=True))


def load_head(path: PathLike) -> Tuple[Head, Dict[str, Any]]:
    """读取分类头检查点，返回 (Head, 附加信息)"""
    if not os.path.exists(path):
        raise FileNotFoundError(f"分类头检查点不存在: {path}")
    with open(path, "r", encoding="utf-8") as f:
        payload = json.load(f)
    head = Head(
        weights=np.array(payload["weights"], dtype=float),
        biases=np.array(payload["biases"], dtype=float),
        class_order=tuple(int(c) for c in payload["class_order"]),
    )
    return head, {"fingerprint": payload.get("fingerprint", ""), "meta": payload.get("meta", {})}


# ---------------------------------------------------------------- 报告

REPORT_COLUMNS = ("category_id", "train_count", "val_count", "bin", "ap")


def write_report(report: EvalReport, categories: Sequence[Category], out_dir: PathLike,
                 edges: Sequence[int] = (10, 100, 1000)) -> List[str]:
    """
    写出 report_<name>.csv（逐类别）与 report_<name>.json（摘要）

    Returns:
        写出的文件名列表
    """
    from .world import bin_labels

    out_dir = Path(out_dir)
    labels = bin_labels(edges)
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator="\n")
    writer.writerow(REPORT_COLUMNS)
    for category in sorted(categories, key=lambda c: c.id):
        ap = report.per_category_ap.get(category.id)
        writer.writerow([
            str(category.id),
            str(category.train_count),
            str(category.val_count),
            labels[int(assign_bin(category.train_count, edges))],
            "" if ap is None else repr(float(ap)),
        ])
    csv_name = f"report_{report.name}.csv"
    json_name = f"report_{report.name}.json"
    _write_text(out_dir / csv_name, buffer.getvalue())
    _write_text(out_dir / json_name, json.dumps(report.summary(), sort_keys=True, indent=2) + "\n")
    return [csv_name, json_name]


def write_manifest(out_dir: PathLike, payload: Dict[str, Any]) -> str:
    """写出 manifest.json（不含时间戳，保证重复运行逐字节一致）"""
    body = dict(payload)
    body["manifest_fingerprint"] = fingerprint(payload)
    _write_text(Path(out_dir) / "manifest.json", json.dumps(body, sort_keys=True, indent=2) + "\n")
    return "manifest.json"
