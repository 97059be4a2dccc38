"""
实验流水线组件

数据字典约定：
    config          ExperimentConfig
    world           World
    val_proposals   验证集候选框（ProposalSet）
    banks           {匹配阈值: ProposalBank}，训练集候选框缓存
    heads           {名称: Head 或 级联的 Head 列表}
    scores          {名称: ScoreMatrix}
    detections      {名称: Detection 列表}
    reports         EvalReport 列表（按生成顺序）
    report_categories  {报告名: 类别表}，对照世界的报告使用自己的类别表
    companions      {前缀: 对照世界配置与摘要}
    out_dir         输出目录
"""

import logging
import platform
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence

import numpy as np

from ..config.schema import ExperimentConfig
from ..core.calib import BinSplit, Strategy, cascade_scores, combine, combine_detections_det, ensemble_models
from ..core.evaluation import count_report, evaluate_detections, oracle_gt_label_eval, proposal_recall
from ..core.heads import (
    Head,
    ProposalBank,
    forward,
    train_balanced,
    train_cascade,
    train_repeat_sampled,
    train_standard,
)
from ..core.io import load_world, read_count_file, save_head, write_manifest, write_report
from ..core.twostage import decode_detections
from ..core.world import generate_proposal_set, generate_world, summarize_world
from ..utils import derive_rng
from .base import MissingInputError, Pipeline, PipelineComponent

logger = logging.getLogger("tailcal.pipeline.components")

HEAD_MODES = ("standard", "balanced", "repeat", "cascade", "cascade-balanced")


def _experiment(data: Dict[str, Any]) -> ExperimentConfig:
    cfg = data.get("config")
    if not isinstance(cfg, ExperimentConfig):
        raise ValueError("数据字典中缺少 ExperimentConfig（键 'config'）")
    return cfg


class WorldComponent(PipelineComponent):
    """
    加载冻结的世界文件，或按配置生成世界
    """

    requires = ("config",)

    def run(self, data: Dict[str, Any]) -> Dict[str, Any]:
        cfg = _experiment(data)
        if data.get("world") is None:
            if cfg.world_path:
                logger.info(f"加载世界文件: {cfg.world_path}")
                data["world"] = load_world(cfg.world_path)
            else:
                data["world"] = generate_world(cfg.world)
        data["world_summary"] = summarize_world(data["world"], cfg.calibration.bin_edges)
        return data


class ProposalComponent(PipelineComponent):
    """
    生成验证集候选框；所有分类头在同一组候选框上打分
    """

    requires = ("config", "world")

    def run(self, data: Dict[str, Any]) -> Dict[str, Any]:
        cfg = _experiment(data)
        world = data["world"]
        rng = derive_rng(cfg.seed, "val-proposals")
        data["val_proposals"] = generate_proposal_set(world.val_images, world, rng)
        logger.info(f"验证集候选框: {len(data['val_proposals'])} 个")
        return data


class TrainHeadComponent(PipelineComponent):
    """
    训练一个分类头（或一组级联分类头），结果存入 data['heads'][key]

    config:
        key: 分类头名称
        mode: standard / balanced / repeat / cascade / cascade-balanced
        seed: 模型种子（默认使用实验种子）
    """

    requires = ("config", "world")

    def _setup(self) -> None:
        mode = self.config.get("mode", "standard")
        if mode not in HEAD_MODES:
            raise ValueError(f"无效的训练方式: {mode}. 支持: {list(HEAD_MODES)}")
        self.key = self.config.get("key", mode)
        self.mode = mode

    def _bank(self, data: Dict[str, Any], cfg: ExperimentConfig) -> ProposalBank:
        threshold = cfg.decode.match_iou
        banks = data.setdefault("banks", {})
        if threshold not in banks:
            rng = derive_rng(cfg.seed, "train-proposals", f"{threshold:.4f}")
            banks[threshold] = ProposalBank.build(data["world"], rng, threshold)
        return banks[threshold]

    def run(self, data: Dict[str, Any]) -> Dict[str, Any]:
        cfg = _experiment(data)
        world = data["world"]
        seed = self.config.get("seed", cfg.seed)
        rng = derive_rng(seed, "train", self.mode)
        show_progress = bool(data.get("show_progress", False))
        heads = data.setdefault("heads", {})

        if self.mode == "standard":
            heads[self.key] = train_standard(world, cfg.schedule, rng, cfg.decode.match_iou,
                                             bank=self._bank(data, cfg), show_progress=show_progress)
        elif self.mode == "repeat":
            heads[self.key] = train_repeat_sampled(world, cfg.repeat_threshold, cfg.schedule, rng,
                                                   cfg.decode.match_iou, bank=self._bank(data, cfg),
                                                   show_progress=show_progress)
        elif self.mode == "balanced":
            base = heads.get(self.config.get("base", ""))
            heads[self.key] = train_balanced(world, base, cfg.sampler, cfg.schedule, rng, show_progress)
        else:
            balanced = cfg.sampler if self.mode == "cascade-balanced" else None
            heads[self.key] = train_cascade(world, cfg.schedule, rng, cfg.calibration.cascade_iou_thresholds,
                                            balanced=balanced, show_progress=show_progress)
        logger.info(f"分类头 {self.key} 训练完成 ({self.mode})")
        return data


class ScoreComponent(PipelineComponent):
    """
    用分类头为验证集候选框打分；级联分类头取各阶段平均
    """

    requires = ("val_proposals",)

    def run(self, data: Dict[str, Any]) -> Dict[str, Any]:
        head_key = self.config["head"]
        score_key = self.config.get("key", head_key)
        head = self.require(data, "heads", head_key)
        features = data["val_proposals"].features
        if isinstance(head, Head):
            scores = forward(head, features)
        else:
            scores = cascade_scores(head, features)
        data.setdefault("scores", {})[score_key] = scores
        return data


class CalibrateComponent(PipelineComponent):
    """
    组合原分类头与新分类头

    config:
        strategy: 组合策略（默认取配置中的 calibration.strategy）
        orig / new: 两个分数矩阵的名称
        key: 输出名称（默认 rhead-<strategy>）
        tail_bins: 新分类头负责的区间编号（默认取配置中的 calibration.tail_bins）
    """

    requires = ("config", "world", "val_proposals")

    def run(self, data: Dict[str, Any]) -> Dict[str, Any]:
        cfg = _experiment(data)
        calibration = cfg.calibration
        strategy = Strategy(self.config.get("strategy", calibration.strategy))
        key = self.config.get("key", strategy.report_name)
        tail_bins = self.config.get("tail_bins", calibration.tail_bins)
        split = BinSplit.from_categories(data["world"].categories, tail_bins, calibration.bin_edges)

        orig = self.require(data, "scores", self.config["orig"])
        new = self.require(data, "scores", self.config["new"])
        logger.info(f"组合策略 {strategy.value}: 新分类头负责 {len(split.tail_classes)} 个尾部类别")

        if strategy is Strategy.DET:
            proposals = data["val_proposals"]
            dets_orig = _decode(proposals, orig, cfg, cfg.decode.score_threshold)
            dets_new = _decode(proposals, new, cfg, cfg.decode.score_threshold)
            data.setdefault("detections", {})[key] = combine_detections_det(
                dets_orig, dets_new, split, per_image_cap=cfg.decode.max_per_image
            )
        else:
            data.setdefault("scores", {})[key] = combine(
                strategy, orig, new, split,
                threshold=calibration.new_head_threshold,
                invert_scale=calibration.invert_scale,
            )
        return data


class EnsembleComponent(PipelineComponent):
    """多模型集成：同一组候选框上的分数取平均"""

    def run(self, data: Dict[str, Any]) -> Dict[str, Any]:
        members = [self.require(data, "scores", key) for key in self.config["members"]]
        data.setdefault("scores", {})[self.config["key"]] = ensemble_models(members)
        return data


def _decode(proposals, scores, cfg: ExperimentConfig, score_threshold: float) -> List:
    return decode_detections(
        proposals, scores,
        score_threshold=score_threshold,
        nms_iou=cfg.decode.nms_iou,
        max_per_image=cfg.decode.max_per_image,
    )


class DecodeComponent(PipelineComponent):
    """
    把分数矩阵解码为检测结果

    config:
        scores: 分数矩阵名称
        key: 检测结果名称（默认与分数矩阵同名）
        score_threshold: 覆盖配置中的分数阈值
    """

    requires = ("config", "val_proposals")

    def run(self, data: Dict[str, Any]) -> Dict[str, Any]:
        cfg = _experiment(data)
        score_key = self.config["scores"]
        threshold = self.config.get("score_threshold", cfg.decode.score_threshold)
        dets = _decode(data["val_proposals"], self.require(data, "scores", score_key), cfg, threshold)
        data.setdefault("detections", {})[self.config.get("key", score_key)] = dets
        logger.info(f"{score_key}: 阈值 {threshold:g} 下解码得到 {len(dets)} 个检测结果")
        return data


class EvaluateComponent(PipelineComponent):
    """在验证集上评估检测结果，报告追加到 data['reports']"""

    requires = ("config", "world")

    def run(self, data: Dict[str, Any]) -> Dict[str, Any]:
        cfg = _experiment(data)
        det_key = self.config["detections"]
        report = evaluate_detections(
            self.require(data, "detections", det_key), data["world"], cfg.eval,
            cfg.calibration.bin_edges, name=self.config.get("report", det_key),
        )
        data.setdefault("reports", []).append(report)
        return data


class OracleComponent(PipelineComponent):
    """真值标签上界评估"""

    requires = ("config", "world", "val_proposals")

    def run(self, data: Dict[str, Any]) -> Dict[str, Any]:
        cfg = _experiment(data)
        world = data["world"]
        report = oracle_gt_label_eval(
            data["val_proposals"], world.val_images, cfg.eval, world.categories,
            cfg.calibration.bin_edges, name=self.config.get("report", "props-gt"),
        )
        data.setdefault("reports", []).append(report)
        return data


class RecallComponent(PipelineComponent):
    """计算 AR@k 并写入指定名称的报告"""

    requires = ("config", "world", "val_proposals")

    def run(self, data: Dict[str, Any]) -> Dict[str, Any]:
        cfg = _experiment(data)
        k = self.config.get("k", cfg.eval.proposal_k)
        ar = proposal_recall(data["val_proposals"], data["world"].val_images, k, cfg.eval)
        logger.info(f"AR@{k} = {100 * ar:.1f}")
        target = self.config["report"]
        reports = data.get("reports", [])
        for index, report in enumerate(reports):
            if report.name == target:
                reports[index] = report.with_recall(ar, k)
                return data
        raise MissingInputError(f"组件 {self.name}: 报告 {target} 不存在，请先执行评估组件")


class CountReportComponent(PipelineComponent):
    """
    类别区间统计：读取外部计数文件，或使用世界的类别表
    """

    requires = ("config",)

    def run(self, data: Dict[str, Any]) -> Dict[str, Any]:
        cfg = _experiment(data)
        counts_path = data.get("counts_path")
        if counts_path:
            logger.info(f"读取类别计数文件: {counts_path}")
            categories = read_count_file(counts_path)
        else:
            categories = data["world"].categories
        data["categories"] = categories
        report = count_report(categories, cfg.calibration.bin_edges, name=self.config.get("report", "counts"))
        logger.info(f"区间训练类别数: {report.per_bin_train_class_count}")
        data.setdefault("reports", []).append(report)
        return data


class ReportWriterComponent(PipelineComponent):
    """
    写出报告 CSV/JSON、分类头检查点与 manifest.json
    """

    requires = ("config",)

    def _write_heads(self, heads: Dict[str, Any], out_dir: Path, config_fingerprint: str) -> List[str]:
        files = []
        for key in sorted(heads):
            value = heads[key]
            stages = [value] if isinstance(value, Head) else list(value)
            for stage, head in enumerate(stages):
                suffix = "" if isinstance(value, Head) else f"_stage{stage + 1}"
                name = f"head_{key}{suffix}.json"
                save_head(head, out_dir / name, config_fingerprint, meta={"key": key, "stage": stage})
                files.append(name)
        return files

    def run(self, data: Dict[str, Any]) -> Dict[str, Any]:
        from .. import __version__

        cfg = _experiment(data)
        out_dir = Path(data.get("out_dir") or cfg.output_dir)
        categories = data.get("categories")
        if categories is None:
            categories = data["world"].categories

        report_categories = data.get("report_categories", {})
        files: List[str] = []
        for report in data.get("reports", []):
            own = report_categories.get(report.name, categories)
            files.extend(write_report(report, own, out_dir, cfg.calibration.bin_edges))
        if self.config.get("save_heads", True):
            files.extend(self._write_heads(data.get("heads", {}), out_dir, cfg.fingerprint()))

        manifest = {
            "preset": data.get("preset", "experiment"),
            "seed": cfg.seed,
            "fingerprint": cfg.fingerprint(),
            "config": cfg.model_dump(mode="json"),
            "versions": {
                "tailcal": __version__,
                "numpy": np.__version__,
                "python": platform.python_version(),
            },
            "files": sorted(files),
        }
        if data.get("world_summary") is not None:
            manifest["world_summary"] = data["world_summary"]
        if data.get("companions"):
            manifest["companions"] = data["companions"]
        if data.get("counts_path"):
            manifest["counts_path"] = str(data["counts_path"])
        files.append(write_manifest(out_dir, manifest))
        data["files"] = files
        logger.info(f"已写出 {len(files)} 个文件到 {out_dir}")
        return data


class BalancedCompanionComponent(PipelineComponent):
    """
    对照实验：在类别数均衡（zipf_exponent=0）、类别数与实例总数相同的世界上训练基线并评估

    报告以 "<prefix>-" 为前缀追加到 data['reports']，并附 AR@k。
    对照世界的类别表记在 data['report_categories'] 中，写报告时使用。

    config:
        prefix: 报告名前缀（默认 balanced）
        zipf_exponent: 对照世界的 Zipf 指数（默认 0）
    """

    requires = ("config", "world")

    def _setup(self) -> None:
        self.prefix = self.config.get("prefix", "balanced")
        self.zipf_exponent = float(self.config.get("zipf_exponent", 0.0))

    def companion_config(self, cfg: ExperimentConfig, world) -> ExperimentConfig:
        world_cfg = cfg.world.model_dump()
        world_cfg.update(
            num_categories=world.num_categories,
            total_instances=int(world.train_counts().sum()),
            zipf_exponent=self.zipf_exponent,
        )
        payload = cfg.model_dump()
        payload.update(world=world_cfg, world_path=None)
        return ExperimentConfig.model_validate(payload)

    def run(self, data: Dict[str, Any]) -> Dict[str, Any]:
        cfg = self.companion_config(_experiment(data), data["world"])
        logger.info(f"对照世界: zipf_exponent={self.zipf_exponent:g}, "
                    f"{cfg.world.num_categories} 类, {cfg.world.total_instances} 个训练实例")

        pipeline = Pipeline(name=f"{self.name}_run")
        pipeline.add_components([
            WorldComponent("world"),
            ProposalComponent("proposals"),
            TrainHeadComponent("train_baseline", {"key": "baseline", "mode": "standard"}),
            ScoreComponent("score_baseline", {"head": "baseline"}),
            *evaluation_chain("baseline"),
            RecallComponent("recall", {"report": "baseline"}),
        ])
        result = pipeline.run({"config": cfg, "show_progress": data.get("show_progress", False)})

        reports = data.setdefault("reports", [])
        report_categories = data.setdefault("report_categories", {})
        for report in result["reports"]:
            renamed = report.renamed(f"{self.prefix}-{report.name}")
            reports.append(renamed)
            report_categories[renamed.name] = result["world"].categories
        heads = data.setdefault("heads", {})
        for key, head in result.get("heads", {}).items():
            heads[f"{self.prefix}-{key}"] = head
        data.setdefault("companions", {})[self.prefix] = {
            "world": cfg.world.model_dump(mode="json"),
            "world_summary": result["world_summary"],
        }
        return data


def evaluation_chain(score_key: str, report: Optional[str] = None,
                     score_threshold: Optional[float] = None) -> Sequence[PipelineComponent]:
    """解码 + 评估两个组件"""
    report = report or score_key
    decode_config: Dict[str, Any] = {"scores": score_key, "key": report}
    if score_threshold is not None:
        decode_config["score_threshold"] = score_threshold
    return (
        DecodeComponent(f"decode_{report}", decode_config),
        EvaluateComponent(f"evaluate_{report}", {"detections": report, "report": report}),
    )
