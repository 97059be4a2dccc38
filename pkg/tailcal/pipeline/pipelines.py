from typing import Dict, Any, List, Optional
import logging

from ..config.schema import ExperimentConfig, PRESETS
from ..core.calib import Strategy
from .base import Pipeline
from .components import (
    BalancedCompanionComponent,
    CalibrateComponent,
    CountReportComponent,
    EnsembleComponent,
    OracleComponent,
    ProposalComponent,
    RecallComponent,
    ReportWriterComponent,
    ScoreComponent,
    TrainHeadComponent,
    WorldComponent,
    evaluation_chain,
)

logger = logging.getLogger("tailcal.pipeline.pipelines")


class ExperimentPipeline(Pipeline):
    """
    实验流水线基类：世界 → 候选框 → 训练 → 打分/校准 → 解码 → 评估 → 写出报告

    子类在 _build 中添加实验特有的组件。
    """

    preset = "experiment"

    def __init__(self, experiment: ExperimentConfig, config: Optional[Dict[str, Any]] = None):
        super().__init__(name=self.preset, config=config)
        self.experiment = experiment
        self.add_component(WorldComponent("world"))
        self.add_component(ProposalComponent("proposals"))
        self._build()
        self.add_component(ReportWriterComponent("write_reports", {"save_heads": self.config.get("save_heads", True)}))

    def _build(self) -> None:
        raise NotImplementedError

    def _baseline(self) -> None:
        self.add_components([
            TrainHeadComponent("train_baseline", {"key": "baseline", "mode": "standard"}),
            ScoreComponent("score_baseline", {"head": "baseline"}),
        ])

    def _retrained(self) -> None:
        self.add_components([
            TrainHeadComponent("train_rhead", {"key": "rhead", "mode": "balanced", "base": "baseline"}),
            ScoreComponent("score_rhead", {"head": "rhead"}),
        ])

    def run(self, data: Optional[Dict[str, Any]] = None) -> Dict[str, Any]:
        """
        运行实验

        Args:
            data: 可选的初始数据（out_dir、counts_path、show_progress、预先加载的 world）

        Returns:
            流水线结果，experiment_summary 中给出每个报告的总体 AP
        """
        data = dict(data or {})
        data["config"] = self.experiment
        data["preset"] = self.preset
        logger.info(f"开始运行实验 {self.preset} (seed={self.experiment.seed})")

        result = super().run(data)
        summary = self._generate_summary(result)
        result["experiment_summary"] = summary
        logger.info(f"实验 {self.preset} 完成: {summary}")
        return result

    def _generate_summary(self, result: Dict[str, Any]) -> Dict[str, Any]:
        return {
            "preset": self.preset,
            "reports": {r.name: r.overall_ap for r in result.get("reports", [])},
            "file_count": len(result.get("files", [])),
        }


class SingleRunPipeline(ExperimentPipeline):
    """
    按配置中的 training_mode 运行一次实验

    standard 只评估基线；repeat 评估重复采样模型；
    balanced 额外训练均衡分类头并按 calibration.strategy 与基线组合。
    """

    preset = "experiment"

    def _build(self) -> None:
        mode = self.experiment.training_mode
        if mode == "repeat":
            self.add_components([
                TrainHeadComponent("train_repeat", {"key": "repeat-sample", "mode": "repeat"}),
                ScoreComponent("score_repeat", {"head": "repeat-sample"}),
            ])
            self.add_components(evaluation_chain("repeat-sample"))
            return

        self._baseline()
        self.add_components(evaluation_chain("baseline"))
        if mode == "balanced":
            strategy = Strategy(self.experiment.calibration.strategy)
            self._retrained()
            self.add_component(CalibrateComponent(
                "calibrate", {"strategy": strategy.value, "orig": "baseline", "new": "rhead"}
            ))
            if strategy is Strategy.DET:
                self.add_components(evaluation_chain(strategy.report_name)[1:])
            else:
                self.add_components(evaluation_chain(strategy.report_name))


class DatasetStatsPipeline(ExperimentPipeline):
    """
    类别区间统计（训练类别数与出现在验证集中的类别数）

    给定计数文件时不生成世界。
    """

    preset = "table1"

    def __init__(self, experiment: ExperimentConfig, config: Optional[Dict[str, Any]] = None):
        Pipeline.__init__(self, name=self.preset, config=config)
        self.experiment = experiment
        if not self.config.get("counts_path"):
            self.add_component(WorldComponent("world"))
        self.add_component(CountReportComponent("counts", {"report": "table1"}))
        self.add_component(ReportWriterComponent("write_reports", {"save_heads": False}))

    def run(self, data: Optional[Dict[str, Any]] = None) -> Dict[str, Any]:
        data = dict(data or {})
        if self.config.get("counts_path"):
            data.setdefault("counts_path", self.config["counts_path"])
        return super().run(data)


class ThresholdAblationPipeline(ExperimentPipeline):
    """基线分类头在两个分数阈值（0.05 与 0.0）下的评估"""

    preset = "table2"
    thresholds = (0.05, 0.0)

    def _build(self) -> None:
        self._baseline()
        for threshold in self.thresholds:
            self.add_components(evaluation_chain("baseline", f"thr-{threshold:g}", score_threshold=threshold))


class ProposalRecallPipeline(ExperimentPipeline):
    """
    基线评估并附上候选框平均召回率 AR@k

    另在类别数均衡、实例总数相同的世界上跑同样的基线（报告 balanced-baseline），
    把长尾分布的影响与候选框质量的影响分开。
    """

    preset = "table3"

    def _build(self) -> None:
        self._baseline()
        self.add_components(evaluation_chain("baseline"))
        self.add_component(RecallComponent("recall", {"report": "baseline"}))
        self.add_component(BalancedCompanionComponent("balanced_companion", {"prefix": "balanced"}))


class OraclePipeline(ExperimentPipeline):
    """基线与真值标签上界对比"""

    preset = "table4"

    def _build(self) -> None:
        self._baseline()
        self.add_components(evaluation_chain("baseline"))
        self.add_component(OracleComponent("oracle", {"report": "props-gt"}))


class CalibrationPipeline(ExperimentPipeline):
    """基线加六种组合策略，共七个报告"""

    preset = "table5"

    def _build(self) -> None:
        self._baseline()
        self.add_components(evaluation_chain("baseline"))
        self._retrained()
        for strategy in Strategy:
            self.add_component(CalibrateComponent(
                f"calibrate_{strategy.value}", {"strategy": strategy.value, "orig": "baseline", "new": "rhead"}
            ))
            chain = evaluation_chain(strategy.report_name)
            self.add_components(chain[1:] if strategy is Strategy.DET else chain)


class CascadePipeline(ExperimentPipeline):
    """
    级联模型：各阶段分类头取平均后，与均衡重训练的级联分类头按 cat 组合
    """

    preset = "table6"

    def _build(self) -> None:
        tail_bins = self.experiment.calibration.cascade_tail_bins
        self.add_components([
            TrainHeadComponent("train_cascade", {"key": "cascade", "mode": "cascade"}),
            ScoreComponent("score_cascade", {"head": "cascade"}),
            TrainHeadComponent("train_cascade_rhead", {"key": "cascade-rhead", "mode": "cascade-balanced"}),
            ScoreComponent("score_cascade_rhead", {"head": "cascade-rhead"}),
            CalibrateComponent("calibrate_cascade", {
                "strategy": "cat", "orig": "cascade", "new": "cascade-rhead",
                "key": "cascade-rhead-cat", "tail_bins": tail_bins,
            }),
        ])
        self.add_components(evaluation_chain("cascade"))
        self.add_components(evaluation_chain("cascade-rhead-cat"))


class RepeatSamplingPipeline(ExperimentPipeline):
    """标准训练、图像级重复采样、均衡重训练校准三者对比"""

    preset = "table7"

    def _build(self) -> None:
        self._baseline()
        self.add_components(evaluation_chain("baseline"))
        self.add_components([
            TrainHeadComponent("train_repeat", {"key": "repeat-sample", "mode": "repeat"}),
            ScoreComponent("score_repeat", {"head": "repeat-sample"}),
        ])
        self.add_components(evaluation_chain("repeat-sample"))
        self._retrained()
        self.add_component(CalibrateComponent("calibrate_cat", {"strategy": "cat", "orig": "baseline", "new": "rhead"}))
        self.add_components(evaluation_chain("rhead-cat"))


class EnsemblePipeline(ExperimentPipeline):
    """
    多个种子的模型各自用 cat 策略校准，再在分数层面集成
    """

    preset = "table8"

    def _build(self) -> None:
        seeds = self.experiment.calibration.ensemble_seeds
        if len(seeds) < 2:
            raise ValueError(f"集成至少需要两个种子: {seeds}")
        members: List[str] = []
        for seed in seeds:
            model, rhead, calibrated = f"model-s{seed}", f"rhead-s{seed}", f"model-s{seed}-cat"
            self.add_components([
                TrainHeadComponent(f"train_{model}", {"key": model, "mode": "standard", "seed": seed}),
                ScoreComponent(f"score_{model}", {"head": model}),
                TrainHeadComponent(f"train_{rhead}", {"key": rhead, "mode": "balanced", "seed": seed}),
                ScoreComponent(f"score_{rhead}", {"head": rhead}),
                CalibrateComponent(f"calibrate_{model}", {
                    "strategy": "cat", "orig": model, "new": rhead, "key": calibrated,
                }),
            ])
            self.add_components(evaluation_chain(calibrated))
            members.append(calibrated)
        self.add_component(EnsembleComponent("ensemble", {"members": members, "key": "ensemble-cat"}))
        self.add_components(evaluation_chain("ensemble-cat"))


PIPELINE_CLASSES = {
    "experiment": SingleRunPipeline,
    "table1": DatasetStatsPipeline,
    "table2": ThresholdAblationPipeline,
    "table3": ProposalRecallPipeline,
    "table4": OraclePipeline,
    "table5": CalibrationPipeline,
    "table6": CascadePipeline,
    "table7": RepeatSamplingPipeline,
    "table8": EnsemblePipeline,
}


def create_pipeline(preset: Optional[str], experiment: ExperimentConfig,
                    config: Optional[Dict[str, Any]] = None) -> ExperimentPipeline:
    """
    创建实验流水线的工厂函数

    Args:
        preset: 预设名称（table1..table8），为空时按配置运行单次实验
        experiment: 实验配置
        config: 流水线配置（save_heads、counts_path 等）

    Returns:
        创建的流水线实例

    Raises:
        ValueError: 如果预设名称无效
    """
    preset = preset or "experiment"
    if preset not in PIPELINE_CLASSES:
        raise ValueError(f"无效的预设: {preset}. 支持的预设: {list(PRESETS)}")
    pipeline = PIPELINE_CLASSES[preset](experiment, config)
    if not pipeline.validate():
        raise ValueError(f"流水线 {preset} 的组件名称重复")
    return pipeline
