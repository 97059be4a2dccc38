"""
实验流水线模块
由可组合的组件构建各个预设实验
"""

# 基础组件
from .base import MissingInputError, PipelineComponent, Pipeline

# 具体组件实现
from .components import (
    WorldComponent,
    ProposalComponent,
    TrainHeadComponent,
    ScoreComponent,
    CalibrateComponent,
    EnsembleComponent,
    DecodeComponent,
    EvaluateComponent,
    OracleComponent,
    RecallComponent,
    CountReportComponent,
    ReportWriterComponent,
    BalancedCompanionComponent,
    evaluation_chain,
)

# 预设流水线
from .pipelines import (
    ExperimentPipeline,
    SingleRunPipeline,
    DatasetStatsPipeline,
    ThresholdAblationPipeline,
    ProposalRecallPipeline,
    OraclePipeline,
    CalibrationPipeline,
    CascadePipeline,
    RepeatSamplingPipeline,
    EnsemblePipeline,
    PIPELINE_CLASSES,
    create_pipeline,
)

__all__ = [
    # 基础类
    "MissingInputError",
    "PipelineComponent",
    "Pipeline",

    # 组件
    "WorldComponent",
    "ProposalComponent",
    "TrainHeadComponent",
    "ScoreComponent",
    "CalibrateComponent",
    "EnsembleComponent",
    "DecodeComponent",
    "EvaluateComponent",
    "OracleComponent",
    "RecallComponent",
    "CountReportComponent",
    "ReportWriterComponent",
    "BalancedCompanionComponent",
    "evaluation_chain",

    # 流水线
    "ExperimentPipeline",
    "SingleRunPipeline",
    "DatasetStatsPipeline",
    "ThresholdAblationPipeline",
    "ProposalRecallPipeline",
    "OraclePipeline",
    "CalibrationPipeline",
    "CascadePipeline",
    "RepeatSamplingPipeline",
    "EnsemblePipeline",
    "PIPELINE_CLASSES",

    # 工厂函数
    "create_pipeline",
]
