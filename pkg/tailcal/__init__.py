"""
tailcal - 长尾目标检测的分类头校准实验工具
"""

__version__ = "0.1.0"

# 导出核心模块
from .config import get_config, get_settings, ConfigLoader, TailCalSettings, ExperimentConfig, WorldConfig
from .core import (
    World, generate_world, sample_counts, assign_bin,
    Detection, decode_detections, match_proposals, nms, iou,
    Head, train_standard, train_balanced, train_repeat_sampled, train_cascade,
    ScoreMatrix, BinSplit, Strategy, combine, combine_detections_det, ensemble_models,
    EvalReport, ap_per_category, binned_report, proposal_recall, oracle_gt_label_eval,
    import_detections, export_detections,
)
from .pipeline import PipelineComponent, Pipeline, create_pipeline
from .cli import tailcal

__all__ = [
    # 配置相关
    'get_config', 'get_settings', 'ConfigLoader', 'TailCalSettings', 'ExperimentConfig', 'WorldConfig',
    # 世界与检测
    'World', 'generate_world', 'sample_counts', 'assign_bin',
    'Detection', 'decode_detections', 'match_proposals', 'nms', 'iou',
    # 分类头与校准
    'Head', 'train_standard', 'train_balanced', 'train_repeat_sampled', 'train_cascade',
    'ScoreMatrix', 'BinSplit', 'Strategy', 'combine', 'combine_detections_det', 'ensemble_models',
    # 评估与文件格式
    'EvalReport', 'ap_per_category', 'binned_report', 'proposal_recall', 'oracle_gt_label_eval',
    'import_detections', 'export_detections',
    # 流水线
    'PipelineComponent', 'Pipeline', 'create_pipeline',
    # CLI
    'tailcal'
]
