"""
核心模块：合成世界、两阶段检测原语、分类头训练、分数校准、评估与文件格式
"""

from .world import (
    BIN_LABELS,
    DEFAULT_BIN_EDGES,
    BinId,
    Category,
    GtObject,
    Proposal,
    ProposalSet,
    SceneImage,
    World,
    WorldConfigError,
    assign_bin,
    bin_labels,
    generate_proposal_set,
    generate_proposals,
    generate_world,
    sample_counts,
    summarize_world,
)
from .twostage import (
    BACKGROUND,
    Detection,
    MatchResult,
    decode_detections,
    iou,
    iou_matrix,
    match_proposals,
    nms,
)
from .calib import (
    BinSplit,
    ScoreMatrix,
    ScoreShapeError,
    Strategy,
    average_heads,
    cascade_scores,
    combine,
    combine_detections_det,
    ensemble_models,
)
from .heads import (
    Head,
    ProposalBank,
    TrainingDivergedError,
    cross_entropy,
    forward,
    init_head,
    repeat_factors,
    sample_balanced_batch,
    sgd_step,
    train_balanced,
    train_cascade,
    train_repeat_sampled,
    train_standard,
)
from .evaluation import (
    EvalReport,
    ap_per_category,
    binned_report,
    count_report,
    evaluate_detections,
    oracle_gt_label_eval,
    proposal_recall,
)
from .io import (
    DetectionFormatError,
    export_detections,
    import_detections,
    load_head,
    load_world,
    read_count_file,
    save_head,
    save_world,
    write_manifest,
    write_report,
)

__all__ = [
    # 世界
    "BIN_LABELS",
    "DEFAULT_BIN_EDGES",
    "BinId",
    "Category",
    "GtObject",
    "Proposal",
    "ProposalSet",
    "SceneImage",
    "World",
    "WorldConfigError",
    "assign_bin",
    "bin_labels",
    "generate_proposal_set",
    "generate_proposals",
    "generate_world",
    "sample_counts",
    "summarize_world",

    # 两阶段检测
    "BACKGROUND",
    "Detection",
    "MatchResult",
    "decode_detections",
    "iou",
    "iou_matrix",
    "match_proposals",
    "nms",

    # 校准
    "BinSplit",
    "ScoreMatrix",
    "ScoreShapeError",
    "Strategy",
    "average_heads",
    "cascade_scores",
    "combine",
    "combine_detections_det",
    "ensemble_models",

    # 分类头
    "Head",
    "ProposalBank",
    "TrainingDivergedError",
    "cross_entropy",
    "forward",
    "init_head",
    "repeat_factors",
    "sample_balanced_batch",
    "sgd_step",
    "train_balanced",
    "train_cascade",
    "train_repeat_sampled",
    "train_standard",

    # 评估
    "EvalReport",
    "ap_per_category",
    "binned_report",
    "count_report",
    "evaluate_detections",
    "oracle_gt_label_eval",
    "proposal_recall",

    # 文件格式
    "DetectionFormatError",
    "export_detections",
    "import_detections",
    "load_head",
    "load_world",
    "read_count_file",
    "save_head",
    "save_world",
    "write_manifest",
    "write_report",
]
