#!/usr/bin/env python3
# -*- coding: utf-8 -*-
"""
tailcal CLI 命令行接口
生成世界、训练分类头、校准、评估以及按预设运行完整实验
"""

import logging
import sys
from pathlib import Path
from typing import Any, Dict, Optional

import click
from pydantic import ValidationError

from tailcal.config.loader import get_settings, initialize_config
from tailcal.config.schema import PRESETS, STRATEGIES, TRAINING_MODES, ExperimentConfig

EXIT_INVALID = 1
EXIT_DIVERGED = 2

logger = logging.getLogger("tailcal.cli")


def _setup_logging(level: Optional[str]) -> None:
    level = (level or get_settings().log_level).upper()
    logging.basicConfig(
        level=getattr(logging, level, logging.INFO),
        format="%(asctime)s - %(name)s - %(levelname)s - %(message)s",
        stream=sys.stderr,
        force=True,
    )


def _load_experiment(config: Optional[str], overrides: Dict[str, Any]) -> ExperimentConfig:
    """读取配置文件并应用命令行覆盖项（点分键），再做完整校验"""
    loader = initialize_config(config_path=config)
    for key, value in overrides.items():
        if value is not None:
            loader.update(key, value)
    return ExperimentConfig.from_loader(loader)


def _seed_overrides(seed: Optional[int], world_path: Optional[str] = None) -> Dict[str, Any]:
    """--seed 同时决定实验种子和世界种子；给定冻结世界时世界种子不再起作用"""
    overrides: Dict[str, Any] = {"experiment.seed": seed}
    if world_path is None:
        overrides["world.seed"] = seed
    return overrides


def _fail(message: str, error: Exception) -> None:
    from tailcal.core.heads import TrainingDivergedError

    click.echo(f"{message}: {error}", err=True)
    sys.exit(EXIT_DIVERGED if isinstance(error, TrainingDivergedError) else EXIT_INVALID)


def _out_dir(out: Optional[str], cfg: ExperimentConfig) -> Path:
    path = Path(out or cfg.output_dir)
    path.mkdir(parents=True, exist_ok=True)
    return path


def _versions() -> Dict[str, str]:
    import platform

    import numpy as np
    from tailcal import __version__

    return {"tailcal": __version__, "numpy": np.__version__, "python": platform.python_version()}


def _manifest(command: str, cfg: ExperimentConfig, files, **extra) -> Dict[str, Any]:
    payload = {
        "preset": command,
        "seed": cfg.seed,
        "fingerprint": cfg.fingerprint(),
        "config": cfg.model_dump(mode="json"),
        "versions": _versions(),
        "files": sorted(files),
    }
    payload.update(extra)
    return payload


def _load_world(cfg: ExperimentConfig):
    from tailcal.core.io import load_world
    from tailcal.core.world import generate_world

    return load_world(cfg.world_path) if cfg.world_path else generate_world(cfg.world)


common_options = [
    click.option("--config", "-c", default=None, help="配置文件路径"),
    click.option("--seed", type=click.IntRange(min=0), default=None, help="实验种子，未给定 --world 时也是世界种子"),
    click.option("--out", default=None, help="输出目录"),
    click.option("--log-level", default=None,
                 type=click.Choice(["DEBUG", "INFO", "WARNING", "ERROR"], case_sensitive=False),
                 help="日志级别"),
]


def with_common_options(func):
    for option in reversed(common_options):
        func = option(func)
    return func


@click.group()
def tailcal():
    """
    tailcal - 长尾检测分类校准实验工具
    """
    pass


@tailcal.command()
def version():
    """
    显示版本信息
    """
    from tailcal import __version__

    click.echo(f"tailcal v{__version__}")
    click.echo("长尾目标检测的分类头校准实验工具")


@tailcal.command("init-config")
@click.option("--output", "-o", default="config.example.yaml", help="输出文件路径")
def init_config(output):
    """
    生成示例配置文件
    """
    try:
        with open(output, "w", encoding="utf-8") as f:
            f.write(EXAMPLE_CONFIG.strip() + "\n")
        click.echo(f"示例配置文件已生成: {output}")
    except Exception as e:
        _fail("生成配置文件时发生错误", e)


@tailcal.command("gen-world")
@with_common_options
def gen_world(config, seed, out, log_level):
    """
    生成合成长尾世界并保存为 world.json
    """
    try:
        _setup_logging(log_level)
        from tailcal.core.io import save_world, write_manifest
        from tailcal.core.world import generate_world, summarize_world

        cfg = _load_experiment(config, _seed_overrides(seed))
        out_dir = _out_dir(out, cfg)
        world = generate_world(cfg.world)
        save_world(world, out_dir / "world.json")
        summary = summarize_world(world, cfg.calibration.bin_edges)
        write_manifest(out_dir, _manifest("gen-world", cfg, ["world.json"], world_summary=summary))

        click.echo(f"世界已生成: {out_dir / 'world.json'}")
        click.echo(f"- 训练图像: {len(world.train_images)}，验证图像: {len(world.val_images)}")
        for label, count in summary["train_classes"].items():
            click.echo(
                f"- {label}: {count} 类（验证集 {summary['val_classes'][label]} 类），"
                f"训练实例 {summary['train_instances'][label]}"
            )
    except (ValidationError, ValueError, FileNotFoundError) as e:
        _fail("配置无效", e)
    except Exception as e:
        _fail("生成世界时发生错误", e)


@tailcal.command()
@with_common_options
@click.option("--world", "world_path", type=click.Path(exists=True, dir_okay=False), default=None,
              help="冻结的世界文件")
@click.option("--mode", type=click.Choice(TRAINING_MODES), default=None, help="训练方式")
@click.option("--show-progress", is_flag=True, help="显示训练进度条")
def train(config, seed, out, log_level, world_path, mode, show_progress):
    """
    训练分类头并保存检查点 head_<mode>.json
    """
    try:
        _setup_logging(log_level)
        from tailcal.core.heads import train_balanced, train_repeat_sampled, train_standard
        from tailcal.core.io import save_head, write_manifest
        from tailcal.utils import derive_rng

        cfg = _load_experiment(config, {
            **_seed_overrides(seed, world_path),
            "experiment.world_path": world_path, "experiment.training_mode": mode,
        })
        out_dir = _out_dir(out, cfg)
        world = _load_world(cfg)
        rng = derive_rng(cfg.seed, "train", cfg.training_mode)
        progress = show_progress or get_settings().show_progress

        if cfg.training_mode == "standard":
            head = train_standard(world, cfg.schedule, rng, cfg.decode.match_iou, show_progress=progress)
        elif cfg.training_mode == "repeat":
            head = train_repeat_sampled(world, cfg.repeat_threshold, cfg.schedule, rng, cfg.decode.match_iou,
                                        show_progress=progress)
        else:
            head = train_balanced(world, None, cfg.sampler, cfg.schedule, rng, show_progress=progress)

        name = f"head_{cfg.training_mode}.json"
        save_head(head, out_dir / name, cfg.fingerprint(), meta={"mode": cfg.training_mode})
        write_manifest(out_dir, _manifest("train", cfg, [name]))
        click.echo(f"分类头已保存: {out_dir / name}")
    except (ValidationError, ValueError, FileNotFoundError) as e:
        _fail("配置无效", e)
    except Exception as e:
        _fail("训练过程中发生错误", e)


@tailcal.command()
@with_common_options
@click.option("--world", "world_path", type=click.Path(exists=True, dir_okay=False), required=True,
              help="冻结的世界文件")
@click.option("--orig", "orig_path", type=click.Path(exists=True, dir_okay=False), required=True,
              help="原分类头检查点")
@click.option("--new", "new_path", type=click.Path(exists=True, dir_okay=False), required=True,
              help="重训练分类头检查点")
@click.option("--strategy", type=click.Choice(STRATEGIES), default=None, help="组合策略")
@click.option("--score-thr", type=click.FloatRange(0.0, 1.0), default=None, help="解码分数阈值")
def calibrate(config, seed, out, log_level, world_path, orig_path, new_path, strategy, score_thr):
    """
    组合两个分类头，在验证集上解码并评估
    """
    try:
        _setup_logging(log_level)
        from tailcal.core.calib import BinSplit, Strategy, combine, combine_detections_det
        from tailcal.core.evaluation import evaluate_detections
        from tailcal.core.heads import forward
        from tailcal.core.io import export_detections, load_head, write_manifest, write_report
        from tailcal.core.twostage import decode_detections
        from tailcal.core.world import generate_proposal_set
        from tailcal.utils import derive_rng

        cfg = _load_experiment(config, {
            **_seed_overrides(seed, world_path), "experiment.world_path": world_path,
            "calibration.strategy": strategy, "decode.score_threshold": score_thr,
        })
        out_dir = _out_dir(out, cfg)
        world = _load_world(cfg)
        orig_head, _ = load_head(orig_path)
        new_head, _ = load_head(new_path)

        proposals = generate_proposal_set(world.val_images, world, derive_rng(cfg.seed, "val-proposals"))
        orig = forward(orig_head, proposals.features)
        new = forward(new_head, proposals.features)
        chosen = Strategy(cfg.calibration.strategy)
        split = BinSplit.from_categories(world.categories, cfg.calibration.tail_bins, cfg.calibration.bin_edges)

        def decode(scores):
            return decode_detections(proposals, scores, cfg.decode.score_threshold,
                                     cfg.decode.nms_iou, cfg.decode.max_per_image)

        if chosen is Strategy.DET:
            dets = combine_detections_det(decode(orig), decode(new), split, cfg.decode.max_per_image)
        else:
            dets = decode(combine(chosen, orig, new, split, cfg.calibration.new_head_threshold,
                                  cfg.calibration.invert_scale))

        report = evaluate_detections(dets, world, cfg.eval, cfg.calibration.bin_edges, name=chosen.report_name)
        files = write_report(report, world.categories, out_dir, cfg.calibration.bin_edges)
        det_name = f"detections_{chosen.report_name}.jsonl"
        export_detections(dets, out_dir / det_name)
        files.append(det_name)
        write_manifest(out_dir, _manifest("calibrate", cfg, files))
        _echo_report(report)
    except (ValidationError, ValueError, FileNotFoundError) as e:
        _fail("输入无效", e)
    except Exception as e:
        _fail("校准过程中发生错误", e)


@tailcal.command()
@with_common_options
@click.option("--world", "world_path", type=click.Path(exists=True, dir_okay=False), required=True,
              help="冻结的世界文件")
@click.option("--dets", "dets_path", type=click.Path(exists=True, dir_okay=False), required=True,
              help="检测结果文件（JSON Lines 或 JSON 数组）")
@click.option("--name", default="external", help="报告名称")
def evaluate(config, seed, out, log_level, world_path, dets_path, name):
    """
    在世界的验证集上评估外部检测结果
    """
    try:
        _setup_logging(log_level)
        from tailcal.core.evaluation import evaluate_detections
        from tailcal.core.io import import_detections, write_manifest, write_report

        cfg = _load_experiment(config, {**_seed_overrides(seed, world_path), "experiment.world_path": world_path})
        out_dir = _out_dir(out, cfg)
        world = _load_world(cfg)
        dets = import_detections(dets_path)
        report = evaluate_detections(dets, world, cfg.eval, cfg.calibration.bin_edges, name=name)
        files = write_report(report, world.categories, out_dir, cfg.calibration.bin_edges)
        write_manifest(out_dir, _manifest("evaluate", cfg, files, detections=str(dets_path)))
        _echo_report(report)
    except (ValidationError, ValueError, FileNotFoundError) as e:
        _fail("输入无效", e)
    except Exception as e:
        _fail("评估过程中发生错误", e)


@tailcal.command()
@with_common_options
@click.option("--preset", type=click.Choice(PRESETS), default=None, help="预设实验")
@click.option("--world", "world_path", type=click.Path(exists=True, dir_okay=False), default=None,
              help="冻结的世界文件")
@click.option("--strategy", type=click.Choice(STRATEGIES), default=None, help="组合策略")
@click.option("--score-thr", type=click.FloatRange(0.0, 1.0), default=None, help="解码分数阈值")
@click.option("--counts", "counts_path", type=click.Path(exists=True, dir_okay=False), default=None,
              help="类别计数 CSV（table1）")
@click.option("--show-progress", is_flag=True, help="显示训练进度条")
def run(config, seed, out, log_level, preset, world_path, strategy, score_thr, counts_path, show_progress):
    """
    运行完整实验流水线（世界 → 训练 → 校准 → 解码 → 评估 → 报告）
    """
    try:
        _setup_logging(log_level)
        from tailcal.pipeline import create_pipeline

        cfg = _load_experiment(config, {
            **_seed_overrides(seed, world_path), "experiment.world_path": world_path,
            "calibration.strategy": strategy, "decode.score_threshold": score_thr,
            "experiment.output_dir": out,
        })
        out_dir = _out_dir(out, cfg)
        pipeline = create_pipeline(preset, cfg, {"counts_path": counts_path})
        result = pipeline.run({
            "out_dir": str(out_dir),
            "counts_path": counts_path,
            "show_progress": show_progress or get_settings().show_progress,
        })

        click.echo(f"\n实验 {pipeline.name} 完成，输出目录: {out_dir}")
        for report in result.get("reports", []):
            _echo_report(report)
    except (ValidationError, ValueError, FileNotFoundError) as e:
        _fail("配置无效", e)
    except Exception as e:
        _fail("运行实验时发生错误", e)


@tailcal.command("import-dets")
@click.argument("path", type=click.Path(exists=True, dir_okay=False))
@click.option("--out", default=None, help="规范化后写出的 JSON Lines 文件")
@click.option("--log-level", default=None,
              type=click.Choice(["DEBUG", "INFO", "WARNING", "ERROR"], case_sensitive=False),
              help="日志级别")
def import_dets(path, out, log_level):
    """
    校验检测结果文件，可选地重新写出为规范的 JSON Lines
    """
    try:
        _setup_logging(log_level)
        from tailcal.core.io import export_detections, import_detections

        dets = import_detections(path)
        click.echo(f"读取 {len(dets)} 条检测结果，涉及 {len({d.image_id for d in dets})} 张图像")
        if out:
            export_detections(dets, out)
            click.echo(f"已写出: {out}")
    except ValueError as e:
        _fail("检测结果格式错误", e)
    except Exception as e:
        _fail("导入检测结果时发生错误", e)


def _echo_report(report) -> None:
    def fmt(value):
        return "  n/a" if value is None else f"{100 * value:5.1f}"

    bins = "  ".join(
        f"{label}={fmt(ap)} ({report.per_bin_class_count[label]}类)" for label, ap in report.per_bin_ap.items()
    )
    line = f"{report.name:<20} AP={fmt(report.overall_ap)}  {bins}"
    if report.ar_at_k is not None:
        line += f"  AR@{report.proposal_k}={fmt(report.ar_at_k)}"
    click.echo(line)


EXAMPLE_CONFIG = """
# tailcal 示例配置：未列出的字段使用默认值

world:
  num_categories: 100
  feature_dim: 32
  zipf_exponent: 1.6
  total_instances: 20000
  seed: 0

schedule:
  total_epochs: 12
  lr_stages:
    - [0, 0.01]
    - [8, 0.001]
    - [11, 0.0001]
  momentum: 0.9
  minibatch_size: 8

sampler:
  classes_per_step: 16
  images_per_class: 1

calibration:
  strategy: "cat"
  bin_edges: [10, 100, 1000]
  tail_bins: [0, 1]

decode:
  score_threshold: 0.0
  nms_iou: 0.5
  max_per_image: 300

experiment:
  training_mode: "standard"
  output_dir: "./output"
  seed: 0
"""


if __name__ == "__main__":
    tailcal()
