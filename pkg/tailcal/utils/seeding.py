"""
可复现的随机数流

每个实验阶段（世界生成、训练、采样……）使用独立命名的随机数流，
保证同一 seed 下各阶段互不干扰、结果逐位一致。
"""

import zlib
from typing import Union

import numpy as np


def derive_rng(seed: int, *labels: Union[str, int]) -> np.random.Generator:
    """
    根据 seed 和阶段标签派生独立的 numpy Generator

    Args:
        seed: 实验种子（非负整数）
        *labels: 阶段标签，字符串按 crc32 映射为整数

    Returns:
        numpy 随机数生成器
    """
    if seed < 0:
        raise ValueError(f"seed 必须为非负整数: {seed}")
    entropy = [int(seed)]
    for label in labels:
        if isinstance(label, str):
            entropy.append(zlib.crc32(label.encode("utf-8")))
        else:
            entropy.append(int(label))
    return np.random.default_rng(np.random.SeedSequence(entropy))
