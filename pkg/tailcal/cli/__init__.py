"""
tailcal CLI 模块
"""

from .cli import tailcal, version, init_config, gen_world, train, calibrate, evaluate, run, import_dets

__all__ = [
    'tailcal',
    'version',
    'init_config',
    'gen_world',
    'train',
    'calibrate',
    'evaluate',
    'run',
    'import_dets'
]
