import hashlib
import json
from typing import Any


def canonical_json(payload: Any) -> str:
    """稳定的 JSON 文本（键排序、无多余空白），用于指纹计算"""
    return json.dumps(payload, sort_keys=True, separators=(",", ":"), ensure_ascii=False)


def fingerprint(payload: Any) -> str:
    """payload 的 sha256 指纹"""
    return hashlib.sha256(canonical_json(payload).encode("utf-8")).hexdigest()
