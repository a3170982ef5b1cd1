"""可复现随机数（rng）

所有随机性都来自以显式键派生的 Philox 计数器生成器：
    make_rng(run_seed, epoch, item, view)
相同的键 → 相同的随机流，与调用顺序、并发方式无关。
"""
from __future__ import annotations

import hashlib
from typing import Union

import numpy as np


def _key_to_int(key: Union[int, str]) -> int:
    if isinstance(key, str):
        return int.from_bytes(hashlib.sha256(key.encode("utf-8")).digest()[:8], "little")
    return int(key) & 0xFFFFFFFFFFFFFFFF


def make_rng(*keys: Union[int, str]) -> np.random.Generator:
    """由一组整数（或字符串标签）键派生独立的 Philox 生成器"""
    entropy = [_key_to_int(k) for k in keys] or [0]
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(entropy)))
