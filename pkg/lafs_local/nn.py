"""网络层与具名参数集合（nn）

本模块的职责：
- ParamSet：有序的「名称 → 参数张量」集合，支持冻结、复制、导出 / 导入
- 参数初始化（截断正态、Xavier 均匀）
- 常用层的函数式写法：linear、mlp

所有模型（关键点 CNN、Part fViT、DINO 头、CosFace 头）都是 ParamSet 的子类，
参数名即 checkpoint 中的条目名。
"""
from __future__ import annotations

import logging
from typing import Dict, Iterator, List, Optional, Tuple

import numpy as np

from lafs_local.tensor import DimensionError, Tensor, gelu, matmul

logger = logging.getLogger(__name__)


class ParamSet:
    """具名参数集合

    参数：
    - prefix: 名称前缀（如 "vit."），便于多个集合写进同一个 checkpoint
    """

    def __init__(self, prefix: str = "") -> None:
        self.prefix = prefix
        self._params: Dict[str, Tensor] = {}
        self.frozen = False

    # ---------- 注册与访问 ----------

    def add(self, name: str, data: np.ndarray) -> Tensor:
        if name in self._params:
            raise ValueError(f"参数名重复: {name}")
        t = Tensor(np.asarray(data, dtype=np.float32), requires_grad=not self.frozen, name=self.prefix + name)
        self._params[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __iter__(self) -> Iterator[str]:
        return iter(self._params)

    def names(self) -> List[str]:
        return list(self._params)

    def named_parameters(self) -> Dict[str, Tensor]:
        """带前缀的完整参数名 → 张量"""
        return {self.prefix + k: v for k, v in self._params.items()}

    def num_params(self) -> int:
        return int(sum(p.size for p in self._params.values()))

    # ---------- 冻结 / 梯度 ----------

    def freeze(self) -> "ParamSet":
        """冻结：所有参数 requires_grad=False，之后不会出现在任何 Tape 中（幂等）"""
        self.frozen = True
        for p in self._params.values():
            p.requires_grad = False
            p.grad = None
        return self

    def unfreeze(self) -> "ParamSet":
        self.frozen = False
        for p in self._params.values():
            p.requires_grad = True
        return self

    def zero_grad(self) -> None:
        for p in self._params.values():
            p.grad = None

    # ---------- 状态导出 / 导入 ----------

    def state_dict(self) -> Dict[str, np.ndarray]:
        return {self.prefix + k: v.data.copy() for k, v in self._params.items()}

    def load_state_dict(self, state: Dict[str, np.ndarray], strict: bool = True) -> None:
        """按带前缀的名称回填参数；strict 时缺失条目或形状不一致都会报错"""
        for name, p in self._params.items():
            key = self.prefix + name
            if key not in state:
                if strict:
                    raise KeyError(f"state 中缺少参数 {key}")
                continue
            arr = np.asarray(state[key], dtype=np.float32)
            if arr.shape != p.shape:
                raise DimensionError(f"参数 {key} 形状不一致: 期望 {p.shape}，实际 {arr.shape}")
            p.data = arr.copy()

    def copy_from(self, other: "ParamSet") -> None:
        """按名称逐个复制数值（形状必须一致）"""
        for name, p in self._params.items():
            src = other[name]
            if src.shape != p.shape:
                raise DimensionError(f"参数 {name} 形状不一致: {p.shape} vs {src.shape}")
            p.data = src.data.copy()

    def snapshot(self) -> Dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self._params.items()}


# ============================================================
# 初始化
# ============================================================

def trunc_normal(rng: np.random.Generator, shape: Tuple[int, ...], std: float = 0.02) -> np.ndarray:
    """截断到 ±2σ 的正态初始化"""
    values = rng.standard_normal(shape)
    values = np.clip(values, -2.0, 2.0)
    return (values * std).astype(np.float32)


def xavier_uniform(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=(fan_in, fan_out)).astype(np.float32)


def kaiming_conv(rng: np.random.Generator, out_ch: int, in_ch: int, k: int) -> np.ndarray:
    std = np.sqrt(2.0 / (in_ch * k * k))
    return (rng.standard_normal((out_ch, in_ch, k, k)) * std).astype(np.float32)


# ============================================================
# 函数式层
# ============================================================

def linear(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """y = x·W + b，W 形状 [in, out]"""
    y = matmul(x, weight)
    return y + bias if bias is not None else y


def mlp(x: Tensor, params: ParamSet, prefix: str, n_layers: int) -> Tensor:
    """n_layers 层全连接，层间 GELU，最后一层不激活；参数名 {prefix}{i}.w / {prefix}{i}.b"""
    for i in range(n_layers):
        x = linear(x, params[f"{prefix}{i}.w"], params[f"{prefix}{i}.b"])
        if i < n_layers - 1:
            x = gelu(x)
    return x
