"""关键点 CNN δ（localizer）

本模块的职责：
- 小型卷积网络：4 个 stride-2 卷积块 → 全局平均池化 → 两层全连接 → 2R 个原始坐标
- 原始坐标按图像、按坐标轴做 min-max 缩放（min→0，max→1），缩放保留在 Tape 上
- freeze：冻结后任何 Tape 都不会记录其参数

本模块不会做的事情：
- 不做监督预训练（交给 bootstrap.py）
- 不做人脸关键点基准意义上的热图回归
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Tuple

import numpy as np

from lafs_local.geometry import Image, LandmarkSet
from lafs_local.nn import ParamSet, kaiming_conv, linear, xavier_uniform
from lafs_local.rng import make_rng
from lafs_local.tensor import (
    ConfigError,
    DimensionError,
    Tensor,
    conv2d,
    gelu,
    min_max_scale,
    relu,
)

logger = logging.getLogger(__name__)


@dataclass
class LocalizerConfig:
    """关键点 CNN 配置"""

    n_landmarks: int = 196
    in_channels: int = 1
    channels: Tuple[int, ...] = (8, 16, 32, 32)
    kernel: int = 3
    stride: int = 2
    hidden: int = 64

    def __post_init__(self) -> None:
        if self.n_landmarks < 2:
            raise ConfigError(f"关键点数 R 必须 >= 2（min-max 缩放需要），当前 {self.n_landmarks}")
        if not self.channels:
            raise ConfigError("channels 不能为空")

    @property
    def min_input_size(self) -> int:
        size = 1
        for _ in self.channels:
            size = (size - 1) * self.stride + self.kernel
        return size


def initial_layout(n_landmarks: int, seed: int = 0) -> np.ndarray:
    """输出层偏置的初始布局：R 为平方数时取规则网格中心，否则均匀随机"""
    side = int(round(math.sqrt(n_landmarks)))
    if side * side == n_landmarks:
        c = (np.arange(side) + 0.5) / side
        gy, gx = np.meshgrid(c, c, indexing="ij")
        return np.stack([gx.reshape(-1), gy.reshape(-1)], axis=-1)
    return make_rng(seed, 0x1A7).uniform(0.05, 0.95, size=(n_landmarks, 2))


class LocalizerParams(ParamSet):
    """关键点 CNN 的参数

    参数名：
    - conv{i}.w [C_out, C_in, k, k], conv{i}.b [C_out]
    - fc0.w [C_last, hidden], fc0.b, fc1.w [hidden, 2R], fc1.b
    """

    def __init__(self, cfg: LocalizerConfig, seed: int = 0, prefix: str = "localizer.") -> None:
        super().__init__(prefix)
        self.cfg = cfg
        rng = make_rng(seed, 0x10C)
        in_ch = cfg.in_channels
        for i, out_ch in enumerate(cfg.channels):
            self.add(f"conv{i}.w", kaiming_conv(rng, out_ch, in_ch, cfg.kernel))
            self.add(f"conv{i}.b", np.zeros(out_ch))
            in_ch = out_ch
        self.add("fc0.w", xavier_uniform(rng, in_ch, cfg.hidden))
        self.add("fc0.b", np.zeros(cfg.hidden))
        self.add("fc1.w", xavier_uniform(rng, cfg.hidden, 2 * cfg.n_landmarks) * 0.1)
        self.add("fc1.b", initial_layout(cfg.n_landmarks, seed).reshape(-1))

    @property
    def n_landmarks(self) -> int:
        return self.cfg.n_landmarks


def raw_landmarks(images: Tensor, p: LocalizerParams) -> Tensor:
    """卷积主干 + 回归头，返回未缩放的坐标 Tensor[B, R, 2]"""
    if images.ndim != 4 or images.shape[2] != images.shape[3]:
        raise DimensionError(f"关键点 CNN 需要方形 [B,C,H,W] 输入，当前 {images.shape}")
    if images.shape[2] < p.cfg.min_input_size:
        raise DimensionError(f"输入尺寸 {images.shape[2]} 小于网络最小输入 {p.cfg.min_input_size}")

    x = images
    for i in range(len(p.cfg.channels)):
        x = conv2d(x, p[f"conv{i}.w"], stride=p.cfg.stride)
        x = relu(x + p[f"conv{i}.b"].reshape(-1, 1, 1))
    feat = x.mean(axis=(2, 3))
    h = gelu(linear(feat, p["fc0.w"], p["fc0.b"]))
    out = linear(h, p["fc1.w"], p["fc1.b"])
    return out.reshape(images.shape[0], p.n_landmarks, 2)


def predict_landmarks_batch(images: Tensor, p: LocalizerParams) -> Tensor:
    """批量预测：Tensor[B,C,S,S] → 归一化坐标 Tensor[B,R,2]（每张图每个轴 min=0、max=1）"""
    return min_max_scale(raw_landmarks(images, p))


def predict_landmarks(img: Image, p: LocalizerParams) -> LandmarkSet:
    """单张图像预测 R 个归一化关键点（确定性，无 dropout / 噪声）"""
    data = img.data
    coords = predict_landmarks_batch(data.reshape((1,) + data.shape), p)
    return LandmarkSet(coords.reshape(p.n_landmarks, 2), canvas=img.width)


def freeze(p: LocalizerParams) -> LocalizerParams:
    """冻结关键点 CNN（幂等）"""
    if not p.frozen:
        logger.info(f"[localizer] 冻结关键点 CNN，共 {p.num_params()} 个参数")
    p.freeze()
    return p


def mean_pairwise_distance(coords: np.ndarray) -> float:
    """关键点两两之间的平均欧氏距离（退化检测用）"""
    c = np.asarray(coords, dtype=np.float64).reshape(-1, 2)
    diff = c[:, None, :] - c[None, :, :]
    dist = np.sqrt(np.sum(diff * diff, axis=-1))
    n = c.shape[0]
    return float(dist.sum() / max(n * (n - 1), 1))
