"""视图与关键点增强（augment）

本模块的职责：
- σ_d：DINO 风格多裁剪视图（2 个全局 + N 个局部），每个视图同时保留「仅几何变换」的孪生图，
  关键点 CNN 在孪生图上预测，骨干网络吃完整增强后的视图
- σ_l：关键点增强（坐标扰动、打乱）
- Sample：关键点子采样（k 个不重复下标）

本模块不会做的事情：
- 不做可学习的增强策略
- 翻转时不重排左右关键点（δ 会在翻转后的图上重新预测）

随机性：
- 全部来自 make_rng(run_seed, epoch, item, view, stream)，相同输入 + 相同种子 → 逐位相同的输出
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np
from scipy.ndimage import gaussian_filter

from lafs_local.geometry import Box, Image, LandmarkSet, crop_resize
from lafs_local.rng import make_rng
from lafs_local.tensor import ConfigError, GetItem, ParameterError, Tensor

logger = logging.getLogger(__name__)

# 随机流编号
STREAM_VIEW = 0
STREAM_SUBSAMPLE = 1
STREAM_PERTURB = 2
STREAM_SHUFFLE = 3


# ============================================================
# 配置
# ============================================================

@dataclass
class ViewConfig:
    """多裁剪视图配置

    photometric 开关：
    - jitter:        亮度 / 对比度抖动（概率 0.8）
    - blur:          高斯模糊（全局视图 1 必做，全局视图 2 概率 0.1，局部视图 0.5）
    - grayscale:     随机灰度（仅 3 通道图像，概率 0.2）
    - solarize:      曝光反转（默认只对第 2 个全局视图，概率 0.2）
    - solarize_all:  对所有视图做 solarize
    """

    n_global: int = 2
    n_local: int = 8
    global_size: int = 112
    local_size: int = 48
    crop_scale_global: Tuple[float, float] = (0.4, 1.0)
    crop_scale_local: Tuple[float, float] = (0.4, 1.0)
    flip_prob: float = 0.5
    jitter: bool = True
    jitter_strength: float = 0.4
    blur: bool = True
    grayscale: bool = True
    solarize: bool = True
    solarize_all: bool = False

    def __post_init__(self) -> None:
        for name in ("crop_scale_global", "crop_scale_local"):
            lo, hi = getattr(self, name)
            if not 0.0 < lo <= hi <= 1.0:
                raise ConfigError(f"{name} 必须满足 0 < lo <= hi <= 1，当前 {(lo, hi)}")
        if self.global_size < 8 or self.local_size < 8:
            raise ConfigError(f"视图尺寸必须 >= 8，当前 {self.global_size}/{self.local_size}")
        if self.n_global < 1 or self.n_local < 0:
            raise ConfigError(f"视图数量非法: n_global={self.n_global}, n_local={self.n_local}")
        if not 0.0 <= self.flip_prob <= 1.0:
            raise ConfigError(f"flip_prob 必须在 [0,1]，当前 {self.flip_prob}")

    @property
    def n_views(self) -> int:
        return self.n_global + self.n_local

    @classmethod
    def for_lafs(cls, **overrides) -> "ViewConfig":
        """LAFS：局部视图与全局视图同样的裁剪尺度 [0.4, 1.0]"""
        return cls(**{"crop_scale_local": (0.4, 1.0), **overrides})

    @classmethod
    def for_dino(cls, **overrides) -> "ViewConfig":
        """DINO 基线：局部视图裁剪尺度 [0.08, 0.4]"""
        return cls(**{"crop_scale_local": (0.08, 0.4), **overrides})


@dataclass
class PerturbConfig:
    """坐标扰动：r ← r + α·u，u ~ N(0,1)，α 以视图画布像素为单位"""

    alpha: float = 2.0
    stream: int = STREAM_PERTURB

    def __post_init__(self) -> None:
        if self.alpha < 0:
            raise ParameterError(f"alpha 必须 >= 0，当前 {self.alpha}")


# ============================================================
# 视图
# ============================================================

@dataclass
class View:
    """单个增强视图

    字段：
    - image:     完整增强后的图像（骨干输入），[C,S,S]
    - geometric: 仅做了裁剪缩放 + 翻转的孪生图（关键点 CNN 输入），[C,S,S]
    - box:       源图上的归一化裁剪框
    - flipped:   是否水平翻转
    - kind:      "global" / "local"
    - seed:      派生该视图的随机键
    """

    image: np.ndarray
    geometric: np.ndarray
    box: Box
    flipped: bool
    kind: str
    seed: Tuple[int, ...]

    @property
    def size(self) -> int:
        return self.image.shape[-1]


@dataclass
class ViewBatch:
    """一张图像的全部视图 + 各分支关键点

    - views[:n_global] 是教师视图 X_t（同时也是学生视图的一部分）
    - teacher_landmarks：L̂_t，每个全局视图一组完整 R 个关键点
    - student_landmarks：L̂_s，每个学生视图一组 k 个关键点
    - 两组关键点由训练步（distill_step）在 σ_l 之后填入
    """

    views: List[View]
    n_global: int
    teacher_landmarks: List[LandmarkSet] = field(default_factory=list)
    student_landmarks: List[LandmarkSet] = field(default_factory=list)

    @property
    def teacher_views(self) -> List[View]:
        return self.views[: self.n_global]

    @property
    def student_views(self) -> List[View]:
        return list(self.views)


def random_resized_box(rng: np.random.Generator, scale: Tuple[float, float]) -> Box:
    """面积占比 ~ U(scale)、正方形、位置均匀的裁剪框"""
    area = rng.uniform(scale[0], scale[1])
    side = min(math.sqrt(area), 1.0)
    x0 = rng.uniform(0.0, 1.0 - side)
    y0 = rng.uniform(0.0, 1.0 - side)
    return (x0, y0, min(x0 + side, 1.0), min(y0 + side, 1.0))


def photometric(
    image: np.ndarray,
    rng: np.random.Generator,
    cfg: ViewConfig,
    kind: str,
    view_index: int,
) -> np.ndarray:
    """颜色类增强（不改变几何），输入输出 [C,S,S]，取值 [0,1]"""
    x = image.astype(np.float32).copy()
    size = x.shape[-1]

    # 每种操作先抽随机数再看开关，保证开关不影响其它操作的随机流
    u_jitter, b_factor, c_factor = rng.random(), rng.uniform(-1, 1), rng.uniform(-1, 1)
    u_gray = rng.random()
    u_blur, sigma = rng.random(), rng.uniform(0.1, 2.0)
    u_solar = rng.random()

    if cfg.jitter and u_jitter < 0.8:
        s = cfg.jitter_strength
        mean = x.mean()
        x = (x - mean) * (1.0 + s * c_factor) + mean
        x = x * (1.0 + s * b_factor)
        x = np.clip(x, 0.0, 1.0)

    if cfg.grayscale and x.shape[0] == 3 and u_gray < 0.2:
        x = np.repeat(x.mean(axis=0, keepdims=True), 3, axis=0)

    if kind == "global":
        blur_p = 1.0 if view_index == 0 else 0.1
    else:
        blur_p = 0.5
    if cfg.blur and u_blur < blur_p:
        x = gaussian_filter(x, sigma=(0.0, sigma * size / 112.0, sigma * size / 112.0), mode="nearest")

    solar_p = 0.2 if (cfg.solarize_all or (kind == "global" and view_index == 1)) else 0.0
    if cfg.solarize and u_solar < solar_p:
        x = np.where(x >= 0.5, 1.0 - x, x)

    return np.clip(x, 0.0, 1.0).astype(np.float32)


def generate_views(img: Image, cfg: ViewConfig, seed: Sequence[int]) -> ViewBatch:
    """σ_d：生成 n_global 个全局视图与 n_local 个局部视图

    参数：
    - img:  源图像
    - cfg:  ViewConfig
    - seed: 随机键前缀，通常为 (run_seed, epoch, item)

    返回：
    - ViewBatch（关键点字段为空，由训练步骤填充）
    """
    seed = tuple(int(s) for s in seed)
    views: List[View] = []
    for v in range(cfg.n_views):
        is_global = v < cfg.n_global
        kind = "global" if is_global else "local"
        size = cfg.global_size if is_global else cfg.local_size
        scale = cfg.crop_scale_global if is_global else cfg.crop_scale_local
        key = seed + (v, STREAM_VIEW)
        rng = make_rng(*key)

        box = random_resized_box(rng, scale)
        flip = bool(rng.random() < cfg.flip_prob)
        geo = crop_resize(img, box, size).data.data
        if flip:
            geo = np.ascontiguousarray(geo[..., ::-1])
        full = photometric(geo, rng, cfg, kind, v)
        views.append(View(image=full, geometric=geo, box=box, flipped=flip, kind=kind, seed=key))
    return ViewBatch(views=views, n_global=cfg.n_global)


# ============================================================
# 关键点增强
# ============================================================

def _take(lm: LandmarkSet, order: np.ndarray) -> LandmarkSet:
    coords = GetItem.apply(lm.coords, index=order)
    return LandmarkSet(coords, [lm.indices[i] for i in order], lm.canvas)


def landmark_shuffle(
    lm: LandmarkSet,
    seed: Sequence[int],
    permutation: Optional[Sequence[int]] = None,
) -> LandmarkSet:
    """Landmark Shuffle：按均匀随机排列重排关键点行（坐标多重集不变）

    permutation 给出时直接使用（测试中用来强制恒等排列）。
    """
    if permutation is None:
        rng = make_rng(*tuple(seed), STREAM_SHUFFLE)
        order = rng.permutation(lm.count)
    else:
        order = np.asarray(permutation, dtype=np.int64)
        if sorted(order.tolist()) != list(range(lm.count)):
            raise ParameterError(f"permutation 不是 0..{lm.count - 1} 的排列")
    return _take(lm, order)


def landmark_perturb(lm: LandmarkSet, cfg: PerturbConfig, seed: Sequence[int]) -> LandmarkSet:
    """坐标扰动：逐坐标加 N(0, α²) 像素噪声，换算为归一化单位（除以 canvas−1），再裁剪到 [0,1]"""
    if cfg.alpha == 0:
        return LandmarkSet(lm.coords, list(lm.indices), lm.canvas)
    rng = make_rng(*tuple(seed), cfg.stream)
    noise = rng.standard_normal(lm.coords.shape) * (cfg.alpha / (lm.canvas - 1))
    base = lm.coords.data.astype(np.float64)
    moved = np.clip(base + noise, 0.0, 1.0)
    if lm.coords.requires_grad:
        # 裁剪按直通处理，坐标梯度照常回传
        coords = lm.coords + Tensor(moved - base)
    else:
        coords = Tensor(moved)
    return LandmarkSet(coords, list(lm.indices), lm.canvas)


def subsample_landmarks(
    lm: LandmarkSet,
    k: int,
    seed: Sequence[int],
    sorted_draw: bool = False,
) -> LandmarkSet:
    """Sample：无放回均匀抽取 k 个关键点，默认保留抽取顺序；sorted_draw 时按下标排序"""
    if not 1 <= k <= lm.count:
        raise ParameterError(f"子采样数 k 必须在 [1, {lm.count}]，当前 {k}")
    rng = make_rng(*tuple(seed), STREAM_SUBSAMPLE)
    order = rng.choice(lm.count, size=k, replace=False)
    if sorted_draw:
        order = np.sort(order)
    return _take(lm, np.asarray(order, dtype=np.int64))


def apply_landmark_augs(
    lm: LandmarkSet,
    seed: Sequence[int],
    perturb: Optional[PerturbConfig] = None,
    shuffle: bool = False,
) -> LandmarkSet:
    """σ_l：先扰动、后打乱"""
    out = lm
    if perturb is not None:
        out = landmark_perturb(out, perturb, seed)
    if shuffle:
        out = landmark_shuffle(out, seed)
    return out
