"""图像几何运算（geometry）

本模块的职责：
- 定义 Image / LandmarkSet / PatchStack 三种数据结构
- 可微双线性采样（STN 风格，越界按 0 填充），对图像和坐标都可求导
- 以关键点为中心提取 P×P 图块（单位像素间距）
- 视图构造需要的裁剪缩放 crop_resize 与水平翻转 hflip
- 规则网格中心点（grid fViT 与 Part fViT 的一致性检查用）

本模块不会做的事情：
- 不做抗锯齿重采样，不做旋转 / 仿射 STN
- 不决定随机裁剪框（交给 augment.py）

坐标约定：
- 归一化坐标 [0,1] 与像素坐标的映射为角点对齐：x_px = x·(W−1)，y_px = y·(H−1)
- 点坐标按 (x, y) 存放，x 为列、y 为行
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import List, Tuple, Union

import numpy as np

from lafs_local.tensor import (
    DimensionError,
    Function,
    ParameterError,
    Tensor,
    as_tensor,
)

logger = logging.getLogger(__name__)


# ============================================================
# 数据结构
# ============================================================

@dataclass
class Image:
    """单张图像，data 为 Tensor[C, H, W]，取值 [0,1]"""

    data: Tensor

    def __post_init__(self) -> None:
        if not isinstance(self.data, Tensor):
            self.data = Tensor(np.clip(np.asarray(self.data, dtype=np.float32), 0.0, 1.0))
        if self.data.ndim != 3 or self.data.shape[0] not in (1, 3):
            raise DimensionError(f"Image 需要 [C,H,W] 且 C∈{{1,3}}，当前 {self.data.shape}")

    @property
    def channels(self) -> int:
        return self.data.shape[0]

    @property
    def height(self) -> int:
        return self.data.shape[1]

    @property
    def width(self) -> int:
        return self.data.shape[2]

    @classmethod
    def from_array(cls, array: np.ndarray) -> "Image":
        """从 [H,W] 或 [C,H,W] 数组构造，数值裁剪到 [0,1]"""
        arr = np.asarray(array, dtype=np.float32)
        if arr.ndim == 2:
            arr = arr[None]
        return cls(Tensor(np.clip(arr, 0.0, 1.0)))


@dataclass
class LandmarkSet:
    """R 个归一化关键点坐标

    字段：
    - coords:  Tensor[R, 2]，每行 [x, y] ∈ [0,1]
    - indices: 这些点在完整关键点集合中的下标（子采样 / 打乱后用于追溯）
    - canvas:  坐标所在视图的边长（像素），扰动时换算 α 用
    """

    coords: Tensor
    indices: List[int] = field(default_factory=list)
    canvas: int = 112

    def __post_init__(self) -> None:
        if not isinstance(self.coords, Tensor):
            self.coords = Tensor(self.coords)
        if self.coords.ndim != 2 or self.coords.shape[1] != 2:
            raise DimensionError(f"LandmarkSet 需要 [R,2] 坐标，当前 {self.coords.shape}")
        if not self.indices:
            self.indices = list(range(self.coords.shape[0]))

    @property
    def count(self) -> int:
        return self.coords.shape[0]

    def detach(self) -> "LandmarkSet":
        return LandmarkSet(self.coords.detach(), list(self.indices), self.canvas)


@dataclass
class PatchStack:
    """图块栈：patches 为 Tensor[R, C, P, P]，indices 为来源关键点下标"""

    patches: Tensor
    indices: List[int]

    @property
    def patch_size(self) -> int:
        return self.patches.shape[-1]


ImageLike = Union[Image, Tensor]


def _image_tensor(img: ImageLike) -> Tensor:
    return img.data if isinstance(img, Image) else img


# ============================================================
# 双线性采样
# ============================================================

class BilinearSample(Function):
    """批量双线性采样：图像 [B,C,H,W]，点 [B,N,2]（像素坐标 x,y）→ [B,N,C]

    四邻域插值，越界邻居贡献 0；对图像与坐标均可微。
    """

    op_name = "bilinear_sample"

    def forward(self, img, pts):
        b, c, h, w = img.shape
        x = pts[..., 0].astype(np.float64)
        y = pts[..., 1].astype(np.float64)
        x0 = np.floor(x)
        y0 = np.floor(y)
        wx = x - x0
        wy = y - y0
        x0 = x0.astype(np.int64)
        y0 = y0.astype(np.int64)
        x1 = x0 + 1
        y1 = y0 + 1

        img_hwc = np.transpose(img, (0, 2, 3, 1))
        bidx = np.arange(b)[:, None]

        corners = {}
        for key, (iy, ix) in {"00": (y0, x0), "01": (y0, x1), "10": (y1, x0), "11": (y1, x1)}.items():
            valid = (ix >= 0) & (ix < w) & (iy >= 0) & (iy < h)
            iyc = np.clip(iy, 0, h - 1)
            ixc = np.clip(ix, 0, w - 1)
            vals = img_hwc[bidx, iyc, ixc].astype(np.float64) * valid[..., None]
            corners[key] = (vals, iyc, ixc, valid)

        self.shape = img.shape
        self.corners = corners
        self.wx, self.wy = wx, wy
        self.bidx = bidx

        v00, v01, v10, v11 = (corners[k][0] for k in ("00", "01", "10", "11"))
        ax, ay = wx[..., None], wy[..., None]
        return (
            v00 * (1.0 - ax) * (1.0 - ay)
            + v01 * ax * (1.0 - ay)
            + v10 * (1.0 - ax) * ay
            + v11 * ax * ay
        )

    def backward(self, grad):
        b, c, h, w = self.shape
        wx, wy = self.wx, self.wy
        weights = {
            "00": (1.0 - wx) * (1.0 - wy),
            "01": wx * (1.0 - wy),
            "10": (1.0 - wx) * wy,
            "11": wx * wy,
        }
        g_img = np.zeros((b, h, w, c), dtype=np.float64)
        bidx = np.broadcast_to(self.bidx, wx.shape)
        for key, wgt in weights.items():
            _, iyc, ixc, valid = self.corners[key]
            np.add.at(g_img, (bidx, iyc, ixc), grad * (wgt * valid)[..., None])

        v00, v01, v10, v11 = (self.corners[k][0] for k in ("00", "01", "10", "11"))
        ax, ay = wx[..., None], wy[..., None]
        gx = np.sum(grad * ((1.0 - ay) * (v01 - v00) + ay * (v11 - v10)), axis=-1)
        gy = np.sum(grad * ((1.0 - ax) * (v10 - v00) + ax * (v11 - v01)), axis=-1)
        return np.transpose(g_img, (0, 3, 1, 2)), np.stack([gx, gy], axis=-1)


class SnapToPixel(Function):
    """把距整数像素 < tol 的坐标吸附到整数（消除 float32 归一化舍入），梯度直通"""

    op_name = "snap_to_pixel"

    def forward(self, pts, tol=1e-4):
        nearest = np.round(pts)
        return np.where(np.abs(pts - nearest) < tol, nearest, pts)

    def backward(self, grad):
        return (grad,)


def bilinear_sample_batch(images: Tensor, points: Tensor) -> Tensor:
    """批量版本：images [B,C,H,W]，points [B,N,2] → [B,N,C]"""
    if images.ndim != 4 or points.ndim != 3 or points.shape[-1] != 2 or points.shape[0] != images.shape[0]:
        raise DimensionError(f"bilinear_sample 形状不匹配: images={images.shape}, points={points.shape}")
    return BilinearSample.apply(images, points)


def bilinear_sample(img: ImageLike, points: Tensor) -> Tensor:
    """对单张图像在 N 个像素坐标点 (x, y) 上做双线性采样，返回 Tensor[N, C]"""
    data = _image_tensor(img)
    points = as_tensor(points)
    if points.ndim != 2 or points.shape[1] != 2:
        raise DimensionError(f"points 需要 [N,2]，当前 {points.shape}")
    out = bilinear_sample_batch(data.reshape((1,) + data.shape), points.reshape((1,) + points.shape))
    return out.reshape(out.shape[1:])


# ============================================================
# 图块提取
# ============================================================

def patch_offsets(patch_size: int) -> np.ndarray:
    """P×P 采样网格相对中心的偏移，行优先，返回 [P·P, 2]（dx, dy）"""
    if patch_size < 1:
        raise ParameterError(f"patch_size 必须 >= 1，当前 {patch_size}")
    o = np.arange(patch_size, dtype=np.float64) - (patch_size - 1) / 2.0
    dy, dx = np.meshgrid(o, o, indexing="ij")
    return np.stack([dx.reshape(-1), dy.reshape(-1)], axis=-1)


def extract_patches_batch(images: Tensor, coords: Tensor, patch_size: int) -> Tensor:
    """批量提取图块

    参数：
    - images:     Tensor[B, C, H, W]
    - coords:     Tensor[B, R, 2]，归一化坐标
    - patch_size: P

    返回：
    - Tensor[B, R, C, P, P]
    """
    b, c, h, w = images.shape
    r = coords.shape[1]
    p = patch_size
    scale = as_tensor(np.array([w - 1, h - 1], dtype=np.float64))
    centers = coords * scale                                  # [B,R,2] 像素坐标
    offsets = as_tensor(patch_offsets(p)[None, None])         # [1,1,P·P,2]
    points = centers.reshape(b, r, 1, 2) + offsets            # [B,R,P·P,2]
    points = SnapToPixel.apply(points.reshape(b, r * p * p, 2))
    sampled = bilinear_sample_batch(images, points)
    return sampled.reshape(b, r, p, p, c).transpose(0, 1, 4, 2, 3)


def extract_patches(img: ImageLike, lm: LandmarkSet, patch_size: int) -> PatchStack:
    """以每个关键点为中心、单位像素间距采样 P×P 图块，梯度同时流向图像与坐标"""
    data = _image_tensor(img)
    coords = lm.coords
    stacked = extract_patches_batch(
        data.reshape((1,) + data.shape),
        coords.reshape((1,) + coords.shape),
        patch_size,
    )
    return PatchStack(patches=stacked.reshape(stacked.shape[1:]), indices=list(lm.indices))


def grid_landmarks(image_size: int, patch_size: int) -> np.ndarray:
    """非重叠网格块的中心点（归一化坐标），行优先，返回 [(S/P)², 2]

    在奇数 P 时中心恰为整数像素，此时 extract_patches 与直接切块逐位一致。
    """
    if image_size % patch_size != 0:
        raise ParameterError(f"图像尺寸 {image_size} 不能被网格块大小 {patch_size} 整除")
    n = image_size // patch_size
    centers = np.arange(n, dtype=np.float64) * patch_size + (patch_size - 1) / 2.0
    gy, gx = np.meshgrid(centers, centers, indexing="ij")
    pts = np.stack([gx.reshape(-1), gy.reshape(-1)], axis=-1)
    return pts / (image_size - 1)


# ============================================================
# 裁剪缩放 / 翻转
# ============================================================

Box = Tuple[float, float, float, float]


def _validate_box(box: Box) -> None:
    x0, y0, x1, y1 = box
    if not (0.0 <= x0 <= 1.0 and 0.0 <= y0 <= 1.0 and 0.0 <= x1 <= 1.0 and 0.0 <= y1 <= 1.0):
        raise ParameterError(f"裁剪框必须位于 [0,1]² 内，当前 {box}")
    if x1 <= x0 or y1 <= y0:
        raise ParameterError(f"裁剪框面积为 0: {box}")


def crop_points(box: Box, width: int, height: int, out: int) -> np.ndarray:
    """裁剪框在源图上的 out×out 采样点（像素坐标），行优先，返回 [out·out, 2]"""
    x0, y0, x1, y1 = box
    j = np.arange(out, dtype=np.float64)
    # 先乘后除：整框、同尺寸时得到精确整数坐标
    xs = x0 * (width - 1) + (x1 - x0) * (width - 1) * j / (out - 1)
    ys = y0 * (height - 1) + (y1 - y0) * (height - 1) * j / (out - 1)
    gy, gx = np.meshgrid(ys, xs, indexing="ij")
    return np.stack([gx.reshape(-1), gy.reshape(-1)], axis=-1)


def crop_resize(img: ImageLike, box: Box, out: int) -> Image:
    """把归一化裁剪框 (x0, y0, x1, y1) 双线性重采样为 out×out"""
    if out < 2:
        raise ParameterError(f"crop_resize 输出尺寸必须 >= 2，当前 {out}")
    _validate_box(box)
    data = _image_tensor(img)
    c, h, w = data.shape
    pts = Tensor(crop_points(box, w, h, out))
    sampled = bilinear_sample(data, pts)                     # [out·out, C]
    return Image(sampled.transpose(1, 0).reshape(c, out, out))


def hflip(img: ImageLike) -> Image:
    """水平翻转：列镜像，(x, y) → (W−1−x, y)"""
    data = _image_tensor(img)
    return Image(Tensor(np.ascontiguousarray(data.data[..., ::-1])))
