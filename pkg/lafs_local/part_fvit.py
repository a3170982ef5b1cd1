"""Part fViT / fViT 图块 Transformer（part_fvit）

本模块的职责：
- ViTParams：线性投影 E、class token、按序列位置绑定的位置编码、L 个 pre-norm Transformer 块
- tokenize：图块展平 → E → 前置 class token → 加位置编码（按序列槽位，而非关键点身份）
- encode：Transformer 编码，返回 class token 的输出
- forward_part_fvit：关键点图块路径（端到端可微，包括关键点坐标）
- forward_fvit：规则网格路径（基线）
- FaceModel：关键点 CNN + ViT 的组合，给微调与评估使用

本模块不会做的事情：
- 不做 token 剪枝、窗口注意力、大规模配置

说明：
- 子集视图（如 36 个关键点）使用位置编码的前 k+1 行（截断，不插值）
- 打乱图块顺序会改变每个图块拿到的位置编码，这正是 Landmark Shuffle 的作用机制
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import List, Optional, Sequence

import numpy as np

from lafs_local.geometry import Image, LandmarkSet, PatchStack, extract_patches_batch
from lafs_local.localizer import LocalizerParams, predict_landmarks_batch
from lafs_local.nn import ParamSet, linear, trunc_normal, xavier_uniform
from lafs_local.rng import make_rng
from lafs_local.tensor import (
    ConfigError,
    DimensionError,
    Tensor,
    concat,
    gelu,
    layer_norm,
    matmul,
    softmax_t,
)

logger = logging.getLogger(__name__)


@dataclass
class ViTConfig:
    """图块 Transformer 配置（桌面规模默认 d=64, L=4, 4 头）"""

    patch_size: int = 8
    in_channels: int = 1
    dim: int = 64
    depth: int = 4
    heads: int = 4
    mlp_ratio: int = 2
    max_tokens: int = 196

    def __post_init__(self) -> None:
        if self.dim % self.heads != 0:
            raise ConfigError(f"dim={self.dim} 不能被 heads={self.heads} 整除")
        if self.patch_size < 1 or self.max_tokens < 1:
            raise ConfigError(f"patch_size / max_tokens 必须 >= 1，当前 {self.patch_size} / {self.max_tokens}")

    @property
    def patch_dim(self) -> int:
        return self.in_channels * self.patch_size * self.patch_size


class ViTParams(ParamSet):
    """Part fViT 参数

    参数名：
    - patch_proj [C·P·P, d]（E，无偏置）
    - class_token [d]
    - pos_emb [R_max+1, d]（第 0 行留给 class token）
    - blocks.{l}.norm1.g/b, blocks.{l}.attn.qkv.w/b, blocks.{l}.attn.out.w/b,
      blocks.{l}.norm2.g/b, blocks.{l}.mlp0.w/b, blocks.{l}.mlp1.w/b
    - norm.g / norm.b（最终 LayerNorm）
    """

    def __init__(self, cfg: ViTConfig, seed: int = 0, prefix: str = "vit.") -> None:
        super().__init__(prefix)
        self.cfg = cfg
        rng = make_rng(seed, 0xF1)
        d, h = cfg.dim, cfg.dim * cfg.mlp_ratio
        self.add("patch_proj", xavier_uniform(rng, cfg.patch_dim, d))
        self.add("class_token", trunc_normal(rng, (d,)))
        self.add("pos_emb", trunc_normal(rng, (cfg.max_tokens + 1, d)))
        for layer in range(cfg.depth):
            b = f"blocks.{layer}."
            self.add(b + "norm1.g", np.ones(d))
            self.add(b + "norm1.b", np.zeros(d))
            self.add(b + "attn.qkv.w", xavier_uniform(rng, d, 3 * d))
            self.add(b + "attn.qkv.b", np.zeros(3 * d))
            self.add(b + "attn.out.w", xavier_uniform(rng, d, d))
            self.add(b + "attn.out.b", np.zeros(d))
            self.add(b + "norm2.g", np.ones(d))
            self.add(b + "norm2.b", np.zeros(d))
            self.add(b + "mlp0.w", xavier_uniform(rng, d, h))
            self.add(b + "mlp0.b", np.zeros(h))
            self.add(b + "mlp1.w", xavier_uniform(rng, h, d))
            self.add(b + "mlp1.b", np.zeros(d))
        self.add("norm.g", np.ones(d))
        self.add("norm.b", np.zeros(d))

    def depth_of(self, name: str) -> int:
        """参数所在的深度：嵌入层为 0，第 l 个块为 l+1，最终 norm 为 depth+1"""
        if name.startswith("blocks."):
            return int(name.split(".")[1]) + 1
        if name.startswith("norm."):
            return self.cfg.depth + 1
        return 0


@dataclass
class EmbeddingOutput:
    """class token 输出的身份嵌入，Tensor[d]"""

    embedding: Tensor


# ============================================================
# tokenize / encode
# ============================================================

def tokenize_batch(patches: Tensor, p: ViTParams) -> Tensor:
    """patches [B,R,C,P,P] → tokens [B,R+1,d]"""
    cfg = p.cfg
    if patches.ndim != 5:
        raise DimensionError(f"tokenize 需要 [B,R,C,P,P] 图块，当前 {patches.shape}")
    b, r = patches.shape[0], patches.shape[1]
    flat_dim = patches.shape[2] * patches.shape[3] * patches.shape[4]
    if flat_dim != p["patch_proj"].shape[0]:
        raise DimensionError(f"图块维度 {patches.shape[2:]} 与投影 E {p['patch_proj'].shape} 不匹配")
    if r > cfg.max_tokens:
        raise DimensionError(f"图块数 {r} 超过位置编码上限 R_max={cfg.max_tokens}")

    tokens = matmul(patches.reshape(b, r, flat_dim), p["patch_proj"])
    cls = Tensor(np.zeros((b, 1, cfg.dim))) + p["class_token"]
    seq = concat([cls, tokens], axis=1)
    return seq + p["pos_emb"][0:r + 1]


def tokenize(patches: PatchStack, p: ViTParams) -> Tensor:
    """单图版本：PatchStack[R,C,P,P] → Tensor[R+1, d]"""
    x = patches.patches
    out = tokenize_batch(x.reshape((1,) + x.shape), p)
    return out.reshape(out.shape[1:])


def attention(x: Tensor, p: ViTParams, prefix: str) -> Tensor:
    """多头自注意力，x [B,T,d]"""
    b, t, d = x.shape
    heads = p.cfg.heads
    dh = d // heads
    qkv = linear(x, p[prefix + "qkv.w"], p[prefix + "qkv.b"])
    qkv = qkv.reshape(b, t, 3, heads, dh).transpose(2, 0, 3, 1, 4)   # [3,B,H,T,dh]
    q, k, v = qkv[0], qkv[1], qkv[2]
    scores = matmul(q, k.transpose(0, 1, 3, 2)) * (1.0 / math.sqrt(dh))
    attn = softmax_t(scores, 1.0)
    out = matmul(attn, v).transpose(0, 2, 1, 3).reshape(b, t, d)
    return linear(out, p[prefix + "out.w"], p[prefix + "out.b"])


def transformer_block(x: Tensor, p: ViTParams, layer: int) -> Tensor:
    b = f"blocks.{layer}."
    h = x + attention(layer_norm(x, p[b + "norm1.g"], p[b + "norm1.b"]), p, b + "attn.")
    m = layer_norm(h, p[b + "norm2.g"], p[b + "norm2.b"])
    m = linear(gelu(linear(m, p[b + "mlp0.w"], p[b + "mlp0.b"])), p[b + "mlp1.w"], p[b + "mlp1.b"])
    return h + m


def encode_batch(tokens: Tensor, p: ViTParams) -> Tensor:
    """tokens [B,T,d] → class token 输出 [B,d]（经过最终 LayerNorm）"""
    if tokens.ndim != 3 or tokens.shape[1] < 1:
        raise DimensionError(f"encode 需要至少 1 个 token 的 [B,T,d] 输入，当前 {tokens.shape}")
    x = tokens
    for layer in range(p.cfg.depth):
        x = transformer_block(x, p, layer)
    return layer_norm(x[:, 0, :], p["norm.g"], p["norm.b"])


def encode(tokens: Tensor, p: ViTParams) -> EmbeddingOutput:
    """单序列版本：tokens [T,d] → EmbeddingOutput"""
    out = encode_batch(tokens.reshape((1,) + tokens.shape), p)
    return EmbeddingOutput(out.reshape(out.shape[1:]))


# ============================================================
# 两条前向路径
# ============================================================

def part_fvit_embed(images: Tensor, coords: Tensor, p: ViTParams) -> Tensor:
    """关键点路径：images [B,C,S,S]，coords [B,k,2]（归一化）→ [B,d]"""
    patches = extract_patches_batch(images, coords, p.cfg.patch_size)
    return encode_batch(tokenize_batch(patches, p), p)


def grid_patches(images: Tensor, patch_size: int) -> Tensor:
    """非重叠网格切块：[B,C,S,S] → [B,(S/P)²,C,P,P]，行优先"""
    b, c, h, w = images.shape
    if h % patch_size != 0 or w % patch_size != 0:
        raise ConfigError(f"图像尺寸 {h}×{w} 不能被网格块大小 {patch_size} 整除")
    nh, nw = h // patch_size, w // patch_size
    x = images.reshape(b, c, nh, patch_size, nw, patch_size)
    x = x.transpose(0, 2, 4, 1, 3, 5)
    return x.reshape(b, nh * nw, c, patch_size, patch_size)


def fvit_embed(images: Tensor, p: ViTParams, order: Optional[Sequence[int]] = None) -> Tensor:
    """网格路径：images [B,C,S,S] → [B,d]；order 给出时按该顺序重排网格块（网格打乱）"""
    patches = grid_patches(images, p.cfg.patch_size)
    if order is not None:
        patches = patches[:, np.asarray(order, dtype=np.int64)]
    return encode_batch(tokenize_batch(patches, p), p)


def forward_part_fvit(img: Image, lm: LandmarkSet, vit: ViTParams) -> EmbeddingOutput:
    """extract_patches ∘ tokenize ∘ encode（单张图）"""
    if lm.count > vit.cfg.max_tokens:
        raise DimensionError(f"关键点数 {lm.count} 超过 R_max={vit.cfg.max_tokens}")
    data, coords = img.data, lm.coords
    out = part_fvit_embed(data.reshape((1,) + data.shape), coords.reshape((1,) + coords.shape), vit)
    return EmbeddingOutput(out.reshape(out.shape[1:]))


def forward_fvit(img: Image, vit: ViTParams) -> EmbeddingOutput:
    """规则网格基线（单张图）"""
    data = img.data
    out = fvit_embed(data.reshape((1,) + data.shape), vit)
    return EmbeddingOutput(out.reshape(out.shape[1:]))


# ============================================================
# 组合模型
# ============================================================

@dataclass
class FaceModel:
    """人脸识别骨干

    - localizer 不为 None：Part fViT（关键点 CNN 预测坐标 → 采样图块）
    - localizer 为 None：grid fViT
    """

    vit: ViTParams
    localizer: Optional[LocalizerParams] = None

    @property
    def is_grid(self) -> bool:
        return self.localizer is None

    def landmarks(self, images: Tensor) -> Tensor:
        if self.localizer is None:
            raise ConfigError("grid fViT 没有关键点 CNN")
        return predict_landmarks_batch(images, self.localizer)

    def embed(self, images: Tensor) -> Tensor:
        """images [B,C,S,S] → 未归一化的身份嵌入 [B,d]"""
        if self.is_grid:
            return fvit_embed(images, self.vit)
        return part_fvit_embed(images, self.landmarks(images), self.vit)

    def param_sets(self) -> List[ParamSet]:
        sets: List[ParamSet] = [self.vit]
        if self.localizer is not None:
            sets.append(self.localizer)
        return sets
