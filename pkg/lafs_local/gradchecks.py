"""可微算子的有限差分检查集合

每个检查在若干随机实例上调用 tensor.gradcheck，返回最大相对误差。
lafs_cli.py gradcheck 与测试共用；阈值 1e-3。
"""
from __future__ import annotations

import logging
from typing import Callable, Dict, List, Tuple

import numpy as np

from lafs_local.finetune import CosFaceHead, cosface_loss, landmark_reg
from lafs_local.geometry import bilinear_sample_batch
from lafs_local.part_fvit import ViTConfig, ViTParams, transformer_block
from lafs_local.pretrain import lafs_loss
from lafs_local.rng import make_rng
from lafs_local.tensor import (
    Tensor,
    conv2d,
    cross_entropy,
    gelu,
    gradcheck,
    layer_norm,
    matmul,
    min_max_scale,
    softmax_t,
)

logger = logging.getLogger(__name__)

TOLERANCE = 1e-3
STEP = 1e-4

# 每个检查：rng → (f, inputs)
CheckFactory = Callable[[np.random.Generator], Tuple[Callable[..., Tensor], List[Tensor]]]


def _u(rng: np.random.Generator, *shape: int) -> Tensor:
    return Tensor(rng.uniform(-1.0, 1.0, size=shape))


def _weighted(rng: np.random.Generator, shape: Tuple[int, ...]) -> np.ndarray:
    return rng.uniform(-1.0, 1.0, size=shape)


def _matmul(rng):
    w = _weighted(rng, (3, 2))
    return (lambda a, b: (matmul(a, b) * w).sum()), [_u(rng, 3, 4), _u(rng, 4, 2)]


def _conv2d(rng):
    stride = int(rng.integers(1, 3))
    x, k = _u(rng, 2, 6, 6), _u(rng, 3, 2, 3, 3)
    out_hw = (6 - 3) // stride + 1
    w = _weighted(rng, (3, out_hw, out_hw))
    return (lambda x, k: (conv2d(x, k, stride) * w).sum()), [x, k]


def _softmax_t(rng):
    temp = float(rng.uniform(0.5, 2.0))
    w = _weighted(rng, (3, 5))
    return (lambda z: (softmax_t(z, temp) * w).sum()), [_u(rng, 3, 5)]


def _softmax_cross_entropy(rng):
    labels = rng.integers(0, 5, size=4)
    return (lambda z: cross_entropy(z, labels)), [_u(rng, 4, 5)]


def _layer_norm(rng):
    w = _weighted(rng, (2, 8))
    return (lambda x, g, b: (layer_norm(x, g, b) * w).sum()), [_u(rng, 2, 8), _u(rng, 8), _u(rng, 8)]


def _gelu(rng):
    w = _weighted(rng, (6,))
    return (lambda x: (gelu(x) * w).sum()), [Tensor(rng.uniform(-3.0, 3.0, size=6))]


def _attention_block(rng):
    p = ViTParams(ViTConfig(patch_size=2, in_channels=1, dim=8, depth=1, heads=2, max_tokens=4),
                  seed=int(rng.integers(1 << 16)))
    p.freeze()
    w = _weighted(rng, (1, 3, 8))
    return (lambda x: (transformer_block(x, p, 0) * w).sum()), [_u(rng, 1, 3, 8)]


def _interior_points(rng, n: int, size: int) -> np.ndarray:
    """远离整数像素的采样点（双线性插值在整数处不可导）"""
    base = rng.integers(0, size - 1, size=(1, n, 2)).astype(np.float64)
    return base + rng.uniform(0.1, 0.9, size=(1, n, 2))


def _bilinear_image(rng):
    pts = Tensor(_interior_points(rng, 4, 5))
    w = _weighted(rng, (1, 4, 2))
    return (lambda img: (bilinear_sample_batch(img, pts) * w).sum()), [_u(rng, 1, 2, 5, 5)]


def _bilinear_coords(rng):
    img = Tensor(rng.uniform(0.0, 1.0, size=(1, 2, 5, 5)))
    w = _weighted(rng, (1, 4, 2))
    return (lambda pts: (bilinear_sample_batch(img, pts) * w).sum()), [Tensor(_interior_points(rng, 4, 5))]


def _min_max_scale(rng):
    w = _weighted(rng, (6, 2))
    return (lambda r: (min_max_scale(r) * w).sum()), [_u(rng, 6, 2)]


def _cosface(rng):
    head = CosFaceHead(5, 6, s=16.0, m=0.2, seed=int(rng.integers(1 << 16)))
    head.freeze()
    labels = rng.integers(0, 5, size=4)
    return (lambda e: cosface_loss(e, labels, head)), [_u(rng, 4, 6)]


def _landmark_reg(rng):
    r_hat = rng.uniform(0.0, 1.0, size=(5, 2))
    return (lambda r: landmark_reg(r_hat, r)), [Tensor(r_hat + rng.uniform(0.05, 0.2, size=(5, 2)))]


def _lafs_student(rng):
    def probs() -> np.ndarray:
        z = rng.normal(size=(2, 6))
        e = np.exp(z - z.max(axis=-1, keepdims=True))
        return e / e.sum(axis=-1, keepdims=True)

    teacher = [probs(), probs()]
    return (lambda a, b, c: lafs_loss(teacher, [a, b, c], 0.1)), [_u(rng, 2, 6), _u(rng, 2, 6), _u(rng, 2, 6)]


CHECKS: Dict[str, CheckFactory] = {
    "matmul": _matmul,
    "conv2d": _conv2d,
    "softmax_t": _softmax_t,
    "softmax_cross_entropy": _softmax_cross_entropy,
    "layer_norm": _layer_norm,
    "gelu": _gelu,
    "attention_block": _attention_block,
    "bilinear_sample_image": _bilinear_image,
    "bilinear_sample_coords": _bilinear_coords,
    "min_max_scale": _min_max_scale,
    "cosface_loss": _cosface,
    "landmark_reg": _landmark_reg,
    "lafs_loss_student": _lafs_student,
}


def run_check(name: str, instances: int = 5, seed: int = 0) -> float:
    factory = CHECKS[name]
    worst = 0.0
    for i in range(instances):
        f, inputs = factory(make_rng(seed, name, i))
        worst = max(worst, gradcheck(f, inputs, h=STEP))
    return worst


def run_gradcheck_suite(instances: int = 5, seed: int = 0) -> Dict[str, float]:
    """返回 {算子名: 最大相对误差}"""
    results: Dict[str, float] = {}
    for name in CHECKS:
        results[name] = run_check(name, instances, seed)
        level = logging.INFO if results[name] < TOLERANCE else logging.WARNING
        logger.log(level, f"[gradcheck] {name}: {results[name]:.2e}")
    return results
