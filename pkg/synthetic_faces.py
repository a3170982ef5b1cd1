#!/usr/bin/env python3
"""合成人脸数据生成

本模块的职责：
- SyntheticFaceSpec：画布、身份数、每身份图像数、类内扰动幅度、随机种子
- 每个身份一份「基因型」：脸部轮廓、双眼、鼻、嘴五个椭圆部件的位置、大小、灰度
- 每张图像在基因型上叠加类内扰动（平移、亮度、噪声），渲染为 8-bit PNG
- 写出 manifest.tsv（path<TAB>label），供 dataset_adapter.py 读取

本模块不会做的事情：
- 不做真实人脸采集或对齐
- 不做任何模型训练

用法:
    python synthetic_faces.py data/synth --ids 200 --per-id 5
"""
from __future__ import annotations

import argparse
import logging
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Dict, List, Tuple

import numpy as np
import yaml
from PIL import Image as PILImage

from dataset_adapter import DatasetManifest, write_manifest
from lafs_local.rng import make_rng
from lafs_local.tensor import ConfigError

logger = logging.getLogger(__name__)

# 部件顺序即绘制顺序：先轮廓，后五官
PARTS = ("face", "left_eye", "right_eye", "nose", "mouth")

# 以画布边长为单位的基准布局：(cx, cy, ax, ay, 灰度)
BASE_LAYOUT: Dict[str, Tuple[float, float, float, float, float]] = {
    "face": (0.50, 0.53, 0.36, 0.44, 0.60),
    "left_eye": (0.34, 0.42, 0.08, 0.045, 0.15),
    "right_eye": (0.66, 0.42, 0.08, 0.045, 0.15),
    "nose": (0.50, 0.58, 0.05, 0.09, 0.40),
    "mouth": (0.50, 0.76, 0.13, 0.04, 0.25),
}

BACKGROUND = 0.08


@dataclass
class SyntheticFaceSpec:
    """合成数据集规格"""

    canvas: int = 112
    n_identities: int = 200
    images_per_identity: int = 5
    channels: int = 1
    pose_shift_px: float = 3.0
    brightness_range: float = 0.08
    noise_std: float = 0.02
    seed: int = 0
    workers: int = 4

    def __post_init__(self) -> None:
        if self.canvas < 32:
            raise ConfigError(f"canvas 至少为 32，当前 {self.canvas}")
        if self.n_identities < 1 or self.images_per_identity < 1:
            raise ConfigError("n_identities 与 images_per_identity 必须 >= 1")
        if self.channels not in (1, 3):
            raise ConfigError(f"channels 只能为 1 或 3，当前 {self.channels}")
        if self.pose_shift_px < 0 or self.brightness_range < 0 or self.noise_std < 0:
            raise ConfigError("类内扰动幅度不能为负")


@dataclass
class Genotype:
    """一个身份的部件参数（像素单位）"""

    parts: Dict[str, Tuple[float, float, float, float, float]]
    tint: Tuple[float, float, float]


# ============================================================
# 基因型与渲染
# ============================================================

def make_genotype(spec: SyntheticFaceSpec, label: int) -> Genotype:
    rng = make_rng(spec.seed, "genotype", label)
    s = spec.canvas
    parts = {}
    for name in PARTS:
        cx, cy, ax, ay, level = BASE_LAYOUT[name]
        spread = 0.03 if name == "face" else 0.05
        cx = (cx + rng.uniform(-spread, spread)) * s
        cy = (cy + rng.uniform(-spread, spread)) * s
        ax = ax * rng.uniform(0.7, 1.3) * s
        ay = ay * rng.uniform(0.7, 1.3) * s
        level = float(np.clip(level + rng.uniform(-0.12, 0.12), 0.0, 1.0))
        parts[name] = (cx, cy, ax, ay, level)
    # 双眼保持大致对称
    lx, ly, lax, lay, llv = parts["left_eye"]
    rx, _, _, _, _ = parts["right_eye"]
    parts["right_eye"] = (rx, ly, lax, lay, llv)
    tint = tuple(float(v) for v in rng.uniform(0.85, 1.15, size=3))
    return Genotype(parts=parts, tint=tint)


def _ellipse_weight(xx: np.ndarray, yy: np.ndarray, part: Tuple[float, ...]) -> np.ndarray:
    cx, cy, ax, ay, _ = part
    d = np.sqrt(((xx - cx) / ax) ** 2 + ((yy - cy) / ay) ** 2)
    return np.clip(3.0 * (1.0 - d), 0.0, 1.0)


def render_image(spec: SyntheticFaceSpec, genotype: Genotype, label: int, index: int) -> np.ndarray:
    """渲染一张图像，返回 uint8 [H,W] 或 [H,W,3]

    类内扰动只依赖 (seed, label, index)，同一输入得到逐位相同的结果。
    """
    rng = make_rng(spec.seed, "jitter", label, index)
    s = spec.canvas
    dx, dy = rng.uniform(-spec.pose_shift_px, spec.pose_shift_px, size=2)
    brightness = rng.uniform(-spec.brightness_range, spec.brightness_range)
    noise = rng.standard_normal((s, s)) * spec.noise_std

    yy, xx = np.mgrid[0:s, 0:s].astype(np.float64)
    img = np.full((s, s), BACKGROUND)
    for name in PARTS:
        cx, cy, ax, ay, level = genotype.parts[name]
        # 部件中心在扰动后仍落在画布内
        cx = float(np.clip(cx + dx, 0.0, s - 1.0))
        cy = float(np.clip(cy + dy, 0.0, s - 1.0))
        w = _ellipse_weight(xx, yy, (cx, cy, ax, ay, level))
        img = img * (1.0 - w) + level * w
    img = np.clip(img + brightness + noise, 0.0, 1.0)

    if spec.channels == 3:
        img = np.clip(img[..., None] * np.asarray(genotype.tint)[None, None, :], 0.0, 1.0)
    return np.round(img * 255.0).astype(np.uint8)


def to_chw(pixels: np.ndarray) -> np.ndarray:
    """uint8 [H,W] / [H,W,3] → float32 [C,H,W]，取值 [0,1]"""
    arr = pixels.astype(np.float32) / 255.0
    if arr.ndim == 2:
        return arr[None]
    return np.transpose(arr, (2, 0, 1))


def synthetic_arrays(spec: SyntheticFaceSpec) -> Tuple[np.ndarray, np.ndarray]:
    """不落盘，直接返回 (images [N,C,S,S] float32, labels [N])，与读回 PNG 的结果一致"""
    images: List[np.ndarray] = []
    labels: List[int] = []
    for label in range(spec.n_identities):
        geno = make_genotype(spec, label)
        for k in range(spec.images_per_identity):
            images.append(to_chw(render_image(spec, geno, label, k)))
            labels.append(label)
    return np.stack(images), np.asarray(labels, dtype=np.int64)


# ============================================================
# 落盘
# ============================================================

def _write_identity(spec: SyntheticFaceSpec, out_dir: Path, label: int) -> List[Tuple[str, int]]:
    geno = make_genotype(spec, label)
    rel_dir = Path("images") / f"id_{label:05d}"
    (out_dir / rel_dir).mkdir(parents=True, exist_ok=True)
    entries = []
    for k in range(spec.images_per_identity):
        rel = rel_dir / f"{k:03d}.png"
        pixels = render_image(spec, geno, label, k)
        mode = "L" if pixels.ndim == 2 else "RGB"
        path = out_dir / rel
        try:
            PILImage.fromarray(pixels, mode=mode).save(path, format="PNG")
        except OSError as exc:
            logger.error(f"[gen-data] 写入失败 {path}: {exc}")
            raise OSError(f"写入图像失败 {path}: {exc}") from exc
        entries.append((rel.as_posix(), label))
    return entries


def generate_synthetic(spec: SyntheticFaceSpec, out_dir) -> DatasetManifest:
    """渲染全部身份并写出图像 + manifest.tsv + synthetic_spec.yaml

    按身份并行渲染；manifest 条目按 (label, index) 排序，与并行调度无关。
    """
    out_dir = Path(out_dir)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        logger.error(f"[gen-data] 无法创建目录 {out_dir}: {exc}")
        raise OSError(f"无法创建输出目录 {out_dir}: {exc}") from exc

    with ThreadPoolExecutor(max_workers=max(1, spec.workers)) as pool:
        chunks = list(pool.map(lambda lab: _write_identity(spec, out_dir, lab), range(spec.n_identities)))
    entries = [e for chunk in chunks for e in chunk]

    manifest = DatasetManifest(root=out_dir, entries=entries)
    write_manifest(manifest, out_dir / "manifest.tsv")
    spec_path = out_dir / "synthetic_spec.yaml"
    with open(spec_path, "w", encoding="utf-8") as f:
        yaml.safe_dump(asdict(spec), f, sort_keys=True)
    logger.info(f"[gen-data] {spec.n_identities} 个身份，共 {len(entries)} 张图像 → {out_dir}")
    return manifest


def parse_args(argv=None):
    parser = argparse.ArgumentParser(description="生成合成人脸数据集")
    parser.add_argument("out_dir", type=str, help="输出目录")
    parser.add_argument("--ids", type=int, default=200, help="身份数 (默认: 200)")
    parser.add_argument("--per-id", type=int, default=5, help="每个身份的图像数 (默认: 5)")
    parser.add_argument("--canvas", type=int, default=112, help="图像边长 (默认: 112)")
    parser.add_argument("--rgb", action="store_true", help="生成 RGB 图像（默认灰度）")
    parser.add_argument("--seed", type=int, default=0, help="随机种子 (默认: 0)")
    return parser.parse_args(argv)


def main(argv=None) -> int:
    args = parse_args(argv)
    spec = SyntheticFaceSpec(
        canvas=args.canvas,
        n_identities=args.ids,
        images_per_identity=args.per_id,
        channels=3 if args.rgb else 1,
        seed=args.seed,
    )
    manifest = generate_synthetic(spec, args.out_dir)
    print(f"   ✓ 已生成 {len(manifest.entries)} 张图像: {args.out_dir}")
    return 0


if __name__ == "__main__":
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    sys.exit(main())
