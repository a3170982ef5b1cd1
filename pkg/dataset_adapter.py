"""数据集适配层

本模块的职责：
- DatasetManifest：manifest.tsv（path<TAB>label）的读写与校验
- FaceDataset：内存中的图像数组 + 标签，支持取子集与标签重编号
- 按身份划分训练 / 留出集合
- 验证对列表 pairs.tsv（path_a<TAB>path_b<TAB>is_genuine）的读写

本模块不会做的事情：
- 不生成图像（由 synthetic_faces.py 负责）
- 不计算任何指标

文件格式：
- 首行为版本注释 "# lafs-manifest v1" / "# lafs-pairs v1"，之后是带表头的 TSV
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from PIL import Image as PILImage

from lafs_local.evaluation import Pair, make_pairs
from lafs_local.rng import make_rng

logger = logging.getLogger(__name__)

MANIFEST_VERSION = 1
PAIRS_VERSION = 1


class DatasetError(ValueError):
    """manifest / 验证对文件内容不合法"""


# ============================================================
# Manifest
# ============================================================

@dataclass
class DatasetManifest:
    """root + [(相对路径, 标签)]；路径唯一、标签从 0 连续"""

    root: Path
    entries: List[Tuple[str, int]]
    version: int = MANIFEST_VERSION

    def __post_init__(self) -> None:
        self.root = Path(self.root)
        paths = [p for p, _ in self.entries]
        if len(set(paths)) != len(paths):
            raise DatasetError("manifest 中存在重复路径")
        labels = sorted({int(lab) for _, lab in self.entries})
        if labels and labels != list(range(len(labels))):
            raise DatasetError(f"标签必须从 0 连续编号，实际 {labels[:5]}...")

    @property
    def paths(self) -> List[str]:
        return [p for p, _ in self.entries]

    @property
    def labels(self) -> np.ndarray:
        return np.asarray([lab for _, lab in self.entries], dtype=np.int64)

    @property
    def num_classes(self) -> int:
        return len({lab for _, lab in self.entries})


def write_manifest(manifest: DatasetManifest, path) -> None:
    path = Path(path)
    df = pd.DataFrame(manifest.entries, columns=["path", "label"])
    try:
        with open(path, "w", encoding="utf-8", newline="") as f:
            f.write(f"# lafs-manifest v{manifest.version}\n")
            df.to_csv(f, sep="\t", index=False, lineterminator="\n")
    except OSError as exc:
        logger.error(f"[dataset] 写入 manifest 失败 {path}: {exc}")
        raise OSError(f"写入 manifest 失败 {path}: {exc}") from exc


def _read_version(path: Path, kind: str) -> int:
    with open(path, "r", encoding="utf-8") as f:
        first = f.readline().strip()
    prefix = f"# lafs-{kind} v"
    if not first.startswith(prefix):
        raise DatasetError(f"{path} 缺少版本行 '{prefix}N'")
    return int(first[len(prefix):])


def read_manifest(path) -> DatasetManifest:
    """读取 manifest.tsv；root 为文件所在目录"""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"manifest 不存在: {path}")
    version = _read_version(path, "manifest")
    if version != MANIFEST_VERSION:
        raise DatasetError(f"不支持的 manifest 版本 v{version}（期望 v{MANIFEST_VERSION}）")
    df = pd.read_csv(path, sep="\t", skiprows=1, dtype={"path": str, "label": np.int64})
    entries = list(zip(df["path"].tolist(), [int(v) for v in df["label"]]))
    return DatasetManifest(root=path.parent, entries=entries, version=version)


# ============================================================
# 内存数据集
# ============================================================

@dataclass
class FaceDataset:
    images: np.ndarray
    labels: np.ndarray
    paths: List[str] = field(default_factory=list)

    def __post_init__(self) -> None:
        self.images = np.asarray(self.images, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if len(self.images) != len(self.labels):
            raise DatasetError(f"图像数 {len(self.images)} 与标签数 {len(self.labels)} 不一致")
        if not self.paths:
            self.paths = [f"#{i}" for i in range(len(self.labels))]

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def num_classes(self) -> int:
        return len(np.unique(self.labels))

    def subset(self, indices: Sequence[int]) -> "FaceDataset":
        idx = np.asarray(indices, dtype=np.int64)
        return FaceDataset(self.images[idx], self.labels[idx], [self.paths[i] for i in idx])

    def relabeled(self) -> "FaceDataset":
        """标签按升序重编号为 0..C−1（CosFace 头需要连续类别）"""
        _, new = np.unique(self.labels, return_inverse=True)
        return FaceDataset(self.images, new.astype(np.int64), list(self.paths))


def load_image(path: Path, channels: int = 1) -> np.ndarray:
    """PNG → float32 [C,H,W]，取值 [0,1]"""
    try:
        with PILImage.open(path) as im:
            im = im.convert("L" if channels == 1 else "RGB")
            arr = np.asarray(im, dtype=np.float32) / 255.0
    except OSError as exc:
        logger.error(f"[dataset] 读取图像失败 {path}: {exc}")
        raise OSError(f"读取图像失败 {path}: {exc}") from exc
    return arr[None] if arr.ndim == 2 else np.transpose(arr, (2, 0, 1))


def load_dataset(manifest: DatasetManifest, channels: int = 1) -> FaceDataset:
    images = np.stack([load_image(manifest.root / p, channels) for p in manifest.paths])
    logger.info(f"[dataset] 载入 {len(images)} 张图像，{manifest.num_classes} 个身份")
    return FaceDataset(images, manifest.labels, manifest.paths)


def split_identities(dataset: FaceDataset, n_train: int, seed: int) -> Tuple[FaceDataset, FaceDataset]:
    """按身份划分：随机取 n_train 个身份作训练集，其余为留出集；两边各自重编号"""
    unique = np.unique(dataset.labels)
    if not 0 < n_train < len(unique):
        raise DatasetError(f"n_train 必须在 (0, {len(unique)}) 之间，当前 {n_train}")
    order = make_rng(seed, "split").permutation(unique)
    train_ids = set(int(v) for v in order[:n_train])
    mask = np.array([int(v) in train_ids for v in dataset.labels])
    train = dataset.subset(np.flatnonzero(mask)).relabeled()
    held = dataset.subset(np.flatnonzero(~mask)).relabeled()
    return train, held


# ============================================================
# 验证对
# ============================================================

def build_pairs(dataset: FaceDataset, n_genuine: int = 3000, n_impostor: int = 3000, seed: int = 0) -> List[Pair]:
    return make_pairs(dataset.labels, n_genuine, n_impostor, seed)


def write_pairs(pairs: Sequence[Pair], dataset: FaceDataset, path) -> None:
    rows = [(dataset.paths[p.a], dataset.paths[p.b], int(p.is_genuine)) for p in pairs]
    df = pd.DataFrame(rows, columns=["path_a", "path_b", "is_genuine"])
    with open(path, "w", encoding="utf-8", newline="") as f:
        f.write(f"# lafs-pairs v{PAIRS_VERSION}\n")
        df.to_csv(f, sep="\t", index=False, lineterminator="\n")


def read_pairs(path, dataset: FaceDataset) -> List[Pair]:
    """读取 pairs.tsv，并把路径映射回 dataset 中的下标"""
    path = Path(path)
    version = _read_version(path, "pairs")
    if version != PAIRS_VERSION:
        raise DatasetError(f"不支持的 pairs 版本 v{version}")
    df = pd.read_csv(path, sep="\t", skiprows=1, dtype={"path_a": str, "path_b": str})
    index = {p: i for i, p in enumerate(dataset.paths)}
    pairs: List[Pair] = []
    for a, b, same in df[["path_a", "path_b", "is_genuine"]].itertuples(index=False):
        if a not in index or b not in index:
            raise DatasetError(f"验证对引用了数据集中不存在的图像: {a} / {b}")
        pairs.append(Pair(index[a], index[b], bool(int(same))))
    return pairs


def load_pairs_or_build(path: Optional[str], dataset: FaceDataset, seed: int, n_each: int = 3000) -> List[Pair]:
    if path:
        return read_pairs(path, dataset)
    return build_pairs(dataset, n_each, n_each, seed)
