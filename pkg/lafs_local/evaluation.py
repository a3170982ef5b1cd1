"""人脸验证评估（evaluation）

本模块的职责：
- embed_all：批量提取单位范数嵌入（不做增强，确定性）
- 余弦打分、验证对构造（真匹配 / 冒认）
- k 折 1:1 验证准确率（LFW 协议，sklearn KFold 不打乱）
- TAR@FAR
- 少样本协议：按标签比例抽身份，每个身份保留前 shots 张（不同 shots 之间嵌套）

本模块不会做的事情：
- 不做 IJB 模板集合匹配、MegaFace 干扰集检索
- 不读写文件（报告导出交给 report_exporter.py）

阈值规则：
- 分数 >= t 判为同一人
- 候选阈值为全部不同分数值另加 +inf
- 多个阈值并列最优时取较小的那个
"""
from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from sklearn.model_selection import KFold

from lafs_local.part_fvit import FaceModel
from lafs_local.rng import make_rng
from lafs_local.tensor import ParameterError, Tensor, no_grad

logger = logging.getLogger(__name__)

DEFAULT_FARS = (1e-4, 1e-3, 1e-2, 1e-1)


# ============================================================
# 数据结构
# ============================================================

@dataclass
class Pair:
    a: int
    b: int
    is_genuine: bool


@dataclass
class ScoreSet:
    """按验证对顺序排列的分数与真值"""

    scores: np.ndarray
    issame: np.ndarray

    @property
    def genuine(self) -> np.ndarray:
        return self.scores[self.issame]

    @property
    def impostor(self) -> np.ndarray:
        return self.scores[~self.issame]


@dataclass
class VerificationReport:
    """验证报告：k 折准确率 + TAR@FAR 表 + 协议描述"""

    accuracy_mean: float
    accuracy_std: float
    fold_accuracies: List[float]
    tar_at_far: Dict[float, float]
    n_genuine: int
    n_impostor: int
    protocol: Dict[str, object] = field(default_factory=dict)

    def to_dict(self) -> Dict[str, object]:
        out = asdict(self)
        out["tar_at_far"] = {f"{k:g}": v for k, v in self.tar_at_far.items()}
        return out


# ============================================================
# 嵌入与打分
# ============================================================

def normalize_rows(x: np.ndarray, eps: float = 1e-12) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    norms = np.linalg.norm(x, axis=1, keepdims=True)
    if np.any(norms < eps):
        logger.warning(f"[eval] {int(np.sum(norms < eps))} 个嵌入范数为 0")
    return x / np.maximum(norms, eps)


def embed_all(images: np.ndarray, model: FaceModel, batch_size: int = 64) -> np.ndarray:
    """images [N,C,S,S] → 单位范数嵌入 [N,d]（float64）"""
    images = np.asarray(images, dtype=np.float32)
    chunks = []
    with no_grad():
        for start in range(0, len(images), batch_size):
            emb = model.embed(Tensor(images[start:start + batch_size]))
            chunks.append(emb.data.astype(np.float64))
    if not chunks:
        return np.zeros((0, model.vit.cfg.dim))
    return normalize_rows(np.concatenate(chunks))


def cosine_scores(embeddings: np.ndarray, pairs: Sequence[Pair]) -> ScoreSet:
    a = np.array([p.a for p in pairs], dtype=np.int64)
    b = np.array([p.b for p in pairs], dtype=np.int64)
    scores = np.sum(embeddings[a] * embeddings[b], axis=1)
    return ScoreSet(scores=scores, issame=np.array([p.is_genuine for p in pairs], dtype=bool))


def make_pairs(labels: Sequence[int], n_genuine: int, n_impostor: int, seed: int) -> List[Pair]:
    """从带标签样本构造验证对：真匹配同标签、冒认不同标签，且不与自身比较

    真匹配与冒认交替排列，保证每一折都包含两类。
    """
    labels = np.asarray(labels)
    rng = make_rng(seed, 0x9A1)
    by_label: Dict[int, np.ndarray] = {}
    for lab in np.unique(labels):
        by_label[int(lab)] = np.flatnonzero(labels == lab)
    multi = [lab for lab, idx in by_label.items() if len(idx) >= 2]
    if n_genuine > 0 and not multi:
        raise ParameterError("没有任何身份拥有 >= 2 张图像，无法构造真匹配对")
    if n_impostor > 0 and len(by_label) < 2:
        raise ParameterError("少于 2 个身份，无法构造冒认对")

    genuine: List[Pair] = []
    for _ in range(n_genuine):
        lab = multi[int(rng.integers(len(multi)))]
        i, j = rng.choice(by_label[lab], size=2, replace=False)
        genuine.append(Pair(int(i), int(j), True))

    impostor: List[Pair] = []
    keys = list(by_label)
    for _ in range(n_impostor):
        la, lb = rng.choice(len(keys), size=2, replace=False)
        i = rng.choice(by_label[keys[la]])
        j = rng.choice(by_label[keys[lb]])
        impostor.append(Pair(int(i), int(j), False))

    pairs: List[Pair] = []
    for k in range(max(n_genuine, n_impostor)):
        if k < n_genuine:
            pairs.append(genuine[k])
        if k < n_impostor:
            pairs.append(impostor[k])
    return pairs


# ============================================================
# 指标
# ============================================================

def accuracy_at(threshold: float, scores: np.ndarray, issame: np.ndarray) -> float:
    predict = scores >= threshold
    return float(np.mean(predict == issame)) if len(scores) else 0.0


def best_threshold(scores: np.ndarray, issame: np.ndarray) -> Tuple[float, float]:
    """在全部不同分数值（另加 +inf，即全部判为不同人）中找准确率最高的阈值，并列时取较小者；返回 (阈值, 准确率)"""
    candidates = np.append(np.unique(scores), np.inf)
    accs = np.array([accuracy_at(t, scores, issame) for t in candidates])
    best = int(np.argmax(accs))
    return float(candidates[best]), float(accs[best])


def kfold_accuracy(scores: ScoreSet, k: int = 10) -> Tuple[float, float, List[float]]:
    """k 折 1:1 验证准确率：在其余 k−1 折上选阈值，在留出折上评估

    返回：
    - (均值, 标准差, 每折准确率)
    """
    n = len(scores.scores)
    if k < 2:
        raise ParameterError(f"折数 k 必须 >= 2，当前 {k}")
    if n < k:
        raise ParameterError(f"验证对数 {n} 少于折数 {k}")
    folds = KFold(n_splits=k, shuffle=False)
    accs: List[float] = []
    for train_idx, test_idx in folds.split(np.arange(n)):
        t, _ = best_threshold(scores.scores[train_idx], scores.issame[train_idx])
        accs.append(accuracy_at(t, scores.scores[test_idx], scores.issame[test_idx]))
    return float(np.mean(accs)), float(np.std(accs)), accs


def tar_at_far(scores: ScoreSet, far: float) -> float:
    """阈值取使 fraction(impostor >= t) <= far 的最小候选 t，返回 fraction(genuine >= t)"""
    if not 0.0 < far <= 1.0:
        raise ParameterError(f"far 必须在 (0,1]，当前 {far}")
    impostor = np.sort(scores.impostor)
    genuine = np.sort(scores.genuine)
    if impostor.size == 0:
        raise ParameterError("冒认分数为空，无法计算 TAR@FAR")
    if far < 1.0 / impostor.size:
        logger.warning(
            f"[eval] FAR={far:g} 小于 1/冒认对数 (1/{impostor.size})，阈值将高于全部冒认分数"
        )
    candidates = np.append(np.unique(scores.scores), np.inf)
    imp_frac = (impostor.size - np.searchsorted(impostor, candidates, side="left")) / impostor.size
    ok = np.flatnonzero(imp_frac <= far)
    threshold = candidates[ok[0]]
    if genuine.size == 0:
        return 0.0
    return float((genuine.size - np.searchsorted(genuine, threshold, side="left")) / genuine.size)


def evaluate_scores(
    scores: ScoreSet,
    folds: int = 10,
    fars: Sequence[float] = DEFAULT_FARS,
    protocol: Optional[Dict[str, object]] = None,
) -> VerificationReport:
    mean, std, accs = kfold_accuracy(scores, folds)
    table = {float(f): tar_at_far(scores, f) for f in fars}
    return VerificationReport(
        accuracy_mean=mean,
        accuracy_std=std,
        fold_accuracies=accs,
        tar_at_far=table,
        n_genuine=int(scores.issame.sum()),
        n_impostor=int((~scores.issame).sum()),
        protocol=dict(protocol or {}),
    )


def evaluate_model(
    images: np.ndarray,
    pairs: Sequence[Pair],
    model: FaceModel,
    folds: int = 10,
    fars: Sequence[float] = DEFAULT_FARS,
    protocol: Optional[Dict[str, object]] = None,
) -> VerificationReport:
    """嵌入 → 余弦打分 → 验证报告"""
    emb = embed_all(images, model)
    report = evaluate_scores(cosine_scores(emb, pairs), folds, fars, protocol)
    logger.info(
        f"[eval] acc={report.accuracy_mean:.4f}±{report.accuracy_std:.4f} "
        f"pairs={report.n_genuine}+{report.n_impostor}"
    )
    return report


# ============================================================
# 少样本协议
# ============================================================

Shots = Union[int, str, None]


def few_shot_indices(labels: Sequence[int], fraction: float, shots: Shots, seed: int) -> np.ndarray:
    """按标签比例 fraction 抽取身份，每个身份保留前 min(shots, 可用) 张，返回升序下标

    - shots 为 None / "all" 时保留全部
    - 同一 seed 下，shots 较小的集合是较大集合的子集
    """
    labels = np.asarray(labels)
    if not 0.0 < fraction <= 1.0:
        raise ParameterError(f"fraction 必须在 (0,1]，当前 {fraction}")
    if shots not in (None, "all") and int(shots) < 1:
        raise ParameterError(f"shots 必须 >= 1 或 all，当前 {shots}")
    unique = np.unique(labels)
    n_sel = int(math.ceil(fraction * len(unique) - 1e-9))
    chosen = np.sort(make_rng(seed, 0xF5).permutation(unique)[:n_sel])

    keep: List[int] = []
    for lab in chosen:
        idx = np.flatnonzero(labels == lab)
        idx = idx[make_rng(seed, int(lab), 0xF6).permutation(len(idx))]
        if shots not in (None, "all"):
            idx = idx[: int(shots)]
        keep.extend(int(i) for i in idx)
    if not keep:
        raise ParameterError(f"少样本协议结果为空 (fraction={fraction}, shots={shots})")
    return np.array(sorted(keep), dtype=np.int64)


def build_few_shot(dataset, fraction: float, shots: Shots, seed: int):
    """返回 dataset.subset(few_shot_indices(...))"""
    idx = few_shot_indices(dataset.labels, fraction, shots, seed)
    logger.info(f"[few-shot] fraction={fraction} shots={shots} → {len(idx)} 张图像")
    return dataset.subset(idx)
