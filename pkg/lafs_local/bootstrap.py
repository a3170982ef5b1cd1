"""关键点 CNN 的监督自举（bootstrap）

关键点 CNN + Part fViT + CosFace 头端到端联合训练，
梯度经可微采样器回到关键点坐标，再回到关键点 CNN。
训练结束后关键点 CNN 冻结，供 LAFS 预训练使用。
"""
from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Callable, List, Optional, Sequence

import numpy as np

from lafs_local.finetune import FinetuneConfig, FinetuneStepResult, prepare_finetune, run_finetune
from lafs_local.localizer import (
    LocalizerConfig,
    LocalizerParams,
    mean_pairwise_distance,
    predict_landmarks_batch,
)
from lafs_local.part_fvit import ViTConfig, ViTParams
from lafs_local.tensor import ParameterError, Tensor, no_grad

logger = logging.getLogger(__name__)


@dataclass
class BootstrapConfig:
    """监督自举配置"""

    epochs: int = 20
    batch_size: int = 32
    lr: float = 1e-3
    warmup_epochs: int = 2
    weight_decay: float = 0.05
    scale: float = 16.0
    margin: float = 0.2
    freeze_localizer: bool = False
    seed: int = 0


@dataclass
class BootstrapResult:
    localizer: LocalizerParams
    vit: ViTParams
    history: List[FinetuneStepResult]
    landmark_spread: float

    @property
    def initial_loss(self) -> float:
        return self.history[0].loss

    @property
    def final_loss(self) -> float:
        return self.history[-1].loss


def epoch_losses(history: Sequence[FinetuneStepResult], steps_per_epoch: int) -> List[float]:
    """按 epoch 平均的训练损失"""
    losses = [h.loss for h in history]
    return [float(np.mean(losses[i:i + steps_per_epoch])) for i in range(0, len(losses), steps_per_epoch)]


def bootstrap_supervised(
    images: np.ndarray,
    labels: Sequence[int],
    loc_cfg: LocalizerConfig,
    vit_cfg: ViTConfig,
    cfg: BootstrapConfig,
    on_metrics: Optional[Callable[[int, str, str, float], None]] = None,
) -> BootstrapResult:
    """联合训练关键点 CNN + Part fViT + CosFace

    参数：
    - images: [N,C,S,S] 训练图像
    - labels: 身份标签（至少 2 类，从 0 连续编号）
    - freeze_localizer=True 时为对照实验：关键点 CNN 不接收梯度

    返回：
    - BootstrapResult（关键点 CNN 仍为未冻结状态，由调用方决定何时冻结）
    """
    labels = np.asarray(labels, dtype=np.int64)
    num_classes = int(labels.max()) + 1 if labels.size else 0
    if num_classes < 2:
        raise ParameterError(f"监督自举至少需要 2 个身份，当前 {num_classes}")

    localizer = LocalizerParams(loc_cfg, seed=cfg.seed)
    vit = ViTParams(vit_cfg, seed=cfg.seed)
    ft_cfg = FinetuneConfig(
        mode="fixed_landmark" if cfg.freeze_localizer else "trainable_landmark",
        beta=0.0,
        lr=cfg.lr,
        weight_decay=cfg.weight_decay,
        layer_decay=1.0,
        epochs=cfg.epochs,
        warmup_epochs=cfg.warmup_epochs,
        batch_size=cfg.batch_size,
        scale=cfg.scale,
        margin=cfg.margin,
        seed=cfg.seed,
    )
    state = prepare_finetune(vit, localizer, num_classes, ft_cfg, seed=cfg.seed)
    history = run_finetune(images, labels, state, on_metrics, phase="bootstrap")

    with no_grad():
        sample = predict_landmarks_batch(Tensor(np.asarray(images[: min(len(images), 16)], dtype=np.float32)), localizer)
    spread = float(np.mean([mean_pairwise_distance(c) for c in sample.data]))

    steps_per_epoch = max(1, -(-len(labels) // cfg.batch_size))
    per_epoch = epoch_losses(history, steps_per_epoch)
    logger.info(
        f"[bootstrap] epoch 损失 {per_epoch[0]:.4f} → {per_epoch[-1]:.4f}，关键点平均间距 {spread:.4f}"
    )
    if per_epoch[-1] >= per_epoch[0]:
        logger.warning("[bootstrap] 最终 epoch 损失没有低于第一个 epoch")
    if spread <= 0.01:
        logger.warning(f"[bootstrap] 关键点退化：平均间距 {spread:.4f} <= 0.01")

    localizer.unfreeze()
    return BootstrapResult(localizer=localizer, vit=vit, history=history, landmark_spread=spread)
