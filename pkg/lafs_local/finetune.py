"""监督微调（finetune）

本模块的职责：
- CosFace 间隔分类头 L_id：logit_j = s·cosθ_j（j≠y），logit_y = s·(cosθ_y − m)
- 关键点软标签正则 landmark_reg：与固定参考 CNN δ̂ 预测之间的平均欧氏距离
- 四种微调方式：
  - fixed_landmark      (a) 冻结关键点 CNN，只训练 fViT
  - trainable_landmark  (b) 整个骨干一起训练
  - soft_label          (c) 整个骨干训练 + β·landmark_reg(δ̂(x), δ(x))
  - landmark_to_grid    (4) 丢掉关键点 CNN，按 grid fViT 微调
- 逐层学习率衰减 layerwise_lr，线性预热 + 余弦退火
- 少样本时按数据比例放大 epoch 数

本模块不会做的事情：
- 不实现 ArcFace / AdaFace 等其它间隔损失
- 不读写文件
"""
from __future__ import annotations

import copy
import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np

from lafs_local.geometry import Image, LandmarkSet
from lafs_local.localizer import LocalizerParams, freeze, predict_landmarks_batch
from lafs_local.nn import ParamSet, xavier_uniform
from lafs_local.part_fvit import FaceModel, ViTParams, fvit_embed, part_fvit_embed
from lafs_local.pretrain import HeadConfig, PretrainConfig, StepResult, TeacherStudent, run_pretrain
from lafs_local.rng import make_rng
from lafs_local.tensor import (
    AdamW,
    ConfigError,
    DimensionError,
    NumericalError,
    ParameterError,
    Tape,
    Tensor,
    as_tensor,
    backward,
    cosine_schedule,
    cross_entropy,
    l2_normalize,
    matmul,
    no_grad,
    row_norm,
)

logger = logging.getLogger(__name__)

FINETUNE_MODES = ("fixed_landmark", "trainable_landmark", "soft_label", "landmark_to_grid")
MODE_ALIASES = {
    "a": "fixed_landmark",
    "b": "trainable_landmark",
    "c": "soft_label",
    "grid": "landmark_to_grid",
    "4": "landmark_to_grid",
}
OBJECTIVES = ("cosface", "dino")


def resolve_mode(mode: str) -> str:
    """把 CLI 简写（a/b/c/grid）换成完整模式名"""
    full = MODE_ALIASES.get(mode, mode)
    if full not in FINETUNE_MODES:
        raise ConfigError(f"未知微调模式: {mode}（可选 a/b/c/grid 或 {FINETUNE_MODES}）")
    return full


# ============================================================
# CosFace
# ============================================================

class CosFaceHead(ParamSet):
    """CosFace 分类头：类别权重 W [num_classes, d]，尺度 s，间隔 m"""

    def __init__(
        self,
        num_classes: int,
        dim: int,
        s: float = 16.0,
        m: float = 0.2,
        seed: int = 0,
        prefix: str = "cosface.",
    ) -> None:
        super().__init__(prefix)
        if s <= 0 or not 0.0 <= m < 1.0:
            raise ParameterError(f"CosFace 需要 s > 0 且 0 <= m < 1，当前 s={s}, m={m}")
        if num_classes < 2:
            raise ParameterError(f"CosFace 至少需要 2 个类别，当前 {num_classes}")
        self.s = s
        self.m = m
        self.num_classes = num_classes
        self.add("weight", xavier_uniform(make_rng(seed, 0xC05), num_classes, dim))


def cosface_logits(emb: Tensor, labels: Sequence[int], head: CosFaceHead) -> Tensor:
    """emb [B,d] → 带间隔的 logits [B,num_classes]"""
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    if labels.size and (labels.min() < 0 or labels.max() >= head.num_classes):
        raise ParameterError(f"标签越界: 期望 [0, {head.num_classes})，实际 [{labels.min()}, {labels.max()}]")
    if emb.shape[0] != labels.size:
        raise DimensionError(f"嵌入数 {emb.shape[0]} 与标签数 {labels.size} 不一致")
    norms = np.linalg.norm(emb.data.astype(np.float64), axis=-1)
    if np.any(norms < 1e-12):
        logger.warning(f"[cosface] {int(np.sum(norms < 1e-12))} 个嵌入范数为 0，按 eps 截断归一化")
    cos = matmul(l2_normalize(emb), l2_normalize(head["weight"]).transpose(1, 0))
    margin = np.zeros((labels.size, head.num_classes))
    margin[np.arange(labels.size), labels] = head.m
    return (cos - as_tensor(margin)) * head.s


def cosface_loss(emb: Tensor, labels: Sequence[int], head: CosFaceHead) -> Tensor:
    """L_id：CosFace logits 上的交叉熵（批均值）；emb 可为 [d]（单样本）或 [B,d]"""
    if emb.ndim == 1:
        emb = emb.reshape(1, emb.shape[0])
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    return cross_entropy(cosface_logits(emb, labels, head), labels)


# ============================================================
# 关键点正则
# ============================================================

def landmark_reg(r_hat, r) -> Tensor:
    """||r̂, r||₂：逐关键点欧氏距离的均值；r̂ 视为常量（不接收梯度）

    参数：
    - r_hat: 参考关键点（LandmarkSet 或 Tensor[..., R, 2]）
    - r:     可训练关键点（同形状）
    """
    r_hat_t = r_hat.coords if isinstance(r_hat, LandmarkSet) else as_tensor(r_hat)
    r_t = r.coords if isinstance(r, LandmarkSet) else as_tensor(r)
    if r_hat_t.shape != r_t.shape:
        raise DimensionError(f"关键点数量不一致: r̂ {r_hat_t.shape} vs r {r_t.shape}")
    return row_norm(r_t - r_hat_t.detach()).mean()


# ============================================================
# 学习率
# ============================================================

def layerwise_lr(base_lr: float, decay: float, depth_index: int, total_depth: int) -> float:
    """lr = base_lr · decay^(total_depth − depth_index)：头部拿 base_lr，越靠前越小"""
    if not 0.0 < decay <= 1.0:
        raise ParameterError(f"layer_decay 必须在 (0,1]，当前 {decay}")
    if not 0 <= depth_index <= total_depth:
        raise ParameterError(f"depth_index 必须在 [0, {total_depth}]，当前 {depth_index}")
    return base_lr * decay ** (total_depth - depth_index)


def epochs_for_fraction(fraction: float, full_epochs: int) -> int:
    """少样本 epoch 放大：100% 数据用 full_epochs，1% 数据放大到 80/34 倍，按 log10 比例线性插值"""
    if not 0.0 < fraction <= 1.0:
        raise ParameterError(f"fraction 必须在 (0,1]，当前 {fraction}")
    t = min(-math.log10(fraction), 2.0) / 2.0
    return max(1, int(round(full_epochs * (1.0 + t * (80.0 / 34.0 - 1.0)))))


# ============================================================
# 配置与状态
# ============================================================

@dataclass
class FinetuneConfig:
    """微调配置（默认值对应 lr 1e-4、wd 0.1、5 个预热 epoch、逐层衰减 0.58）"""

    mode: str = "soft_label"
    objective: str = "cosface"
    beta: float = 0.1
    lr: float = 1e-4
    min_lr: float = 1e-6
    weight_decay: float = 0.1
    layer_decay: float = 0.58
    epochs: int = 34
    warmup_epochs: int = 5
    batch_size: int = 32
    scale: float = 16.0
    margin: float = 0.2
    seed: int = 0

    def __post_init__(self) -> None:
        self.mode = resolve_mode(self.mode)
        if self.objective not in OBJECTIVES:
            raise ConfigError(f"未知微调目标: {self.objective}（可选 {OBJECTIVES}）")
        if self.beta < 0:
            raise ConfigError(f"beta 必须 >= 0，当前 {self.beta}")
        if not 0.0 < self.layer_decay <= 1.0:
            raise ConfigError(f"layer_decay 必须在 (0,1]，当前 {self.layer_decay}")


@dataclass
class FinetuneStepResult:
    step: int
    loss: float
    loss_id: float
    loss_reg: float
    lr: float

    def metrics(self) -> Dict[str, float]:
        return {"loss": self.loss, "loss_id": self.loss_id, "loss_reg": self.loss_reg, "lr": self.lr}


@dataclass
class FinetuneState:
    """微调状态：骨干 + CosFace 头 + 参考 CNN δ̂ + 优化器"""

    model: FaceModel
    head: CosFaceHead
    cfg: FinetuneConfig
    reference: Optional[LocalizerParams] = None
    step: int = 0
    total_steps: int = 1
    warmup_steps: int = 0
    optimizer: AdamW = field(init=False)

    def __post_init__(self) -> None:
        self.optimizer = AdamW(
            self.trainable_parameters(),
            lr=self.cfg.lr,
            weight_decay=self.cfg.weight_decay,
            lr_scale=self.lr_scales(),
        )

    def trainable_parameters(self) -> Dict[str, Tensor]:
        params: Dict[str, Tensor] = {}
        for ps in self.model.param_sets() + [self.head]:
            if not ps.frozen:
                params.update(ps.named_parameters())
        return params

    def lr_scales(self) -> Dict[str, float]:
        """逐层倍率：关键点 CNN 与嵌入层深度 0，第 l 块深度 l+1，最终 norm 与分类头深度 L+1"""
        vit = self.model.vit
        total = vit.cfg.depth + 1
        decay = self.cfg.layer_decay
        scales: Dict[str, float] = {}
        for name in vit.names():
            scales[vit.prefix + name] = layerwise_lr(1.0, decay, vit.depth_of(name), total)
        if self.model.localizer is not None:
            for full in self.model.localizer.named_parameters():
                scales[full] = layerwise_lr(1.0, decay, 0, total)
        for full in self.head.named_parameters():
            scales[full] = 1.0
        return scales

    def lr_at(self, step: int) -> float:
        sched = cosine_schedule(self.cfg.lr, self.cfg.min_lr, self.total_steps, self.warmup_steps)
        return float(sched[min(step, len(sched) - 1)])


def prepare_finetune(
    vit: ViTParams,
    localizer: Optional[LocalizerParams],
    num_classes: int,
    cfg: FinetuneConfig,
    reference: Optional[LocalizerParams] = None,
    seed: int = 0,
) -> FinetuneState:
    """按微调方式组装状态

    - fixed_landmark:     关键点 CNN 冻结
    - trainable_landmark: 关键点 CNN 解冻
    - soft_label:         关键点 CNN 解冻，并需要固定的参考 CNN δ̂
    - landmark_to_grid:   丢弃关键点 CNN，按 grid fViT 训练
    """
    mode = cfg.mode
    if mode != "landmark_to_grid" and localizer is None:
        raise ConfigError(f"微调方式 {mode} 需要关键点 CNN")
    if mode == "soft_label" and reference is None:
        raise ConfigError("soft_label 微调需要参考关键点 CNN δ̂")

    vit.unfreeze()
    if mode == "landmark_to_grid":
        localizer = None
    elif mode == "fixed_landmark":
        freeze(localizer)
    else:
        localizer.unfreeze()
    if reference is not None:
        if reference is localizer:
            reference = copy.deepcopy(reference)
        freeze(reference)

    head = CosFaceHead(num_classes, vit.cfg.dim, s=cfg.scale, m=cfg.margin, seed=seed)
    logger.info(f"[finetune] mode={mode} beta={cfg.beta} classes={num_classes} layer_decay={cfg.layer_decay}")
    return FinetuneState(model=FaceModel(vit=vit, localizer=localizer), head=head, cfg=cfg, reference=reference)


# ============================================================
# 训练步 / 循环
# ============================================================

def finetune_step(images: np.ndarray, labels: Sequence[int], state: FinetuneState) -> FinetuneStepResult:
    """一步微调：L_total = L_id（+ β·landmark_reg，仅 soft_label 且 β > 0）"""
    cfg = state.cfg
    model = state.model
    x = Tensor(np.asarray(images, dtype=np.float32))
    labels = np.asarray(labels, dtype=np.int64)

    for ps in model.param_sets() + [state.head]:
        ps.zero_grad()

    with Tape() as tape:
        if model.is_grid:
            coords = None
            emb = fvit_embed(x, model.vit)
        else:
            coords = predict_landmarks_batch(x, model.localizer)
            emb = part_fvit_embed(x, coords, model.vit)
        loss_id = cosface_loss(emb, labels, state.head)
        loss = loss_id
        loss_reg = 0.0
        if cfg.mode == "soft_label" and cfg.beta > 0:
            with no_grad():
                r_hat = predict_landmarks_batch(x, state.reference)
            reg = landmark_reg(r_hat, coords)
            loss = loss_id + reg * cfg.beta
            loss_reg = reg.item()

    value = loss.item()
    if not math.isfinite(value):
        logger.error(f"[finetune] step={state.step} 损失为 {value}，中止")
        raise NumericalError(f"finetune step {state.step}: 损失非有限 ({value})")
    backward(loss, tape)

    lr = state.lr_at(state.step)
    state.optimizer.step(lr=lr)
    result = FinetuneStepResult(step=state.step, loss=value, loss_id=loss_id.item(), loss_reg=loss_reg, lr=lr)
    state.step += 1
    return result


def run_finetune(
    images: np.ndarray,
    labels: Sequence[int],
    state: FinetuneState,
    on_metrics: Optional[Callable[[int, str, str, float], None]] = None,
    phase: str = "finetune",
    log_every: int = 10,
) -> List[FinetuneStepResult]:
    """按 cfg.epochs 训练；学习率按步做预热 + 余弦"""
    cfg = state.cfg
    images = np.asarray(images, dtype=np.float32)
    labels = np.asarray(labels, dtype=np.int64)
    n = len(labels)
    if n == 0:
        raise ParameterError("微调数据为空")
    steps_per_epoch = max(1, math.ceil(n / cfg.batch_size))
    state.total_steps = steps_per_epoch * cfg.epochs
    state.warmup_steps = min(steps_per_epoch * cfg.warmup_epochs, state.total_steps // 2)
    logger.info(
        f"[{phase}] images={n} epochs={cfg.epochs} steps={state.total_steps} "
        f"warmup={state.warmup_steps} lr={cfg.lr}"
    )

    history: List[FinetuneStepResult] = []
    for epoch in range(cfg.epochs):
        order = make_rng(cfg.seed, epoch, 0xF7).permutation(n)
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            result = finetune_step(images[idx], labels[idx], state)
            history.append(result)
            if on_metrics is not None:
                for name, value in result.metrics().items():
                    on_metrics(result.step, phase, name, value)
            if log_every and result.step % log_every == 0:
                logger.info(f"[{phase}] epoch={epoch} step={result.step} loss={result.loss:.4f}")
    return history


def finetune_with_dino(
    images: np.ndarray,
    state: FinetuneState,
    pretrain_cfg: PretrainConfig,
    head_cfg: HeadConfig,
    on_metrics: Optional[Callable[[int, str, str, float], None]] = None,
) -> List[StepResult]:
    """以 DINO 自蒸馏作为微调目标（每张图视作独立样本，不用标签）

    学生从当前骨干初始化，训练后把学生 ViT 写回骨干。
    """
    model = state.model
    localizer = model.localizer
    if localizer is not None and not localizer.frozen:
        localizer = copy.deepcopy(localizer)
        freeze(localizer)
    ts = TeacherStudent.create(model.vit.cfg, head_cfg, localizer, pretrain_cfg, seed=state.cfg.seed)
    ts.student_vit.copy_from(model.vit)
    ts.teacher_vit.copy_from(model.vit)
    history = run_pretrain([Image.from_array(im) for im in images], ts, on_metrics)
    model.vit.copy_from(ts.student_vit)
    return history
