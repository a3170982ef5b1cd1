"""自蒸馏预训练引擎（pretrain）

本模块的职责：
- DINO 投影头（3 层 MLP → L2 瓶颈 → 权重归一化原型层）
- 中心化 Center 与教师温度锐化 teacher_probs
- LAFS 损失（完整关键点教师视图 vs 子集关键点学生视图，排除同一视图配对）
- EMA 教师更新
- 统一的蒸馏训练步 distill_step，teacher_view_mode ∈ {landmark, grid, mixed}
  - lafs_train_step：关键点教师 + 子集学生（LAFS）
  - dino_train_step：DINO 基线（grid / mixed 教师视图；landmark 模式等同 lafs_train_step）
- 预训练循环 run_pretrain：学习率 / EMA 动量 / 教师温度调度，逐步输出指标

本模块不会做的事情：
- 不读写文件（checkpoint / metrics.csv 交给上层脚本）
- 不训练关键点 CNN（预训练期间它是冻结的）

单步流程：
    σ_d 生成视图 → δ 在几何孪生图上预测关键点 → 学生分支子采样 → 两个分支都做 σ_l
    → 教师关键点 detach → 教师前向（不记录）→ 学生前向（记录）→ 损失
    → 学生 AdamW → EMA 教师 → 更新中心
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from lafs_local.augment import (
    PerturbConfig,
    ViewBatch,
    ViewConfig,
    apply_landmark_augs,
    generate_views,
    subsample_landmarks,
)
from lafs_local.geometry import Image, LandmarkSet, grid_landmarks
from lafs_local.localizer import LocalizerParams, predict_landmarks_batch
from lafs_local.nn import ParamSet, mlp, trunc_normal, xavier_uniform
from lafs_local.part_fvit import ViTConfig, ViTParams, part_fvit_embed
from lafs_local.rng import make_rng
from lafs_local.tensor import (
    AdamW,
    ConfigError,
    ContractError,
    DimensionError,
    NumericalError,
    ParameterError,
    Tape,
    Tensor,
    as_tensor,
    backward,
    cosine_schedule,
    l2_normalize,
    log_softmax_t,
    matmul,
    no_grad,
)

logger = logging.getLogger(__name__)

TEACHER_VIEW_MODES = ("landmark", "grid", "mixed")
METHODS = ("lafs", "dino")


# ============================================================
# 投影头
# ============================================================

@dataclass
class HeadConfig:
    """DINO 头配置（桌面规模 K=1024；原始规模为 100K）"""

    in_dim: int = 64
    hidden: int = 256
    bottleneck: int = 256
    out_dim: int = 1024
    n_layers: int = 3


class DinoHeadParams(ParamSet):
    """投影头参数：mlp{i}.w/b 与原型 last.v [K, bottleneck]（每行单位范数）"""

    def __init__(self, cfg: HeadConfig, seed: int = 0, prefix: str = "head.") -> None:
        super().__init__(prefix)
        self.cfg = cfg
        rng = make_rng(seed, 0xD1)
        dims = [cfg.in_dim] + [cfg.hidden] * (cfg.n_layers - 1) + [cfg.bottleneck]
        for i in range(cfg.n_layers):
            self.add(f"mlp{i}.w", xavier_uniform(rng, dims[i], dims[i + 1]))
            self.add(f"mlp{i}.b", np.zeros(dims[i + 1]))
        self.add("last.v", trunc_normal(rng, (cfg.out_dim, cfg.bottleneck), std=1.0))
        self.renormalize()

    def renormalize(self) -> None:
        """原型行归一化为单位范数（权重归一化，固定尺度 1）"""
        v = self["last.v"]
        norms = np.linalg.norm(v.data.astype(np.float64), axis=1, keepdims=True)
        v.data = (v.data / np.maximum(norms, 1e-12)).astype(np.float32)


def head_bottleneck(emb: Tensor, p: DinoHeadParams) -> Tensor:
    """MLP → L2 归一化，返回瓶颈向量"""
    return l2_normalize(mlp(emb, p, "mlp", p.cfg.n_layers))


def head_forward_batch(emb: Tensor, p: DinoHeadParams) -> Tensor:
    """emb [B,d] → logits [B,K]"""
    z = head_bottleneck(emb, p)
    prototypes = l2_normalize(p["last.v"])
    return matmul(z, prototypes.transpose(1, 0))


# ============================================================
# 中心化与损失
# ============================================================

@dataclass
class Center:
    """教师输出的 EMA 中心 c（float64，永远不上 Tape）"""

    c: np.ndarray
    momentum: float = 0.9

    @classmethod
    def zeros(cls, dim: int, momentum: float = 0.9) -> "Center":
        return cls(np.zeros(dim, dtype=np.float64), momentum)


def _softmax_np(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def teacher_probs(logits, center: Center, teacher_temp: float) -> np.ndarray:
    """softmax((logits − c) / T_t)，返回与 Tape 无关的 numpy 概率"""
    if not teacher_temp > 0:
        raise ParameterError(f"教师温度必须为正数，当前 {teacher_temp}")
    z = logits.data if isinstance(logits, Tensor) else np.asarray(logits)
    return _softmax_np((z.astype(np.float64) - center.c) / teacher_temp)


def center_update(center: Center, teacher_logits) -> Center:
    """c ← m·c + (1−m)·batch_mean(teacher_logits)"""
    z = teacher_logits.data if isinstance(teacher_logits, Tensor) else np.asarray(teacher_logits)
    z = z.reshape(-1, z.shape[-1]).astype(np.float64)
    if z.shape[0] == 0:
        raise ParameterError("center_update 需要非空批次")
    m = center.momentum
    return Center(m * center.c + (1.0 - m) * z.mean(axis=0), m)


def distillation_pairs(teacher_sources: Sequence[int], n_student: int) -> List[Tuple[int, int]]:
    """(教师下标, 学生视图下标) 配对，跳过学生视图与教师来源视图相同的情况"""
    return [(t, s) for t, src in enumerate(teacher_sources) for s in range(n_student) if s != src]


def distillation_loss(
    teacher_prob_list: Sequence[np.ndarray],
    student_logits: Sequence[Tensor],
    student_temp: float,
    teacher_sources: Optional[Sequence[int]] = None,
) -> Tuple[Tensor, int]:
    """Σ_(t,s) H(Q_t, softmax(student_s / T_s)) / 配对数，返回 (损失, 配对数)"""
    if teacher_sources is None:
        teacher_sources = list(range(len(teacher_prob_list)))
    if len(teacher_sources) != len(teacher_prob_list):
        raise ContractError("teacher_sources 与教师视图数量不一致")
    k = None
    for q in teacher_prob_list:
        k = q.shape[-1] if k is None else k
        if q.shape[-1] != k:
            raise DimensionError(f"教师概率维度不一致: {q.shape[-1]} vs {k}")
    for s in student_logits:
        if s.shape[-1] != k:
            raise DimensionError(f"学生 logits 维度 {s.shape[-1]} 与教师维度 {k} 不一致")

    pairs = distillation_pairs(teacher_sources, len(student_logits))
    if not pairs:
        raise ContractError("没有可用的教师-学生配对")
    log_probs = [log_softmax_t(s, student_temp) for s in student_logits]
    total: Optional[Tensor] = None
    for t, s in pairs:
        term = -(as_tensor(teacher_prob_list[t]) * log_probs[s]).sum(axis=-1).mean()
        total = term if total is None else total + term
    return total * (1.0 / len(pairs)), len(pairs)


def lafs_loss(
    teacher_prob_list: Sequence[np.ndarray],
    student_logits: Sequence[Tensor],
    student_temp: float,
) -> Tensor:
    """LAFS 损失：恰好 2 个全局关键点教师视图，学生视图 s ≠ t"""
    if len(teacher_prob_list) != 2:
        raise ContractError(f"lafs_loss 需要恰好 2 个教师视图，当前 {len(teacher_prob_list)}")
    if len(student_logits) < 1:
        raise ContractError("lafs_loss 至少需要 1 个学生视图")
    loss, _ = distillation_loss(teacher_prob_list, student_logits, student_temp)
    return loss


def ema_update(teacher: ParamSet, student: ParamSet, momentum: float) -> None:
    """ϑ_t ← l·ϑ_t + (1−l)·ϑ_s（float64 计算后写回 float32）"""
    if not 0.0 <= momentum <= 1.0:
        raise ParameterError(f"EMA 动量必须在 [0,1]，当前 {momentum}")
    for name in teacher:
        t, s = teacher[name], student[name]
        if t.shape != s.shape:
            raise DimensionError(f"EMA 参数 {name} 形状不一致: {t.shape} vs {s.shape}")
        mixed = momentum * t.data.astype(np.float64) + (1.0 - momentum) * s.data.astype(np.float64)
        t.data = mixed.astype(np.float32)


# ============================================================
# 配置与状态
# ============================================================

@dataclass
class PretrainConfig:
    """预训练配置

    - method:            "lafs"（学生子集关键点）或 "dino"（学生完整关键点 / 网格）
    - teacher_view_mode: "landmark" / "grid" / "mixed"
    - subset:            学生关键点数 k
    - alpha:             坐标扰动幅度（像素），0 关闭；None 时 part 骨干取 2，grid 骨干取 0
    - shuffle:           是否做 Landmark Shuffle；None 时 part 骨干打开，grid 骨干关闭
    - augment_teacher:   σ_l 是否也作用于教师关键点
    """

    method: str = "lafs"
    teacher_view_mode: str = "landmark"
    subset: int = 36
    alpha: Optional[float] = None
    shuffle: Optional[bool] = None
    augment_teacher: bool = True
    n_global: int = 2
    n_local: int = 8
    global_size: int = 112
    local_size: int = 48
    teacher_temp: float = 0.04
    warmup_teacher_temp: Optional[float] = None
    warmup_teacher_temp_steps: int = 0
    student_temp: float = 0.1
    center_momentum: float = 0.9
    ema_momentum: float = 0.996
    ema_cosine: bool = False
    lr: float = 5e-4
    min_lr: float = 1e-6
    warmup_fraction: float = 0.25
    weight_decay: float = 0.04
    steps: int = 200
    batch_size: int = 8
    seed: int = 0

    def __post_init__(self) -> None:
        if self.method not in METHODS:
            raise ConfigError(f"未知预训练方法: {self.method}（可选 {METHODS}）")
        if self.teacher_view_mode not in TEACHER_VIEW_MODES:
            raise ConfigError(f"未知教师视图模式: {self.teacher_view_mode}（可选 {TEACHER_VIEW_MODES}）")
        if self.n_global != 2 and self.method == "lafs":
            raise ConfigError("LAFS 需要恰好 2 个全局视图")
        if self.subset < 1:
            raise ConfigError(f"subset 必须 >= 1，当前 {self.subset}")
        # grid 基线是普通 fViT：网格块中心既不抖动也不打乱，除非显式指定
        on_grid = self.backbone == "grid"
        if self.alpha is None:
            self.alpha = 0.0 if on_grid else 2.0
        if self.shuffle is None:
            self.shuffle = not on_grid
        if self.alpha < 0:
            raise ConfigError(f"alpha 必须 >= 0，当前 {self.alpha}")

    @property
    def backbone(self) -> str:
        return "grid" if self.teacher_view_mode == "grid" else "part"

    def view_config(self) -> ViewConfig:
        factory = ViewConfig.for_lafs if self.method == "lafs" else ViewConfig.for_dino
        return factory(
            n_global=self.n_global,
            n_local=self.n_local,
            global_size=self.global_size,
            local_size=self.local_size,
        )

    def perturb_config(self) -> Optional[PerturbConfig]:
        return PerturbConfig(alpha=self.alpha) if self.alpha > 0 else None


@dataclass
class TeacherStudent:
    """教师 / 学生参数对 + 冻结的关键点 CNN + 中心 + 迭代计数；last_views 保存最近一步的视图与关键点"""

    student_vit: ViTParams
    student_head: DinoHeadParams
    teacher_vit: ViTParams
    teacher_head: DinoHeadParams
    localizer: Optional[LocalizerParams]
    center: Center
    cfg: PretrainConfig
    optimizer: AdamW = field(init=False)
    step: int = 0
    max_steps: int = 0
    last_views: List[ViewBatch] = field(default_factory=list, repr=False)

    def __post_init__(self) -> None:
        if self.localizer is not None and not self.localizer.frozen:
            raise ContractError("预训练期间关键点 CNN 必须冻结")
        if self.cfg.backbone == "part" and self.localizer is None:
            raise ConfigError(f"teacher_view_mode={self.cfg.teacher_view_mode} 需要关键点 CNN")
        self.teacher_vit.freeze()
        self.teacher_head.freeze()
        params = {**self.student_vit.named_parameters(), **self.student_head.named_parameters()}
        self.optimizer = AdamW(params, lr=self.cfg.lr, weight_decay=self.cfg.weight_decay)
        self.max_steps = self.max_steps or self.cfg.steps

    @classmethod
    def create(
        cls,
        vit_cfg: ViTConfig,
        head_cfg: HeadConfig,
        localizer: Optional[LocalizerParams],
        cfg: PretrainConfig,
        seed: int = 0,
    ) -> "TeacherStudent":
        """学生随机初始化，教师从学生复制"""
        student_vit = ViTParams(vit_cfg, seed)
        student_head = DinoHeadParams(head_cfg, seed)
        teacher_vit = ViTParams(vit_cfg, seed)
        teacher_head = DinoHeadParams(head_cfg, seed)
        teacher_vit.copy_from(student_vit)
        teacher_head.copy_from(student_head)
        return cls(
            student_vit=student_vit,
            student_head=student_head,
            teacher_vit=teacher_vit,
            teacher_head=teacher_head,
            localizer=localizer,
            center=Center.zeros(head_cfg.out_dim, cfg.center_momentum),
            cfg=cfg,
        )

    # ---------- 调度 ----------

    def lr_at(self, step: int) -> float:
        warmup = int(round(self.max_steps * self.cfg.warmup_fraction))
        sched = cosine_schedule(self.cfg.lr, self.cfg.min_lr, self.max_steps, warmup)
        return float(sched[min(step, len(sched) - 1)])

    def momentum_at(self, step: int) -> float:
        if not self.cfg.ema_cosine:
            return self.cfg.ema_momentum
        sched = cosine_schedule(self.cfg.ema_momentum, 1.0, self.max_steps)
        return float(sched[min(step, len(sched) - 1)])

    def teacher_temp_at(self, step: int) -> float:
        cfg = self.cfg
        if cfg.warmup_teacher_temp is None or cfg.warmup_teacher_temp_steps <= 0:
            return cfg.teacher_temp
        if step >= cfg.warmup_teacher_temp_steps:
            return cfg.teacher_temp
        frac = step / cfg.warmup_teacher_temp_steps
        return cfg.warmup_teacher_temp + frac * (cfg.teacher_temp - cfg.warmup_teacher_temp)


@dataclass
class StepResult:
    """单步训练的记录（写入 metrics.csv）"""

    step: int
    loss: float
    lr: float
    momentum: float
    teacher_temp: float
    n_pairs: int
    n_teacher_views: int
    n_student_views: int

    def metrics(self) -> Dict[str, float]:
        return {
            "loss": self.loss,
            "lr": self.lr,
            "ema_momentum": self.momentum,
            "teacher_temp": self.teacher_temp,
        }


# ============================================================
# 训练步
# ============================================================

def _predict_on_twins(ts: TeacherStudent, geo: np.ndarray) -> np.ndarray:
    """δ 在几何孪生图上预测关键点（不记录，结果即 detach）"""
    with no_grad():
        return predict_landmarks_batch(Tensor(geo), ts.localizer).data


def _landmark_augs(
    coords: np.ndarray,
    canvas: int,
    key: Tuple[int, ...],
    cfg: PretrainConfig,
    subset: Optional[int],
) -> np.ndarray:
    lm = LandmarkSet(Tensor(coords), canvas=canvas)
    if subset is not None and subset < lm.count:
        lm = subsample_landmarks(lm, subset, key)
    lm = apply_landmark_augs(lm, key, cfg.perturb_config(), cfg.shuffle)
    return lm.coords.data


def _embed_logits(vit: ViTParams, head: DinoHeadParams, images: np.ndarray, coords: np.ndarray) -> Tensor:
    emb = part_fvit_embed(Tensor(images), Tensor(coords), vit)
    return head_forward_batch(emb, head)


def distill_step(
    images: Sequence[Image],
    ts: TeacherStudent,
    seed: Sequence[int],
    cfg: Optional[PretrainConfig] = None,
) -> StepResult:
    """统一的自蒸馏训练步

    参数：
    - images: 一个批次的源图像
    - ts:     TeacherStudent（原地更新）
    - seed:   随机键前缀，通常为 (run_seed, step)
    - cfg:    覆盖 ts.cfg（dino / lafs 两个入口用它切换方法）

    返回：
    - StepResult
    """
    cfg = cfg or ts.cfg
    view_cfg = cfg.view_config()
    seed = tuple(int(s) for s in seed)
    batch = len(images)
    if batch == 0:
        raise ParameterError("distill_step 需要非空批次")

    # ---------- σ_d ----------
    view_batches: List[ViewBatch] = [generate_views(img, view_cfg, seed + (i,)) for i, img in enumerate(images)]
    n_g, n_v = view_cfg.n_global, view_cfg.n_views

    def stack(v: int, attr: str) -> np.ndarray:
        return np.stack([getattr(vb.views[v], attr) for vb in view_batches]).astype(np.float32)

    full_imgs = [stack(v, "image") for v in range(n_v)]
    sizes = [view_cfg.global_size if v < n_g else view_cfg.local_size for v in range(n_v)]

    # ---------- 关键点来源 ----------
    def landmark_source(v: int) -> np.ndarray:
        return _predict_on_twins(ts, stack(v, "geometric"))

    def grid_source(v: int) -> np.ndarray:
        g = grid_landmarks(sizes[v], ts.student_vit.cfg.patch_size)
        return np.broadcast_to(g, (batch,) + g.shape).copy()

    predicted: Dict[int, np.ndarray] = {}
    if cfg.backbone == "part" or cfg.teacher_view_mode == "mixed":
        for v in range(n_v):
            predicted[v] = landmark_source(v)

    # ---------- 教师分支（完整关键点，detach） ----------
    teacher_entries: List[Tuple[int, str]] = []
    if cfg.teacher_view_mode in ("landmark", "grid"):
        path = "grid" if cfg.teacher_view_mode == "grid" else "landmark"
        teacher_entries = [(v, path) for v in range(n_g)]
    else:
        teacher_entries = [(v, "grid") for v in range(n_g)] + [(v, "landmark") for v in range(n_g)]

    temp = ts.teacher_temp_at(ts.step)
    teacher_logits: List[np.ndarray] = []
    teacher_coords: List[np.ndarray] = []
    with no_grad():
        for t_idx, (v, path) in enumerate(teacher_entries):
            base = grid_source(v) if path == "grid" else predicted[v]
            coords = np.stack([
                _landmark_augs(base[i], sizes[v], seed + (i, v, 0, t_idx), cfg, None)
                if cfg.augment_teacher else base[i]
                for i in range(batch)
            ])
            teacher_coords.append(coords)
            logits = _embed_logits(ts.teacher_vit, ts.teacher_head, full_imgs[v], coords)
            teacher_logits.append(logits.data.astype(np.float64))
    probs = [teacher_probs(z, ts.center, temp) for z in teacher_logits]
    sources = [v for v, _ in teacher_entries]

    # ---------- 学生分支（子集关键点，记录） ----------
    subset = cfg.subset if (cfg.method == "lafs" and cfg.backbone == "part") else None
    student_coords: List[np.ndarray] = []
    for v in range(n_v):
        base = grid_source(v) if cfg.backbone == "grid" else predicted[v]
        student_coords.append(np.stack([
            _landmark_augs(base[i], sizes[v], seed + (i, v, 1), cfg, subset) for i in range(batch)
        ]))

    for i, vb in enumerate(view_batches):
        vb.teacher_landmarks = [
            LandmarkSet(Tensor(c[i]), canvas=sizes[v]) for (v, _), c in zip(teacher_entries, teacher_coords)
        ]
        vb.student_landmarks = [LandmarkSet(Tensor(student_coords[v][i]), canvas=sizes[v]) for v in range(n_v)]
    ts.last_views = view_batches

    ts.student_vit.zero_grad()
    ts.student_head.zero_grad()
    with Tape() as tape:
        student_logits: List[Tensor] = []
        for group in (range(0, n_g), range(n_g, n_v)):
            group = list(group)
            if not group:
                continue
            imgs = np.concatenate([full_imgs[v] for v in group])
            coords = np.concatenate([student_coords[v] for v in group])
            logits = _embed_logits(ts.student_vit, ts.student_head, imgs, coords)
            for j in range(len(group)):
                student_logits.append(logits[j * batch:(j + 1) * batch])
        loss, n_pairs = distillation_loss(probs, student_logits, cfg.student_temp, sources)

    loss_value = loss.item()
    if not math.isfinite(loss_value):
        logger.error(f"[pretrain] step={ts.step} 损失为 {loss_value}，中止本步")
        raise NumericalError(f"step {ts.step}: 蒸馏损失非有限 ({loss_value})")

    backward(loss, tape)

    # ---------- 学生更新 → EMA → 中心 ----------
    lr = ts.lr_at(ts.step)
    ts.optimizer.step(lr=lr)
    ts.student_head.renormalize()

    momentum = ts.momentum_at(ts.step)
    ema_update(ts.teacher_vit, ts.student_vit, momentum)
    ema_update(ts.teacher_head, ts.student_head, momentum)

    ts.center = center_update(ts.center, np.concatenate(teacher_logits))

    result = StepResult(
        step=ts.step,
        loss=loss_value,
        lr=lr,
        momentum=momentum,
        teacher_temp=temp,
        n_pairs=n_pairs,
        n_teacher_views=len(teacher_entries),
        n_student_views=n_v,
    )
    ts.step += 1
    logger.debug(f"[pretrain] step={result.step} loss={loss_value:.4f} lr={lr:.2e} pairs={n_pairs}")
    return result


def lafs_train_step(images: Sequence[Image], ts: TeacherStudent, seed: Sequence[int]) -> StepResult:
    """LAFS 训练步：关键点教师视图 + 子集学生视图"""
    cfg = ts.cfg
    if cfg.method != "lafs" or cfg.teacher_view_mode != "landmark":
        cfg = replace(cfg, method="lafs", teacher_view_mode="landmark")
    return distill_step(images, ts, seed, cfg)


def dino_train_step(images: Sequence[Image], ts: TeacherStudent, seed: Sequence[int]) -> StepResult:
    """DINO 基线训练步（grid / mixed 教师视图）；landmark 模式与 lafs_train_step 完全一致"""
    cfg = ts.cfg
    if cfg.teacher_view_mode == "landmark":
        return lafs_train_step(images, ts, seed)
    if cfg.method != "dino":
        cfg = replace(cfg, method="dino")
    return distill_step(images, ts, seed, cfg)


def step_function(cfg: PretrainConfig) -> Callable[[Sequence[Image], TeacherStudent, Sequence[int]], StepResult]:
    """按配置选择训练步：dino → dino_train_step，lafs + landmark → lafs_train_step，其余走 distill_step"""
    if cfg.method == "dino":
        return dino_train_step
    if cfg.teacher_view_mode == "landmark":
        return lafs_train_step
    return distill_step


# ============================================================
# 训练循环
# ============================================================

MetricsCallback = Callable[[int, str, str, float], None]


def batch_order(n_items: int, batch_size: int, seed: int, epoch: int) -> List[np.ndarray]:
    """按 (seed, epoch) 打乱后切成批次"""
    order = make_rng(seed, epoch, 0xBA7C).permutation(n_items)
    return [order[i:i + batch_size] for i in range(0, n_items, batch_size)]


def run_pretrain(
    images: Sequence[Image],
    ts: TeacherStudent,
    on_metrics: Optional[MetricsCallback] = None,
    log_every: int = 10,
) -> List[StepResult]:
    """按 ts.cfg.steps 运行预训练，返回每步记录

    参数：
    - images:     训练图像（无标签；1-shot 模拟时每张图视为一个新身份）
    - ts:         TeacherStudent
    - on_metrics: 指标回调 (step, phase, name, value)
    """
    cfg = ts.cfg
    train_step = step_function(cfg)
    history: List[StepResult] = []
    epoch = 0
    batches = batch_order(len(images), cfg.batch_size, cfg.seed, epoch)
    logger.info(
        f"[pretrain] method={cfg.method} teacher_views={cfg.teacher_view_mode} "
        f"images={len(images)} steps={cfg.steps} batch={cfg.batch_size}"
    )
    while ts.step < cfg.steps:
        if not batches:
            epoch += 1
            batches = batch_order(len(images), cfg.batch_size, cfg.seed, epoch)
        idx = batches.pop(0)
        seed = (cfg.seed, ts.step)
        result = train_step([images[i] for i in idx], ts, seed)
        history.append(result)
        if on_metrics is not None:
            for name, value in result.metrics().items():
                on_metrics(result.step, "pretrain", name, value)
        if log_every and result.step % log_every == 0:
            logger.info(f"[pretrain] step={result.step} loss={result.loss:.4f} lr={result.lr:.2e}")
    return history
