"""训练流水线各阶段

本模块的职责：
- 把引擎（lafs_local/）串成四个阶段：bootstrap → pretrain → finetune → eval
- 每个阶段接收内存数据集与 LafsConfig，返回阶段产物；落盘由 save_* / load_* 完成
- lafs_cli.py 与 ablation_runner.py 共用这些阶段函数

本模块不会做的事情：
- 不解析命令行
- 不打印终端横幅（由 CLI 负责）
"""
from __future__ import annotations

import copy
import logging
from dataclasses import asdict, replace
from pathlib import Path
from typing import Callable, Dict, List, Optional, Tuple

from checkpoint_io import CheckpointError, collect_state, has_prefix, load_checkpoint, restore, save_checkpoint
from dataset_adapter import FaceDataset, load_dataset, load_pairs_or_build, read_manifest, split_identities
from lafs_config import LafsConfig, config_hash
from lafs_local.bootstrap import BootstrapResult, bootstrap_supervised
from lafs_local.evaluation import Pair, VerificationReport, build_few_shot, evaluate_model
from lafs_local.finetune import FinetuneState, finetune_with_dino, prepare_finetune, run_finetune
from lafs_local.geometry import Image
from lafs_local.localizer import LocalizerConfig, LocalizerParams, freeze
from lafs_local.part_fvit import FaceModel, ViTConfig, ViTParams
from lafs_local.pretrain import PretrainConfig, TeacherStudent, run_pretrain

logger = logging.getLogger(__name__)

MetricsCallback = Callable[[int, str, str, float], None]

PIPELINE_VERSION = "1"


# ============================================================
# 数据
# ============================================================

def load_splits(cfg: LafsConfig) -> Tuple[FaceDataset, FaceDataset]:
    """读取 manifest 并按身份划分训练 / 留出集合"""
    manifest = read_manifest(Path(cfg.data_dir) / "manifest.tsv")
    dataset = load_dataset(manifest, channels=cfg.channels)
    return split_identities(dataset, cfg.train_identities, cfg.seed)


# ============================================================
# Checkpoint
# ============================================================

def _meta(cfg: LafsConfig, stage: str, step: int, vit: Optional[ViTParams], localizer: Optional[LocalizerParams]) -> Dict:
    meta: Dict = {
        "stage": stage,
        "step": int(step),
        "config_hash": config_hash(cfg),
        "versions": {"pipeline": PIPELINE_VERSION, "checkpoint": 1},
    }
    if vit is not None:
        meta["vit"] = asdict(vit.cfg)
    if localizer is not None:
        meta["localizer"] = asdict(localizer.cfg)
    return meta


def save_model(path, cfg: LafsConfig, stage: str, step: int, vit: Optional[ViTParams] = None,
               localizer: Optional[LocalizerParams] = None, *extra) -> Path:
    params = collect_state(vit, localizer, *extra)
    return save_checkpoint(params, _meta(cfg, stage, step, vit, localizer), path)


def load_localizer(path) -> LocalizerParams:
    params, meta = load_checkpoint(path)
    if "localizer" not in meta:
        raise CheckpointError("corrupt", f"{path} 的元数据中没有关键点 CNN 配置")
    raw = dict(meta["localizer"])
    raw["channels"] = tuple(raw["channels"])
    localizer = restore(LocalizerParams(LocalizerConfig(**raw)), params)
    return freeze(localizer)


def load_vit(path) -> ViTParams:
    params, meta = load_checkpoint(path)
    if "vit" not in meta:
        raise CheckpointError("corrupt", f"{path} 的元数据中没有 ViT 配置")
    return restore(ViTParams(ViTConfig(**meta["vit"])), params)


def load_face_model(path) -> FaceModel:
    """从 checkpoint 还原 FaceModel；包含 localizer.* 条目时为 Part fViT，否则为 grid fViT"""
    params, meta = load_checkpoint(path)
    if "vit" not in meta:
        raise CheckpointError("corrupt", f"{path} 的元数据中没有 ViT 配置")
    vit = restore(ViTParams(ViTConfig(**meta["vit"])), params)
    localizer = None
    if has_prefix(params, "localizer.") and "localizer" in meta:
        raw = dict(meta["localizer"])
        raw["channels"] = tuple(raw["channels"])
        localizer = freeze(restore(LocalizerParams(LocalizerConfig(**raw)), params))
    return FaceModel(vit=vit, localizer=localizer)


# ============================================================
# 阶段
# ============================================================

def stage_bootstrap(cfg: LafsConfig, train: FaceDataset, on_metrics: Optional[MetricsCallback] = None) -> BootstrapResult:
    """监督自举关键点 CNN，返回的 localizer 已冻结"""
    result = bootstrap_supervised(
        train.images, train.labels, cfg.localizer_config(), cfg.vit_config(), cfg.bootstrap_config(), on_metrics
    )
    freeze(result.localizer)
    return result


def stage_pretrain(
    cfg: LafsConfig,
    train: FaceDataset,
    localizer: Optional[LocalizerParams],
    on_metrics: Optional[MetricsCallback] = None,
) -> TeacherStudent:
    """无标签自蒸馏预训练（每张图像视作独立身份，即 1-shot 模拟）"""
    pcfg = cfg.pretrain_config()
    if pcfg.backbone == "grid":
        localizer = None
    elif localizer is not None and not localizer.frozen:
        localizer = freeze(copy.deepcopy(localizer))
    ts = TeacherStudent.create(cfg.vit_config(), cfg.head_config(), localizer, pcfg, seed=cfg.seed)
    run_pretrain([Image.from_array(im) for im in train.images], ts, on_metrics)
    return ts


def dino_finetune_config(cfg: LafsConfig, is_grid: bool) -> PretrainConfig:
    """--objective dino 使用的预训练配置；未显式设置的 alpha / shuffle 按骨干重新取默认值"""
    view_mode = "grid" if is_grid else cfg.teacher_views
    return replace(
        cfg.pretrain_config(),
        method="dino",
        teacher_view_mode=view_mode,
        alpha=cfg.alpha,
        shuffle=cfg.shuffle,
    )


def stage_finetune(
    cfg: LafsConfig,
    train: FaceDataset,
    vit: Optional[ViTParams],
    localizer: Optional[LocalizerParams],
    on_metrics: Optional[MetricsCallback] = None,
    reference: Optional[LocalizerParams] = None,
) -> FinetuneState:
    """少样本子集上微调；vit 为 None 时从随机初始化开始（scratch 基线）

    reference 为方式 (c) 的参考关键点 CNN δ̂，缺省时取 localizer 本身。
    """
    fcfg = cfg.finetune_config()
    subset = build_few_shot(train, cfg.fraction, cfg.shots_value(), cfg.seed).relabeled()
    vit = copy.deepcopy(vit) if vit is not None else ViTParams(cfg.vit_config(), seed=cfg.seed)
    localizer = copy.deepcopy(localizer) if localizer is not None else None
    if fcfg.mode != "soft_label":
        reference = None
    elif reference is None:
        reference = localizer
    state = prepare_finetune(vit, localizer, subset.num_classes, fcfg, reference=reference, seed=cfg.seed)
    if fcfg.objective == "dino":
        pcfg = dino_finetune_config(cfg, state.model.is_grid)
        finetune_with_dino(subset.images, state, pcfg, cfg.head_config(), on_metrics)
    else:
        run_finetune(subset.images, subset.labels, state, on_metrics)
    return state


def stage_eval(
    cfg: LafsConfig,
    held: FaceDataset,
    model: FaceModel,
    pairs: Optional[List[Pair]] = None,
    on_metrics: Optional[MetricsCallback] = None,
    step: int = 0,
) -> VerificationReport:
    """在留出身份上做 1:1 验证评估，并把主要指标写进 metrics"""
    if pairs is None:
        pairs = load_pairs_or_build(cfg.pairs, held, cfg.seed, cfg.n_pairs)
    protocol = {
        "folds": cfg.folds,
        "backbone": "grid" if model.is_grid else "part",
        "held_out_identities": held.num_classes,
        "pairs": len(pairs),
    }
    report = evaluate_model(held.images, pairs, model, cfg.folds, cfg.far_values(), protocol)
    if on_metrics is not None:
        on_metrics(step, "eval", "accuracy", report.accuracy_mean)
        on_metrics(step, "eval", "accuracy_std", report.accuracy_std)
        for far, tar in sorted(report.tar_at_far.items()):
            on_metrics(step, "eval", f"tar@far={far:g}", tar)
    return report

