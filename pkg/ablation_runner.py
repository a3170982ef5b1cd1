#!/usr/bin/env python3
"""消融实验运行器

在合成基准上按多个种子运行若干实验变体，取中位数，检查方向性结论：
- scratch_vs_lafs：随机初始化 vs LAFS 预训练，二者都在 1-shot 数据上微调
- shuffle：Landmark Shuffle 开 / 关，分别作用于 Part fViT 与 grid fViT
- alpha：坐标扰动 α ∈ {0, 2, 5}
- teacher_views：教师视图 landmark / grid / mixed
- beta：软标签微调 β ∈ {0, 0.1, 1.0}

用法:
    python ablation_runner.py --experiment scratch_vs_lafs --seeds 0 1 2
    python ablation_runner.py --experiment shuffle --pretrain-steps 500 --out runs/ablate
"""
from __future__ import annotations

import argparse
import copy
import logging
import sys
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import pandas as pd

from dataset_adapter import FaceDataset, build_pairs, split_identities
from lafs_config import LafsConfig
from lafs_local.evaluation import Pair
from lafs_local.localizer import LocalizerParams
from lafs_pipeline import stage_bootstrap, stage_eval, stage_finetune, stage_pretrain
from synthetic_faces import SyntheticFaceSpec, synthetic_arrays

logger = logging.getLogger(__name__)


@dataclass
class Variant:
    name: str
    overrides: Dict[str, object] = field(default_factory=dict)
    pretrain: bool = True


EXPERIMENTS: Dict[str, List[Variant]] = {
    "scratch_vs_lafs": [
        Variant("scratch", pretrain=False),
        Variant("lafs"),
    ],
    "shuffle": [
        Variant("part_shuffle", {"teacher_views": "landmark", "shuffle": True}),
        Variant("part_no_shuffle", {"teacher_views": "landmark", "shuffle": False}),
        Variant("grid_shuffle", {"teacher_views": "grid", "mode": "grid", "shuffle": True}),
        Variant("grid_no_shuffle", {"teacher_views": "grid", "mode": "grid", "shuffle": False}),
    ],
    "alpha": [
        Variant("alpha_0", {"alpha": 0.0}),
        Variant("alpha_2", {"alpha": 2.0}),
        Variant("alpha_5", {"alpha": 5.0}),
    ],
    "teacher_views": [
        Variant("landmark", {"teacher_views": "landmark"}),
        Variant("grid", {"teacher_views": "grid"}),
        Variant("mixed", {"teacher_views": "mixed"}),
    ],
    "beta": [
        Variant("beta_0", {"mode": "c", "beta": 0.0}),
        Variant("beta_0.1", {"mode": "c", "beta": 0.1}),
        Variant("beta_1", {"mode": "c", "beta": 1.0}),
    ],
}


@dataclass
class AblationConfig:
    """消融配置（默认：训练 200 个身份，留出身份上 100 + 100 个验证对，1-shot 微调）"""

    experiment: str = "scratch_vs_lafs"
    seeds: Tuple[int, ...] = (0, 1, 2)
    train_identities: int = 200
    held_identities: int = 100
    images_per_identity: int = 5
    pairs_each: int = 100
    pretrain_steps: int = 2000
    shots: str = "1"
    folds: int = 10
    data_seed: int = 0
    base: LafsConfig = field(default_factory=LafsConfig)

    def __post_init__(self) -> None:
        if self.experiment not in EXPERIMENTS:
            raise ValueError(f"未知实验: {self.experiment}（可选 {sorted(EXPERIMENTS)}）")
        if not self.seeds:
            raise ValueError("至少需要 1 个种子")


def build_benchmark(cfg: AblationConfig) -> Tuple[FaceDataset, FaceDataset, List[Pair]]:
    spec = SyntheticFaceSpec(
        canvas=cfg.base.canvas,
        n_identities=cfg.train_identities + cfg.held_identities,
        images_per_identity=cfg.images_per_identity,
        channels=cfg.base.channels,
        seed=cfg.data_seed,
    )
    images, labels = synthetic_arrays(spec)
    train, held = split_identities(FaceDataset(images, labels), cfg.train_identities, cfg.data_seed)
    pairs = build_pairs(held, cfg.pairs_each, cfg.pairs_each, cfg.data_seed)
    return train, held, pairs


def run_variant(
    cfg: AblationConfig,
    variant: Variant,
    seed: int,
    train: FaceDataset,
    held: FaceDataset,
    pairs: List[Pair],
    localizer: Optional[LocalizerParams],
) -> Dict[str, object]:
    run_cfg = replace(
        cfg.base,
        seed=seed,
        pretrain_steps=cfg.pretrain_steps,
        shots=cfg.shots,
        folds=cfg.folds,
        **variant.overrides,
    ).validate()
    vit = None
    if variant.pretrain:
        vit = stage_pretrain(run_cfg, train, localizer).teacher_vit
    state = stage_finetune(run_cfg, train, vit, localizer)
    report = stage_eval(run_cfg, held, state.model, pairs)
    row: Dict[str, object] = {
        "experiment": cfg.experiment,
        "variant": variant.name,
        "seed": seed,
        "accuracy": report.accuracy_mean,
    }
    for far, tar in sorted(report.tar_at_far.items()):
        row[f"tar@far={far:g}"] = tar
    logger.info(f"[ablate] {variant.name} seed={seed} acc={report.accuracy_mean:.4f}")
    return row


def run_ablation(cfg: AblationConfig) -> pd.DataFrame:
    """返回每个 (变体, 种子) 一行的结果表"""
    train, held, pairs = build_benchmark(cfg)
    rows: List[Dict[str, object]] = []
    needs_localizer = any(
        v.overrides.get("teacher_views", cfg.base.teacher_views) != "grid" for v in EXPERIMENTS[cfg.experiment]
    )
    for seed in cfg.seeds:
        localizer = None
        if needs_localizer:
            localizer = stage_bootstrap(replace(cfg.base, seed=seed), train).localizer
        for variant in EXPERIMENTS[cfg.experiment]:
            rows.append(run_variant(cfg, variant, seed, train, held, pairs, copy.deepcopy(localizer)))
    return pd.DataFrame(rows)


def summarize(results: pd.DataFrame) -> pd.DataFrame:
    """按变体取各种子的中位数"""
    numeric = [c for c in results.columns if c not in ("experiment", "variant", "seed")]
    return results.groupby(["experiment", "variant"], sort=False)[numeric].median().reset_index()


def directional_checks(summary: pd.DataFrame) -> Dict[str, bool]:
    """方向性结论（只比较顺序，不比较幅度）"""
    acc = dict(zip(summary["variant"], summary["accuracy"]))
    checks: Dict[str, bool] = {}
    if {"scratch", "lafs"} <= acc.keys():
        checks["lafs_beats_scratch_by_5_points"] = acc["lafs"] - acc["scratch"] >= 0.05
    if {"part_shuffle", "part_no_shuffle"} <= acc.keys():
        checks["shuffle_does_not_hurt_part_fvit"] = acc["part_shuffle"] >= acc["part_no_shuffle"]
    if {"grid_shuffle", "grid_no_shuffle"} <= acc.keys():
        checks["shuffle_hurts_grid_fvit"] = acc["grid_shuffle"] < acc["grid_no_shuffle"]
    if {"alpha_0", "alpha_2"} <= acc.keys():
        checks["alpha_2_not_worse_than_alpha_0"] = acc["alpha_2"] >= acc["alpha_0"]
    return checks


def parse_args(argv: Optional[Sequence[str]] = None):
    parser = argparse.ArgumentParser(description="LAFS 消融实验（合成基准，多种子中位数）")
    parser.add_argument("--experiment", choices=sorted(EXPERIMENTS), default="scratch_vs_lafs")
    parser.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2], help="种子列表 (默认: 0 1 2)")
    parser.add_argument("--pretrain-steps", type=int, default=2000, help="预训练步数 (默认: 2000)")
    parser.add_argument("--shots", type=str, default="1", help="微调每身份样本数 (默认: 1)")
    parser.add_argument("--out", type=str, default="runs/ablate", help="结果目录 (默认: runs/ablate)")
    return parser.parse_args(argv)


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = parse_args(argv)
    cfg = AblationConfig(
        experiment=args.experiment,
        seeds=tuple(args.seeds),
        pretrain_steps=args.pretrain_steps,
        shots=args.shots,
    )
    print(f"\n🧪 消融实验 {cfg.experiment}，种子 {list(cfg.seeds)}")
    results = run_ablation(cfg)
    summary = summarize(results)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    results.to_csv(out / f"{cfg.experiment}_runs.csv", index=False, lineterminator="\n")
    summary.to_csv(out / f"{cfg.experiment}_summary.csv", index=False, lineterminator="\n")
    print(summary.to_string(index=False))
    ok = True
    for name, passed in directional_checks(summary).items():
        print(f"   {'✓' if passed else '✗'} {name}")
        ok = ok and passed
    return 0 if ok else 1


if __name__ == "__main__":
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    sys.exit(main())
