#!/usr/bin/env python3
"""LAFS 命令行工具

用法:
    python lafs_cli.py gen-data --data data/synth --ids 400 --per-id 5
    python lafs_cli.py bootstrap --data data/synth --out runs/demo
    python lafs_cli.py pretrain --method lafs --alpha 2 --subset 36 --out runs/demo
    python lafs_cli.py finetune --mode c --beta 0.1 --shots 1 --out runs/demo
    python lafs_cli.py eval --far 1e-3,1e-2 --out runs/demo
    python lafs_cli.py gradcheck
    python lafs_cli.py ablate --experiment shuffle

配置：
    --config 指定 key=value 文本（或 .yaml），命令行参数覆盖配置文件；
    环境变量 / .env 中的 LAFS_SEED 作为默认种子。
    每个阶段的指标追加到 <out>/metrics.csv（step, phase, name, value）。
"""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence

from checkpoint_io import CheckpointError
from dataset_adapter import DatasetError, build_pairs, write_pairs
from lafs_config import LafsConfig, config_hash, resolve_config
from lafs_local.tensor import ConfigError, ContractError, DimensionError, NumericalError, ParameterError
from metrics_writer import MetricsWriter

logger = logging.getLogger("lafs_cli")

# 命令行 dest 与 LafsConfig 字段同名的参数，解析后作为覆盖项
CONFIG_KEYS = tuple(LafsConfig.__dataclass_fields__)

KNOWN_ERRORS = (
    ConfigError,
    ParameterError,
    DimensionError,
    ContractError,
    NumericalError,
    CheckpointError,
    DatasetError,
    FileNotFoundError,
    OSError,
)


# ============================================
# 参数解析
# ============================================

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=str, default=None, help="key=value 配置文件（或 .yaml）")
    common.add_argument("--data", dest="data_dir", type=str, default=None, help="数据目录（含 manifest.tsv）")
    common.add_argument("--out", dest="out_dir", type=str, default=None, help="运行目录（checkpoint 与 metrics.csv）")
    common.add_argument("--seed", type=int, default=None, help="随机种子（默认读取 LAFS_SEED，否则 0）")
    common.add_argument("--log-level", type=str, default="INFO", help="日志级别 (默认: INFO)")

    parser = argparse.ArgumentParser(
        description="LAFS 桌面规模流水线：关键点自举 → 自蒸馏预训练 → 微调 → 验证评估",
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog="""
示例:
  python lafs_cli.py gen-data                          生成默认合成数据集
  python lafs_cli.py bootstrap                         监督自举关键点 CNN
  python lafs_cli.py pretrain --method lafs --alpha 2 --subset 36
  python lafs_cli.py pretrain --method dino --teacher-views grid
  python lafs_cli.py finetune --mode c --beta 0.1     软标签关键点正则微调
  python lafs_cli.py finetune --mode a --shots 1      1-shot 微调，关键点 CNN 固定
  python lafs_cli.py eval --far 1e-3,1e-2             k 折准确率 + TAR@FAR
  python lafs_cli.py gradcheck                         有限差分检查全部可微算子
        """,
    )
    sub = parser.add_subparsers(dest="command", metavar="COMMAND")
    sub.required = True

    g = sub.add_parser("gen-data", parents=[common], help="生成合成人脸数据集")
    g.add_argument("--ids", dest="n_identities", type=int, default=None, help="身份数")
    g.add_argument("--per-id", dest="images_per_identity", type=int, default=None, help="每身份图像数")
    g.add_argument("--canvas", type=int, default=None, help="图像边长 (默认: 112)")
    g.add_argument("--rgb", dest="channels", action="store_const", const=3, default=None, help="生成 RGB 图像")

    b = sub.add_parser("bootstrap", parents=[common], help="监督训练 Part fViT，得到关键点 CNN")
    b.add_argument("--epochs", dest="bootstrap_epochs", type=int, default=None, help="训练轮数 (默认: 20)")
    b.add_argument("--landmarks", dest="n_landmarks", type=int, default=None, help="关键点数 R (默认: 196)")

    p = sub.add_parser("pretrain", parents=[common], help="自蒸馏预训练（LAFS / DINO）")
    p.add_argument("--method", choices=["lafs", "dino"], default=None, help="预训练方法 (默认: lafs)")
    p.add_argument("--teacher-views", dest="teacher_views", choices=["landmark", "grid", "mixed"], default=None,
                   help="教师视图 (默认: landmark)")
    p.add_argument("--alpha", type=float, default=None, help="坐标扰动幅度 α，像素 (默认: part 骨干 2，grid 骨干 0)")
    p.add_argument("--subset", type=int, default=None, help="学生关键点数 k (默认: 36)")
    p.add_argument("--no-shuffle", dest="shuffle", action="store_const", const=False, default=None,
                   help="关闭 Landmark Shuffle (grid 骨干默认关闭)")
    p.add_argument("--steps", dest="pretrain_steps", type=int, default=None, help="训练步数 (默认: 200)")
    p.add_argument("--batch", dest="pretrain_batch", type=int, default=None, help="批大小 (默认: 8)")

    f = sub.add_parser("finetune", parents=[common], help="CosFace 微调（a/b/c/grid 四种关键点方式）")
    f.add_argument("--mode", choices=["a", "b", "c", "grid"], default=None, help="关键点方式 (默认: c)")
    f.add_argument("--beta", type=float, default=None, help="软标签正则权重 β (默认: 0.1)")
    f.add_argument("--reference", type=str, default=None,
                   help="方式 (c) 的参考关键点 CNN checkpoint（默认与 <out>/localizer.ckpt 相同）")
    f.add_argument("--shots", type=str, default=None, help="每身份样本数，正整数或 all (默认: all)")
    f.add_argument("--fraction", type=float, default=None, help="使用的身份比例 (0,1] (默认: 1)")
    f.add_argument("--objective", choices=["cosface", "dino"], default=None, help="微调目标 (默认: cosface)")
    f.add_argument("--epochs", dest="finetune_epochs", type=int, default=None, help="100%% 数据时的轮数 (默认: 34)")
    f.add_argument("--init", type=str, default=None, help="初始化 checkpoint（默认 <out>/teacher.ckpt，不存在则随机初始化）")

    e = sub.add_parser("eval", parents=[common], help="1:1 验证评估")
    e.add_argument("--pairs", type=str, default=None, help="验证对 TSV（默认在留出身份上生成）")
    e.add_argument("--far", type=str, default=None, help="逗号分隔的 FAR 列表 (默认: 1e-4,1e-3,1e-2,1e-1)")
    e.add_argument("--folds", type=int, default=None, help="k 折数 (默认: 10)")
    e.add_argument("--checkpoint", type=str, default=None, help="评估的 checkpoint（默认 <out>/finetuned.ckpt）")

    c = sub.add_parser("gradcheck", parents=[common], help="有限差分梯度检查")
    c.add_argument("--instances", type=int, default=5, help="每个算子的随机实例数 (默认: 5)")

    a = sub.add_parser("ablate", parents=[common], help="消融实验（多种子中位数）")
    a.add_argument("--experiment", type=str, default="scratch_vs_lafs", help="实验名")
    a.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2], help="种子列表")
    a.add_argument("--steps", dest="pretrain_steps", type=int, default=None, help="预训练步数 (默认: 2000)")
    return parser


def config_from_args(args: argparse.Namespace) -> LafsConfig:
    flags: Dict[str, Any] = {k: getattr(args, k) for k in CONFIG_KEYS if hasattr(args, k)}
    return resolve_config(args.config, flags)


# ============================================
# 子命令
# ============================================

def cmd_gen_data(cfg: LafsConfig, args: argparse.Namespace) -> int:
    from synthetic_faces import SyntheticFaceSpec, generate_synthetic

    spec = SyntheticFaceSpec(
        canvas=cfg.canvas,
        n_identities=cfg.n_identities,
        images_per_identity=cfg.images_per_identity,
        channels=cfg.channels,
        seed=cfg.seed,
    )
    print(f"\n📊 步骤 1/1 生成合成数据：{spec.n_identities} 个身份 × {spec.images_per_identity} 张")
    manifest = generate_synthetic(spec, cfg.data_dir)
    print(f"   ✓ {len(manifest.entries)} 张图像 → {cfg.data_dir}")
    return 0


def cmd_bootstrap(cfg: LafsConfig, args: argparse.Namespace, writer: MetricsWriter) -> int:
    from lafs_pipeline import load_splits, save_model, stage_bootstrap

    out = Path(cfg.out_dir)
    print("\n📊 步骤 1/2 读取数据")
    train, held = load_splits(cfg)
    print(f"   ✓ 训练 {len(train)} 张 / {train.num_classes} 个身份，留出 {held.num_classes} 个身份")

    print("\n📊 步骤 2/2 监督自举关键点 CNN")
    result = stage_bootstrap(cfg, train, writer)
    save_model(out / "localizer.ckpt", cfg, "bootstrap", len(result.history), None, result.localizer)
    save_model(out / "bootstrap_vit.ckpt", cfg, "bootstrap", len(result.history), result.vit, result.localizer)
    print(f"   ✓ 损失 {result.initial_loss:.4f} → {result.final_loss:.4f}，关键点平均间距 {result.landmark_spread:.4f}")
    return 0


def cmd_pretrain(cfg: LafsConfig, args: argparse.Namespace, writer: MetricsWriter) -> int:
    from lafs_pipeline import load_localizer, load_splits, save_model, stage_pretrain

    out = Path(cfg.out_dir)
    pcfg = cfg.pretrain_config()
    print("\n📊 步骤 1/2 读取数据与关键点 CNN")
    train, _ = load_splits(cfg)
    localizer = None
    if pcfg.backbone != "grid":
        localizer = load_localizer(out / "localizer.ckpt")
        print(f"   ✓ 关键点 CNN：R={localizer.n_landmarks}（已冻结）")

    print(f"\n📊 步骤 2/2 预训练 method={pcfg.method} teacher_views={pcfg.teacher_view_mode} "
          f"α={pcfg.alpha} k={pcfg.subset} steps={pcfg.steps}")
    ts = stage_pretrain(cfg, train, localizer, writer)
    save_model(out / "teacher.ckpt", cfg, "pretrain", ts.step, ts.teacher_vit, ts.localizer, ts.teacher_head)
    save_model(out / "student.ckpt", cfg, "pretrain", ts.step, ts.student_vit, ts.localizer, ts.student_head)
    print(f"   ✓ teacher.ckpt / student.ckpt → {out}")
    return 0


def cmd_finetune(cfg: LafsConfig, args: argparse.Namespace, writer: MetricsWriter) -> int:
    from lafs_pipeline import load_localizer, load_splits, load_vit, save_model, stage_finetune

    out = Path(cfg.out_dir)
    fcfg = cfg.finetune_config()
    print("\n📊 步骤 1/2 读取数据与初始化权重")
    train, _ = load_splits(cfg)
    init = Path(args.init) if args.init else out / "teacher.ckpt"
    vit = None
    if init.exists():
        vit = load_vit(init)
        print(f"   ✓ 初始化自 {init}")
    elif args.init:
        raise FileNotFoundError(f"初始化 checkpoint 不存在: {init}")
    else:
        print("   ⚠️  未找到预训练权重，从随机初始化开始")
    localizer = None
    if fcfg.mode != "landmark_to_grid":
        localizer = load_localizer(out / "localizer.ckpt")
    reference = None
    if fcfg.mode == "soft_label" and cfg.reference:
        reference = load_localizer(cfg.reference)
        print(f"   ✓ 参考关键点 CNN δ̂ 来自 {cfg.reference}")

    print(f"\n📊 步骤 2/2 微调 mode={fcfg.mode} β={fcfg.beta} shots={cfg.shots} "
          f"fraction={cfg.fraction} epochs={fcfg.epochs} objective={fcfg.objective}")
    state = stage_finetune(cfg, train, vit, localizer, writer, reference=reference)
    save_model(out / "finetuned.ckpt", cfg, "finetune", state.step, state.model.vit, state.model.localizer, state.head)
    print(f"   ✓ finetuned.ckpt → {out}")
    return 0


def cmd_eval(cfg: LafsConfig, args: argparse.Namespace, writer: MetricsWriter) -> int:
    from lafs_pipeline import load_face_model, load_splits, stage_eval
    from report_exporter import ReportExporter, export_report

    out = Path(cfg.out_dir)
    ckpt = Path(args.checkpoint) if args.checkpoint else out / "finetuned.ckpt"
    print(f"\n📊 步骤 1/2 读取 {ckpt} 与留出身份")
    model = load_face_model(ckpt)
    _, held = load_splits(cfg)
    pairs = None
    if not cfg.pairs:
        pairs = build_pairs(held, cfg.n_pairs, cfg.n_pairs, cfg.seed)
        write_pairs(pairs, held, out / "pairs.tsv")
        print(f"   ✓ 生成验证对 {len(pairs)} 个 → {out / 'pairs.tsv'}")

    print("\n📊 步骤 2/2 评估")
    report = stage_eval(cfg, held, model, pairs, writer)
    paths = export_report(report, out)
    print(ReportExporter().format_summary(report, title=f"验证评估 · {ckpt.name}"))
    print(f"   ✓ 报告已保存: {paths['json']}")
    return 0


def cmd_gradcheck(cfg: LafsConfig, args: argparse.Namespace) -> int:
    from lafs_local.gradchecks import TOLERANCE, run_gradcheck_suite

    print(f"\n📊 有限差分梯度检查（每个算子 {args.instances} 个实例，阈值 {TOLERANCE:g}）")
    results = run_gradcheck_suite(args.instances, cfg.seed)
    failed = [name for name, err in results.items() if not err < TOLERANCE]
    for name, err in results.items():
        print(f"   {'✓' if err < TOLERANCE else '✗'} {name:<24} {err:.2e}")
    if failed:
        print(f"\n❌ {len(failed)} 个算子未通过: {', '.join(failed)}")
        return 1
    return 0


def cmd_ablate(cfg: LafsConfig, args: argparse.Namespace) -> int:
    import ablation_runner

    argv: List[str] = ["--experiment", args.experiment, "--seeds", *map(str, args.seeds), "--out", cfg.out_dir]
    if args.pretrain_steps is not None:
        argv += ["--pretrain-steps", str(args.pretrain_steps)]
    return ablation_runner.main(argv)


# ============================================
# 入口
# ============================================

def cli(argv: Optional[Sequence[str]] = None) -> int:
    """解析参数并执行子命令，返回退出码（参数错误由 argparse 以退出码 2 结束）"""
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=getattr(logging, str(args.log_level).upper(), logging.INFO),
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        cfg = config_from_args(args)
        logger.info(f"[cli] command={args.command} config_hash={config_hash(cfg)[:12]}")
        if args.command == "gen-data":
            return cmd_gen_data(cfg, args)
        if args.command == "gradcheck":
            return cmd_gradcheck(cfg, args)
        if args.command == "ablate":
            return cmd_ablate(cfg, args)
        handlers = {
            "bootstrap": cmd_bootstrap,
            "pretrain": cmd_pretrain,
            "finetune": cmd_finetune,
            "eval": cmd_eval,
        }
        with MetricsWriter(Path(cfg.out_dir) / cfg.metrics_file) as writer:
            code = handlers[args.command](cfg, args, writer)
        print("\n✅ 完成！\n")
        return code
    except KNOWN_ERRORS as e:
        logger.error(f"[cli] {type(e).__name__}: {e}")
        print(f"\n   ✗ {type(e).__name__}: {e}\n", file=sys.stderr)
        return 1


if __name__ == "__main__":
    try:
        sys.exit(cli())
    except KeyboardInterrupt:
        print("\n\n⚠️  用户中断\n")
        sys.exit(0)
    except Exception as e:
        print(f"\n\n❌ 未预期的错误: {e}\n")
        import traceback
        traceback.print_exc()
        sys.exit(1)
