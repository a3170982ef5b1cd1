"""测试数据与命令行：checkpoint、配置、metrics、合成数据、数据集划分、CLI"""
import sys
import os
import tempfile
from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest

# 添加项目路径
sys.path.insert(0, os.path.dirname(os.path.abspath(__file__)))

from ablation_runner import EXPERIMENTS
from checkpoint_io import (
    CheckpointError,
    collect_state,
    decode_checkpoint,
    encode_checkpoint,
    load_checkpoint,
    restore,
    save_checkpoint,
)
from dataset_adapter import (
    DatasetError,
    DatasetManifest,
    FaceDataset,
    build_pairs,
    load_dataset,
    read_manifest,
    read_pairs,
    split_identities,
    write_pairs,
)
from lafs_cli import cli
from lafs_config import (
    LafsConfig,
    changed_keys,
    config_hash,
    load_config,
    parse_key_values,
    resolve_config,
)
from lafs_local.gradchecks import TOLERANCE, run_gradcheck_suite
from lafs_local.localizer import LocalizerConfig, LocalizerParams
from lafs_local.part_fvit import ViTConfig, ViTParams
from lafs_local.tensor import ConfigError
from lafs_pipeline import dino_finetune_config
from metrics_writer import MetricsWriter, last_value, read_metrics
from synthetic_faces import SyntheticFaceSpec, generate_synthetic, synthetic_arrays

SMALL_VIT = ViTConfig(patch_size=4, in_channels=1, dim=8, depth=1, heads=2, max_tokens=16)

PIPELINE_CONFIG = """
# 端到端冒烟配置
canvas = 32
n_identities = 6
images_per_identity = 3
train_identities = 3
n_landmarks = 16
patch_size = 8
dim = 16
depth = 1
heads = 2
head_out_dim = 64
bootstrap_epochs = 1
subset = 8
n_local = 1
local_size = 32
pretrain_steps = 1
pretrain_batch = 2
finetune_epochs = 1
finetune_batch = 4
n_pairs = 8
folds = 4
far = 0.5,1
"""


def create_test_params(seed: int = 0):
    return collect_state(
        ViTParams(SMALL_VIT, seed=seed),
        LocalizerParams(LocalizerConfig(n_landmarks=9, channels=(4, 8), hidden=16), seed=seed),
    )


def create_missing_env(tmp: Path) -> Path:
    """指向不存在的 .env，使配置解析不读取仓库里的文件"""
    return tmp / "no.env"


# ============================================================
# checkpoint
# ============================================================

def test_checkpoint_save_load_save():
    """保存 → 读取 → 再保存，字节完全一致；元数据旁路文件带格式与参数量"""
    params = create_test_params()
    with tempfile.TemporaryDirectory() as tmp:
        first = save_checkpoint(params, {"stage": "test"}, Path(tmp) / "a.ckpt")
        loaded, meta = load_checkpoint(first)
        second = save_checkpoint(loaded, meta, Path(tmp) / "b.ckpt")
        assert first.read_bytes() == second.read_bytes()
        assert list(loaded) == list(params)
        assert meta["stage"] == "test"
        assert meta["format"] == "lafs-ckpt-1"
        assert meta["n_params"] == sum(v.size for v in params.values())

        with pytest.raises(FileNotFoundError):
            load_checkpoint(Path(tmp) / "missing.ckpt")
    print("✓ checkpoint 保存与读取")


def test_checkpoint_errors():
    """截断、魔数、版本、条目数不符与尾部多余字节"""
    buf = encode_checkpoint(create_test_params())

    cases = {
        "truncated": [buf[:3], buf[:-3]],
        "bad_magic": [b"XXXX" + buf[4:]],
        "bad_version": [buf[:4] + (99).to_bytes(4, "little") + buf[8:]],
        "corrupt": [buf + b"\x00"],
    }
    for code, bufs in cases.items():
        for bad in bufs:
            with pytest.raises(CheckpointError) as exc:
                decode_checkpoint(bad)
            assert exc.value.code == code
    print("✓ checkpoint 错误码")


def test_checkpoint_count_mismatch():
    """文件头声明的条目数多于实际条目 → corrupt"""
    params = create_test_params()
    buf = bytearray(encode_checkpoint(params))
    count = int.from_bytes(buf[8:12], "little")
    assert count == len(params)
    buf[8:12] = (count + 1).to_bytes(4, "little")
    with pytest.raises(CheckpointError) as exc:
        decode_checkpoint(bytes(buf))
    assert exc.value.code == "corrupt"
    print("✓ 条目数不符")


def test_restore_state():
    """collect_state 带前缀合并，restore 逐位还原"""
    src = ViTParams(SMALL_VIT, seed=1)
    dst = ViTParams(SMALL_VIT, seed=2)
    state = collect_state(src)
    assert all(name.startswith("vit.") for name in state)
    restore(dst, decode_checkpoint(encode_checkpoint(state)))
    assert all(np.array_equal(src[k].numpy(), dst[k].numpy()) for k in src)

    with pytest.raises(CheckpointError):
        collect_state(src, dst)
    partial = dict(state)
    partial.pop("vit.patch_proj")
    with pytest.raises(CheckpointError) as exc:
        restore(ViTParams(SMALL_VIT), partial)
    assert exc.value.code == "corrupt"
    print("✓ 参数还原")


# ============================================================
# 配置
# ============================================================

def test_parse_key_values():
    """注释、空行、类型转换与非法输入"""
    parsed = parse_key_values("# 注释\n\nseed = 3\nalpha=1.5\nshuffle = no\nfar = 1e-3,1e-2\n")
    assert parsed == {"seed": 3, "alpha": 1.5, "shuffle": False, "far": "1e-3,1e-2"}

    with pytest.raises(ConfigError):
        parse_key_values("unknown_key = 1")
    with pytest.raises(ConfigError):
        parse_key_values("seed 3")
    with pytest.raises(ConfigError):
        parse_key_values("seed = abc")
    with pytest.raises(ConfigError):
        parse_key_values("shuffle = maybe")
    print("✓ key=value 解析")


def test_config_precedence():
    """默认值 < 配置文件 < 命令行参数；None 视为未指定"""
    with tempfile.TemporaryDirectory() as tmp:
        tmp = Path(tmp)
        path = tmp / "run.cfg"
        path.write_text("seed = 5\nbeta = 0.3\nmode = a\n", encoding="utf-8")
        env = create_missing_env(tmp)

        from_file = resolve_config(str(path), {}, env_file=env)
        assert from_file.seed == 5 and from_file.beta == 0.3 and from_file.mode == "a"

        flagged = resolve_config(str(path), {"seed": 9, "beta": None}, env_file=env)
        assert flagged.seed == 9 and flagged.beta == 0.3

        yaml_path = tmp / "run.yaml"
        yaml_path.write_text("n_landmarks: 49\nshuffle: false\n", encoding="utf-8")
        assert load_config(yaml_path) == {"n_landmarks": 49, "shuffle": False}

        with pytest.raises(ConfigError):
            load_config(tmp / "missing.cfg")
    print("✓ 配置优先级")


def test_env_seed():
    """.env 中的 LAFS_SEED 覆盖默认值，但低于配置文件"""
    saved = os.environ.pop("LAFS_SEED", None)
    try:
        with tempfile.TemporaryDirectory() as tmp:
            tmp = Path(tmp)
            env = tmp / ".env"
            env.write_text("LAFS_SEED=7\n", encoding="utf-8")
            assert resolve_config(None, {}, env_file=env).seed == 7
            path = tmp / "run.cfg"
            path.write_text("seed = 4\n", encoding="utf-8")
            assert resolve_config(str(path), {}, env_file=env).seed == 4
    finally:
        os.environ.pop("LAFS_SEED", None)
        if saved is not None:
            os.environ["LAFS_SEED"] = saved
    print("✓ LAFS_SEED")


def test_config_helpers():
    """shots / far 解析、校验、配置哈希与差异键"""
    cfg = LafsConfig()
    assert cfg.shots_value() is None
    assert LafsConfig(shots="2").shots_value() == 2
    assert cfg.far_values() == (1e-4, 1e-3, 1e-2, 1e-1)
    assert cfg.finetune_config().epochs == 34
    assert LafsConfig(fraction=0.01).finetune_config().epochs == 80

    with pytest.raises(ConfigError):
        LafsConfig(shots="0").validate()
    with pytest.raises(ConfigError):
        LafsConfig(far="0.5,2").validate()
    with pytest.raises(ConfigError):
        LafsConfig(mode="d").validate()

    assert config_hash(LafsConfig()) == config_hash(LafsConfig())
    assert config_hash(LafsConfig(seed=1)) != config_hash(LafsConfig())
    assert changed_keys(LafsConfig(seed=1, alpha=0.0)) == ["alpha", "seed"]
    print("✓ 配置辅助函数")


def test_grid_pretrain_defaults():
    """grid 骨干默认不扰动、不打乱；显式设置（配置文件或消融变体）优先"""
    grid = LafsConfig(teacher_views="grid").pretrain_config()
    assert grid.alpha == 0.0 and grid.shuffle is False
    part = LafsConfig().pretrain_config()
    assert part.alpha == 2.0 and part.shuffle is True

    variants = {v.name: v for v in EXPERIMENTS["shuffle"]}
    no_shuffle = replace(LafsConfig(), **variants["grid_no_shuffle"].overrides).pretrain_config()
    assert no_shuffle.alpha == 0.0 and no_shuffle.shuffle is False
    shuffled = replace(LafsConfig(), **variants["grid_shuffle"].overrides).pretrain_config()
    assert shuffled.alpha == 0.0 and shuffled.shuffle is True

    # --objective dino + grid 微调：不继承 part 骨干的默认值
    dino_grid = dino_finetune_config(LafsConfig(mode="grid", objective="dino"), is_grid=True)
    assert dino_grid.teacher_view_mode == "grid" and dino_grid.method == "dino"
    assert dino_grid.alpha == 0.0 and dino_grid.shuffle is False
    explicit = dino_finetune_config(LafsConfig(alpha=1.0, shuffle=True), is_grid=True)
    assert explicit.alpha == 1.0 and explicit.shuffle is True

    assert parse_key_values("alpha = none\nshuffle = true\n") == {"alpha": None, "shuffle": True}
    print("✓ grid 预训练默认值")


# ============================================================
# metrics
# ============================================================

def test_metrics_writer():
    """追加写入时表头只写一次；读取与按阶段取最后值"""
    with tempfile.TemporaryDirectory() as tmp:
        path = Path(tmp) / "metrics.csv"
        with MetricsWriter(path) as writer:
            writer(0, "pretrain", "loss", 2.5)
            writer(1, "pretrain", "loss", 2.0)
        with MetricsWriter(path) as writer:
            writer.write_many(0, "eval", {"accuracy": 0.75, "accuracy_std": 0.01})

        lines = path.read_text(encoding="utf-8").splitlines()
        assert lines[0] == "step,phase,name,value"
        assert sum(1 for line in lines if line.startswith("step,")) == 1

        df = read_metrics(path)
        assert len(df) == 4
        assert last_value(df, "pretrain", "loss") == 2.0
        assert list(read_metrics(path, phase="eval")["name"]) == ["accuracy", "accuracy_std"]
        with pytest.raises(KeyError):
            last_value(df, "finetune", "loss")
    print("✓ metrics 写入")


# ============================================================
# 合成数据与数据集
# ============================================================

def test_synthetic_arrays():
    """按种子确定；数量与取值范围正确"""
    spec = SyntheticFaceSpec(canvas=32, n_identities=3, images_per_identity=2)
    images, labels = synthetic_arrays(spec)
    assert images.shape == (6, 1, 32, 32) and images.dtype == np.float32
    assert labels.tolist() == [0, 0, 1, 1, 2, 2]
    assert images.min() >= 0.0 and images.max() <= 1.0
    again, _ = synthetic_arrays(spec)
    assert np.array_equal(images, again)
    other, _ = synthetic_arrays(SyntheticFaceSpec(canvas=32, n_identities=3, images_per_identity=2, seed=1))
    assert not np.array_equal(images, other)

    with pytest.raises(ConfigError):
        SyntheticFaceSpec(canvas=16)
    with pytest.raises(ConfigError):
        SyntheticFaceSpec(channels=2)
    print("✓ 合成数组")


def test_synthetic_identity_separation():
    """身份均值之间的距离大于同身份图像到其均值的距离"""
    spec = SyntheticFaceSpec(canvas=64, n_identities=4, images_per_identity=3, pose_shift_px=0.0, brightness_range=0.0)
    images, labels = synthetic_arrays(spec)
    flat = images.reshape(len(images), -1)
    means = np.stack([flat[labels == c].mean(axis=0) for c in range(4)])
    within = np.mean([np.linalg.norm(flat[i] - means[labels[i]]) for i in range(len(flat))])
    between = np.mean([np.linalg.norm(means[a] - means[b]) for a in range(4) for b in range(a + 1, 4)])
    assert between > within
    print("✓ 身份可分")


def test_generate_synthetic():
    """两次生成的文件逐字节一致；manifest 读回与内存数组一致"""
    spec = SyntheticFaceSpec(canvas=32, n_identities=10, images_per_identity=2, workers=3)
    with tempfile.TemporaryDirectory() as tmp:
        a = generate_synthetic(spec, Path(tmp) / "a")
        b = generate_synthetic(spec, Path(tmp) / "b")
        assert len(a.entries) == 20
        assert sorted(set(a.labels.tolist())) == list(range(10))
        assert a.entries == b.entries
        for rel in a.paths:
            assert (a.root / rel).read_bytes() == (b.root / rel).read_bytes()
        assert (a.root / "manifest.tsv").read_bytes() == (b.root / "manifest.tsv").read_bytes()
        assert (a.root / "synthetic_spec.yaml").exists()

        manifest = read_manifest(a.root / "manifest.tsv")
        assert manifest.entries == a.entries
        dataset = load_dataset(manifest)
        images, labels = synthetic_arrays(spec)
        assert np.array_equal(dataset.labels, labels)
        assert np.allclose(dataset.images, images, atol=1e-7)
    print("✓ 合成数据落盘")


def test_manifest_errors():
    """重复路径、非连续标签、缺少版本行"""
    with pytest.raises(DatasetError):
        DatasetManifest(root=Path("."), entries=[("a.png", 0), ("a.png", 1)])
    with pytest.raises(DatasetError):
        DatasetManifest(root=Path("."), entries=[("a.png", 0), ("b.png", 2)])
    with tempfile.TemporaryDirectory() as tmp:
        path = Path(tmp) / "manifest.tsv"
        path.write_text("path\tlabel\na.png\t0\n", encoding="utf-8")
        with pytest.raises(DatasetError):
            read_manifest(path)
    print("✓ manifest 校验")


def test_split_identities():
    """按身份划分，两边不相交且各自重编号"""
    labels = np.repeat(np.arange(5), 2)
    images = np.arange(10, dtype=np.float32).reshape(10, 1, 1, 1)
    dataset = FaceDataset(images, labels, [f"img_{i}.png" for i in range(10)])
    train, held = split_identities(dataset, 3, seed=0)
    assert train.num_classes == 3 and held.num_classes == 2
    assert sorted(set(train.labels.tolist())) == [0, 1, 2]
    assert sorted(set(held.labels.tolist())) == [0, 1]
    assert not set(train.paths) & set(held.paths)
    assert len(train) + len(held) == 10

    again, _ = split_identities(dataset, 3, seed=0)
    assert again.paths == train.paths
    for bad in (0, 5):
        with pytest.raises(DatasetError):
            split_identities(dataset, bad, seed=0)
    print("✓ 身份划分")


def test_pairs_file():
    """pairs.tsv 按路径保存，读回得到相同下标；未知路径报错"""
    labels = np.repeat(np.arange(4), 3)
    dataset = FaceDataset(np.zeros((12, 1, 2, 2), dtype=np.float32), labels)
    pairs = build_pairs(dataset, 5, 5, seed=1)
    with tempfile.TemporaryDirectory() as tmp:
        path = Path(tmp) / "pairs.tsv"
        write_pairs(pairs, dataset, path)
        assert path.read_text(encoding="utf-8").startswith("# lafs-pairs v1\n")
        back = read_pairs(path, dataset)
        assert [(p.a, p.b, p.is_genuine) for p in back] == [(p.a, p.b, p.is_genuine) for p in pairs]

        with pytest.raises(DatasetError):
            read_pairs(path, dataset.subset(range(6)))
    print("✓ 验证对文件")


# ============================================================
# CLI
# ============================================================

def test_cli_usage_errors():
    """未知子命令与未知参数由 argparse 以退出码 2 结束"""
    for argv in (["bogus"], ["eval", "--no-such-flag"], []):
        with pytest.raises(SystemExit) as exc:
            cli(argv)
        assert exc.value.code == 2
    print("✓ CLI 参数错误")


def test_gradcheck_suite():
    """全部可微算子的有限差分误差都低于阈值"""
    results = run_gradcheck_suite(instances=2, seed=0)
    assert len(results) >= 10
    for name, err in results.items():
        assert err < TOLERANCE, f"{name}: {err:.2e}"
    assert cli(["gradcheck", "--instances", "1"]) == 0
    print("✓ 梯度检查")


def run_cli_pipeline(tmp: Path, name: str) -> Path:
    """在 tmp 下用 PIPELINE_CONFIG 依次执行五个子命令，返回运行目录"""
    cfg_path = tmp / "smoke.cfg"
    cfg_path.write_text(PIPELINE_CONFIG, encoding="utf-8")
    run = tmp / name
    common = ["--config", str(cfg_path), "--data", str(tmp / f"{name}_data"), "--out", str(run), "--log-level", "WARNING"]
    for command in ("gen-data", "bootstrap", "pretrain", "finetune", "eval"):
        assert cli([command, *common]) == 0, command
    return run


def test_cli_pipeline_smoke():
    """gen-data → bootstrap → pretrain → finetune → eval 在极小配置上跑通"""
    with tempfile.TemporaryDirectory() as tmp:
        tmp = Path(tmp)
        run = run_cli_pipeline(tmp, "run")
        for name in ("localizer.ckpt", "teacher.ckpt", "student.ckpt", "finetuned.ckpt", "pairs.tsv", "report.json"):
            assert (run / name).exists(), name
        df = read_metrics(run / "metrics.csv")
        assert set(df["phase"]) >= {"bootstrap", "pretrain", "finetune", "eval"}
        assert 0.0 <= last_value(df, "eval", "accuracy") <= 1.0

        common = ["--config", str(tmp / "smoke.cfg"), "--data", str(tmp / "run_data"), "--out", str(run)]
        assert cli(["eval", *common, "--checkpoint", str(run / "missing.ckpt")]) == 1
    print("✓ 端到端流水线")


def test_cli_pipeline_reproducible():
    """同一配置与种子跑两遍完整流水线，metrics.csv 逐字节相同"""
    with tempfile.TemporaryDirectory() as tmp:
        tmp = Path(tmp)
        first = (run_cli_pipeline(tmp, "run_a") / "metrics.csv").read_bytes()
        second = (run_cli_pipeline(tmp, "run_b") / "metrics.csv").read_bytes()
        assert first
        assert first == second
    print("✓ 流水线可复现")


def main():
    print("\n" + "=" * 60)
    print("数据与命令行测试")
    print("=" * 60)
    try:
        test_checkpoint_save_load_save()
        test_checkpoint_errors()
        test_checkpoint_count_mismatch()
        test_restore_state()
        test_parse_key_values()
        test_config_precedence()
        test_env_seed()
        test_config_helpers()
        test_grid_pretrain_defaults()
        test_metrics_writer()
        test_synthetic_arrays()
        test_synthetic_identity_separation()
        test_generate_synthetic()
        test_manifest_errors()
        test_split_identities()
        test_pairs_file()
        test_cli_usage_errors()
        test_gradcheck_suite()
        test_cli_pipeline_smoke()
        test_cli_pipeline_reproducible()
        print("\n✅ 所有测试通过！")
        return True
    except AssertionError as e:
        print(f"\n❌ 测试失败: {e}")
        import traceback
        traceback.print_exc()
        return False


if __name__ == "__main__":
    success = main()
    sys.exit(0 if success else 1)
