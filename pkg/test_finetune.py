"""测试监督微调：CosFace、关键点正则、逐层学习率与四种微调方式"""
import copy
import sys
import os

import numpy as np
import pytest

# 添加项目路径
sys.path.insert(0, os.path.dirname(os.path.abspath(__file__)))

from lafs_local.finetune import (
    CosFaceHead,
    FinetuneConfig,
    cosface_logits,
    cosface_loss,
    epochs_for_fraction,
    finetune_with_dino,
    landmark_reg,
    layerwise_lr,
    prepare_finetune,
    resolve_mode,
    run_finetune,
)
from lafs_local.localizer import LocalizerConfig, LocalizerParams
from lafs_local.part_fvit import ViTConfig, ViTParams
from lafs_local.pretrain import HeadConfig, PretrainConfig
from lafs_local.tensor import ConfigError, ParameterError, Tensor

VIT_CFG = ViTConfig(patch_size=4, in_channels=1, dim=8, depth=1, heads=2, max_tokens=16)


def create_test_backbone(seed: int = 0):
    vit = ViTParams(VIT_CFG, seed=seed)
    localizer = LocalizerParams(LocalizerConfig(n_landmarks=9, channels=(4, 8), hidden=16), seed=seed)
    return vit, localizer


def create_test_data(seed: int = 0):
    rng = np.random.default_rng(seed)
    images = rng.uniform(0.0, 1.0, size=(4, 1, 16, 16)).astype(np.float32)
    return images, np.array([0, 0, 1, 1])


def create_test_config(mode: str, **overrides) -> FinetuneConfig:
    base = dict(mode=mode, epochs=1, warmup_epochs=0, batch_size=4, lr=1e-3)
    base.update(overrides)
    return FinetuneConfig(**base)


def test_cosface_logits():
    """目标类 logit 为 s·(cos − m)，其它类为 s·cos"""
    head = CosFaceHead(2, 3, s=10.0, m=0.2)
    head["weight"].data = np.array([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]], dtype=np.float32)
    logits = cosface_logits(Tensor([[2.0, 0.0, 0.0]]), [0], head).numpy()
    assert np.allclose(logits, [[8.0, 0.0]], atol=1e-5)

    loss = cosface_loss(Tensor([2.0, 0.0, 0.0]), [0], head).item()
    assert abs(loss - np.log(1.0 + np.exp(-8.0))) < 1e-5

    with pytest.raises(ParameterError):
        cosface_logits(Tensor([[1.0, 0.0, 0.0]]), [2], head)
    with pytest.raises(ParameterError):
        CosFaceHead(2, 3, m=1.0)
    print("✓ CosFace")


def test_landmark_reg():
    """逐点欧氏距离的均值；参考点不接收梯度"""
    r_hat = np.zeros((2, 2))
    assert landmark_reg(r_hat, Tensor(r_hat)).item() == 0.0
    moved = np.array([[0.3, 0.4], [0.3, 0.4]])
    assert abs(landmark_reg(r_hat, Tensor(moved)).item() - 0.5) < 1e-6
    print("✓ landmark_reg")


def test_layerwise_lr():
    """头部拿 base_lr，每往前一层乘一次 decay"""
    base, decay, total = 1e-4, 0.58, 5
    assert abs(layerwise_lr(base, decay, 5, total) - 1e-4) < 1e-15
    assert abs(layerwise_lr(base, decay, 4, total) - 5.8e-5) < 1e-15
    assert abs(layerwise_lr(base, decay, 0, total) - 1e-4 * 0.58 ** 5) < 1e-15
    with pytest.raises(ParameterError):
        layerwise_lr(base, 0.0, 1, total)
    with pytest.raises(ParameterError):
        layerwise_lr(base, decay, 6, total)
    print("✓ 逐层学习率")


def test_epochs_for_fraction():
    """100% 数据保持原 epoch，1% 数据放大到 80"""
    assert epochs_for_fraction(1.0, 34) == 34
    assert epochs_for_fraction(0.01, 34) == 80
    assert 34 < epochs_for_fraction(0.1, 34) < 80
    with pytest.raises(ParameterError):
        epochs_for_fraction(0.0, 34)
    print("✓ epoch 放大")


def test_mode_resolution():
    """CLI 简写与参数校验"""
    assert resolve_mode("a") == "fixed_landmark"
    assert resolve_mode("b") == "trainable_landmark"
    assert resolve_mode("c") == "soft_label"
    assert resolve_mode("grid") == "landmark_to_grid"
    with pytest.raises(ConfigError):
        resolve_mode("d")
    vit, _ = create_test_backbone()
    with pytest.raises(ConfigError):
        prepare_finetune(vit, None, 2, create_test_config("a"))
    _, localizer = create_test_backbone()
    with pytest.raises(ConfigError):
        prepare_finetune(vit, localizer, 2, create_test_config("c"))
    print("✓ 微调方式")


def test_fixed_landmark_keeps_localizer():
    """方式 (a)：关键点 CNN 参数逐位不变，ViT 被更新"""
    vit, localizer = create_test_backbone(seed=1)
    loc_before, vit_before = localizer.snapshot(), vit.snapshot()
    state = prepare_finetune(vit, localizer, 2, create_test_config("a"))
    images, labels = create_test_data()
    history = run_finetune(images, labels, state)
    assert len(history) == 1 and np.isfinite(history[0].loss)
    assert all(np.array_equal(loc_before[k], localizer[k].numpy()) for k in localizer)
    assert any(not np.array_equal(vit_before[k], vit[k].numpy()) for k in vit)
    assert not any(name.startswith("localizer.") for name in state.trainable_parameters())
    print("✓ 方式 (a)")


def test_soft_label_with_zero_beta_matches_trainable():
    """β=0 的方式 (c) 与方式 (b) 结果逐位一致"""
    vit, localizer = create_test_backbone(seed=2)
    images, labels = create_test_data(seed=3)

    vit_b, loc_b = copy.deepcopy(vit), copy.deepcopy(localizer)
    run_finetune(images, labels, prepare_finetune(vit_b, loc_b, 2, create_test_config("b")))

    vit_c, loc_c = copy.deepcopy(vit), copy.deepcopy(localizer)
    state_c = prepare_finetune(vit_c, loc_c, 2, create_test_config("c", beta=0.0), reference=copy.deepcopy(localizer))
    history = run_finetune(images, labels, state_c)
    assert history[0].loss_reg == 0.0

    assert all(np.array_equal(vit_b[k].numpy(), vit_c[k].numpy()) for k in vit_b)
    assert all(np.array_equal(loc_b[k].numpy(), loc_c[k].numpy()) for k in loc_b)
    print("✓ β=0 时 (c) = (b)")


def test_soft_label_regularizer():
    """方式 (c)：参考 CNN 保持不变，正则项非负"""
    vit, localizer = create_test_backbone(seed=4)
    state = prepare_finetune(vit, localizer, 2, create_test_config("c", beta=0.5), reference=localizer)
    assert state.reference is not localizer and state.reference.frozen
    ref_before = state.reference.snapshot()
    images, labels = create_test_data(seed=5)
    history = run_finetune(images, labels, state, phase="finetune")
    assert history[0].loss_reg >= 0.0
    assert abs(history[0].loss - (history[0].loss_id + 0.5 * history[0].loss_reg)) < 1e-4
    assert all(np.array_equal(ref_before[k], state.reference[k].numpy()) for k in state.reference)
    print("✓ 方式 (c)")


def test_landmark_to_grid():
    """方式 (4)：丢弃关键点 CNN，按 grid fViT 训练"""
    vit, localizer = create_test_backbone(seed=6)
    state = prepare_finetune(vit, localizer, 2, create_test_config("grid"))
    assert state.model.is_grid
    images, labels = create_test_data(seed=7)
    history = run_finetune(images, labels, state)
    assert np.isfinite(history[0].loss)
    print("✓ 方式 (4)")


def test_lr_scales():
    """分类头倍率为 1，嵌入层与关键点 CNN 倍率为 decay^(L+1)"""
    vit, localizer = create_test_backbone()
    state = prepare_finetune(vit, localizer, 2, create_test_config("b", layer_decay=0.5))
    scales = state.lr_scales()
    assert scales["cosface.weight"] == 1.0
    assert abs(scales["vit.patch_proj"] - 0.25) < 1e-12
    assert abs(scales["vit.blocks.0.mlp0.w"] - 0.5) < 1e-12
    assert abs(scales["localizer.conv0.w"] - 0.25) < 1e-12
    print("✓ 学习率倍率")


def test_finetune_with_dino():
    """DINO 微调目标：训练后学生 ViT 写回骨干，传入的可训练关键点 CNN 保持不变"""
    head_cfg = HeadConfig(in_dim=8, hidden=16, bottleneck=8, out_dim=32)
    images, _ = create_test_data(seed=8)

    vit, localizer = create_test_backbone(seed=9)
    vit_before, loc_before = vit.snapshot(), localizer.snapshot()
    state = prepare_finetune(vit, localizer, 2, create_test_config("b", objective="dino"))
    pcfg = PretrainConfig(method="dino", subset=4, n_local=2, global_size=16, local_size=8, steps=2, batch_size=2)
    history = finetune_with_dino(images, state, pcfg, head_cfg)
    assert len(history) == 2 and all(np.isfinite(r.loss) for r in history)
    assert any(not np.array_equal(vit_before[k], vit[k].numpy()) for k in vit)
    assert all(np.array_equal(loc_before[k], localizer[k].numpy()) for k in localizer)
    assert not localizer.frozen

    grid_vit, _ = create_test_backbone(seed=10)
    grid_state = prepare_finetune(grid_vit, None, 2, create_test_config("grid", objective="dino"))
    grid_cfg = PretrainConfig(method="dino", teacher_view_mode="grid", n_local=2, global_size=16,
                              local_size=8, steps=1, batch_size=2)
    grid_history = finetune_with_dino(images, grid_state, grid_cfg, head_cfg)
    assert len(grid_history) == 1 and grid_history[0].n_teacher_views == 2
    print("✓ DINO 微调目标")


def main():
    print("\n" + "=" * 60)
    print("微调测试")
    print("=" * 60)
    try:
        test_cosface_logits()
        test_landmark_reg()
        test_layerwise_lr()
        test_epochs_for_fraction()
        test_mode_resolution()
        test_fixed_landmark_keeps_localizer()
        test_soft_label_with_zero_beta_matches_trainable()
        test_soft_label_regularizer()
        test_landmark_to_grid()
        test_lr_scales()
        test_finetune_with_dino()
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
