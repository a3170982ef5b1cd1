"""测试关键点 CNN：输出范围、确定性、冻结"""
import sys
import os

import numpy as np
import pytest

# 添加项目路径
sys.path.insert(0, os.path.dirname(os.path.abspath(__file__)))

from lafs_local.geometry import Image
from lafs_local.localizer import (
    LocalizerConfig,
    LocalizerParams,
    freeze,
    initial_layout,
    mean_pairwise_distance,
    predict_landmarks,
    predict_landmarks_batch,
)
from lafs_local.tensor import ConfigError, DimensionError, Tape, Tensor, backward, parameter


def create_test_localizer(n_landmarks: int = 9, seed: int = 0) -> LocalizerParams:
    """两层卷积的小型关键点 CNN（最小输入 7×7）"""
    return LocalizerParams(LocalizerConfig(n_landmarks=n_landmarks, channels=(4, 8), hidden=16), seed=seed)


def create_test_images(batch: int = 2, size: int = 16, seed: int = 0) -> np.ndarray:
    rng = np.random.default_rng(seed)
    return rng.uniform(0.0, 1.0, size=(batch, 1, size, size)).astype(np.float32)


def test_landmarks_span_unit_square():
    """每张图每个轴都被缩放到 min=0、max=1"""
    p = create_test_localizer()
    coords = predict_landmarks_batch(Tensor(create_test_images()), p).numpy()
    assert coords.shape == (2, 9, 2)
    assert np.all(coords >= -1e-6) and np.all(coords <= 1.0 + 1e-6)
    assert np.allclose(coords.min(axis=1), 0.0, atol=1e-6)
    assert np.allclose(coords.max(axis=1), 1.0, atol=1e-6)
    print("✓ 坐标范围")


def test_deterministic():
    """相同输入、相同参数 → 相同坐标"""
    p = create_test_localizer(seed=4)
    img = Image.from_array(create_test_images(1, seed=2)[0])
    a = predict_landmarks(img, p).coords.numpy()
    b = predict_landmarks(img, p).coords.numpy()
    assert np.array_equal(a, b)

    q = create_test_localizer(seed=4)
    assert np.array_equal(predict_landmarks(img, q).coords.numpy(), a)
    print("✓ 确定性")


def test_freeze():
    """冻结后参数不进入 Tape，梯度只流向图像；冻结幂等"""
    p = freeze(create_test_localizer())
    assert freeze(p) is p and p.frozen
    images = parameter(create_test_images(1, seed=5))
    with Tape() as tape:
        coords = predict_landmarks_batch(images, p)
        loss = (coords * Tensor(np.arange(18, dtype=np.float64).reshape(1, 9, 2))).sum()
    backward(loss, tape)
    assert all(t.grad is None for t in p.named_parameters().values())
    assert images.grad is not None
    print("✓ 冻结")


def test_contracts():
    """输入过小、R < 2 的报错"""
    p = create_test_localizer()
    assert p.cfg.min_input_size == 7
    with pytest.raises(DimensionError):
        predict_landmarks_batch(Tensor(np.zeros((1, 1, 5, 5))), p)
    with pytest.raises(ConfigError):
        LocalizerConfig(n_landmarks=1)
    print("✓ 契约检查")


def test_layout_helpers():
    """平方数 R 的初始布局为网格中心；平均两两距离"""
    layout = initial_layout(4)
    assert np.allclose(sorted(set(layout[:, 0])), [0.25, 0.75])
    assert abs(mean_pairwise_distance(np.array([[0.0, 0.0], [1.0, 0.0]])) - 1.0) < 1e-12
    assert initial_layout(5, seed=1).shape == (5, 2)
    print("✓ 布局辅助函数")


def main():
    print("\n" + "=" * 60)
    print("关键点 CNN 测试")
    print("=" * 60)
    try:
        test_landmarks_span_unit_square()
        test_deterministic()
        test_freeze()
        test_contracts()
        test_layout_helpers()
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
