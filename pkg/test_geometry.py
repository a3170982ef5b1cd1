"""测试图像几何：双线性采样、图块提取、裁剪缩放、翻转"""
import sys
import os

import numpy as np
import pytest

# 添加项目路径
sys.path.insert(0, os.path.dirname(os.path.abspath(__file__)))

from lafs_local.geometry import (
    Image,
    LandmarkSet,
    bilinear_sample,
    crop_resize,
    extract_patches,
    grid_landmarks,
    hflip,
    patch_offsets,
)
from lafs_local.tensor import DimensionError, ParameterError, Tape, Tensor, backward, parameter


def create_test_image(size: int = 9, channels: int = 1, seed: int = 0) -> Image:
    """生成 [C,size,size] 的随机测试图像"""
    rng = np.random.default_rng(seed)
    return Image.from_array(rng.uniform(0.0, 1.0, size=(channels, size, size)))


def test_bilinear_sample():
    """2×2 图像上的插值、整数点取值、越界补 0"""
    img = Image.from_array(np.array([[0.0, 1.0], [2.0, 3.0]]) / 3.0)
    center = bilinear_sample(img, Tensor([[0.5, 0.5]])).numpy()
    assert center.shape == (1, 1)
    assert abs(center[0, 0] * 3.0 - 1.5) < 1e-6

    corner = bilinear_sample(img, Tensor([[1.0, 0.0], [0.0, 1.0]])).numpy()
    assert abs(corner[0, 0] * 3.0 - 1.0) < 1e-6
    assert abs(corner[1, 0] * 3.0 - 2.0) < 1e-6

    outside = bilinear_sample(img, Tensor([[-1.0, -1.0], [5.0, 5.0]])).numpy()
    assert np.all(outside == 0.0)

    with pytest.raises(DimensionError):
        bilinear_sample(img, Tensor([0.5, 0.5]))
    print("✓ bilinear_sample")


def test_grid_aligned_patches_match_crops():
    """关键点落在网格中心时，提取的图块与直接切块逐位一致"""
    for size, p in ((9, 3), (16, 8)):
        img = create_test_image(size, channels=1, seed=size)
        coords = grid_landmarks(size, p)
        assert coords.shape == ((size // p) ** 2, 2)
        stack = extract_patches(img, LandmarkSet(Tensor(coords), canvas=size), p)
        assert stack.patches.shape == ((size // p) ** 2, 1, p, p)
        data = img.data.numpy()
        n = size // p
        for k in range(n * n):
            i, j = divmod(k, n)
            expected = data[:, i * p:(i + 1) * p, j * p:(j + 1) * p]
            assert np.array_equal(stack.patches.numpy()[k], expected), f"图块 {k} 不一致"
    print("✓ 网格图块一致")


def test_patch_offsets():
    """偏移以中心对称，行优先"""
    off = patch_offsets(3)
    assert off.shape == (9, 2)
    assert np.allclose(off.sum(axis=0), 0.0)
    assert tuple(off[0]) == (-1.0, -1.0)
    assert tuple(off[1]) == (0.0, -1.0)
    with pytest.raises(ParameterError):
        patch_offsets(0)
    with pytest.raises(ParameterError):
        grid_landmarks(10, 3)
    print("✓ patch_offsets")


def test_patch_gradients():
    """梯度同时流向图像与关键点坐标"""
    img_t = parameter(create_test_image(9, seed=3).data.numpy())
    coords = parameter([[0.31, 0.42], [0.63, 0.57]])
    with Tape() as tape:
        stack = extract_patches(img_t, LandmarkSet(coords, canvas=9), 3)
        loss = (stack.patches * stack.patches).sum()
    backward(loss, tape)
    assert img_t.grad is not None and np.any(img_t.grad != 0)
    assert coords.grad is not None and np.all(np.isfinite(coords.grad))
    print("✓ 图块梯度")


def test_crop_resize():
    """整框同尺寸裁剪为恒等；左上象限裁剪得到常数块"""
    img = create_test_image(8, channels=3, seed=1)
    same = crop_resize(img, (0.0, 0.0, 1.0, 1.0), 8)
    assert np.allclose(same.data.numpy(), img.data.numpy(), atol=1e-6)

    blocks = np.zeros((1, 8, 8))
    blocks[:, :4, :4] = 0.25
    blocks[:, :4, 4:] = 0.5
    blocks[:, 4:, :4] = 0.75
    blocks[:, 4:, 4:] = 1.0
    quad = crop_resize(Image.from_array(blocks), (0.0, 0.0, 3.0 / 7.0, 3.0 / 7.0), 4)
    assert quad.data.shape == (1, 4, 4)
    assert np.allclose(quad.data.numpy(), 0.25, atol=1e-5)

    for bad in ((0.5, 0.5, 0.5, 0.9), (-0.1, 0.0, 1.0, 1.0), (0.0, 0.0, 1.2, 1.0)):
        with pytest.raises(ParameterError):
            crop_resize(img, bad, 4)
    print("✓ crop_resize")


def test_hflip():
    """水平翻转镜像列，两次翻转还原"""
    img = Image.from_array(np.array([[0.0, 0.25], [0.5, 1.0]]))
    flipped = hflip(img).data.numpy()
    assert np.array_equal(flipped[0], np.array([[0.25, 0.0], [1.0, 0.5]], dtype=np.float32))

    other = create_test_image(6, channels=3)
    assert np.array_equal(hflip(hflip(other)).data.numpy(), other.data.numpy())
    print("✓ hflip")


def test_structures():
    """数据结构的形状校验"""
    with pytest.raises(DimensionError):
        Image.from_array(np.zeros((2, 4, 4)))
    with pytest.raises(DimensionError):
        LandmarkSet(Tensor(np.zeros((3, 3))))
    lm = LandmarkSet(Tensor(np.zeros((4, 2))))
    assert lm.indices == [0, 1, 2, 3]
    assert lm.count == 4
    print("✓ 数据结构")


def main():
    print("\n" + "=" * 60)
    print("图像几何测试")
    print("=" * 60)
    try:
        test_bilinear_sample()
        test_grid_aligned_patches_match_crops()
        test_patch_offsets()
        test_patch_gradients()
        test_crop_resize()
        test_hflip()
        test_structures()
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
