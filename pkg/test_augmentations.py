"""测试视图生成与关键点增强（扰动 / 打乱 / 子采样）"""
import sys
import os

import numpy as np
import pytest

# 添加项目路径
sys.path.insert(0, os.path.dirname(os.path.abspath(__file__)))

from lafs_local.augment import (
    PerturbConfig,
    ViewConfig,
    apply_landmark_augs,
    generate_views,
    landmark_perturb,
    landmark_shuffle,
    subsample_landmarks,
)
from lafs_local.geometry import Image, LandmarkSet
from lafs_local.tensor import ConfigError, ParameterError, Tape, Tensor, backward, parameter


def create_test_landmarks(n: int = 16, canvas: int = 112, seed: int = 0) -> LandmarkSet:
    rng = np.random.default_rng(seed)
    return LandmarkSet(Tensor(rng.uniform(0.0, 1.0, size=(n, 2))), canvas=canvas)


def create_test_image(size: int = 32, seed: int = 0) -> Image:
    rng = np.random.default_rng(seed)
    return Image.from_array(rng.uniform(0.0, 1.0, size=(3, size, size)))


def _rows(lm: LandmarkSet):
    return sorted(map(tuple, lm.coords.numpy().tolist()))


def test_generate_views():
    """视图数量、尺寸、裁剪框范围与确定性"""
    cfg = ViewConfig(n_global=2, n_local=3, global_size=16, local_size=8)
    img = create_test_image()
    batch = generate_views(img, cfg, (0, 1, 2))
    assert len(batch.views) == 5
    assert len(batch.teacher_views) == 2
    assert [v.size for v in batch.views] == [16, 16, 8, 8, 8]
    assert [v.kind for v in batch.views] == ["global", "global", "local", "local", "local"]
    for v in batch.views:
        x0, y0, x1, y1 = v.box
        assert 0.0 <= x0 < x1 <= 1.0 and 0.0 <= y0 < y1 <= 1.0
        assert v.image.min() >= 0.0 and v.image.max() <= 1.0

    again = generate_views(img, cfg, (0, 1, 2))
    for a, b in zip(batch.views, again.views):
        assert np.array_equal(a.image, b.image)
        assert a.box == b.box and a.flipped == b.flipped

    other = generate_views(img, cfg, (0, 1, 3))
    assert any(a.box != b.box for a, b in zip(batch.views, other.views))
    print("✓ 视图生成")


def test_views_without_photometric():
    """关闭颜色增强、不翻转时，骨干视图等于几何孪生图"""
    cfg = ViewConfig(n_global=2, n_local=1, global_size=16, local_size=8, flip_prob=0.0,
                     jitter=False, blur=False, grayscale=False, solarize=False)
    batch = generate_views(create_test_image(seed=1), cfg, (5,))
    for v in batch.views:
        assert not v.flipped
        assert np.allclose(v.image, v.geometric, atol=1e-6)
    print("✓ 几何孪生图")


def test_view_config():
    """DINO 局部视图裁剪尺度与参数校验"""
    assert ViewConfig.for_dino().crop_scale_local == (0.08, 0.4)
    assert ViewConfig.for_lafs().crop_scale_local == (0.4, 1.0)
    with pytest.raises(ConfigError):
        ViewConfig(crop_scale_global=(0.0, 1.0))
    with pytest.raises(ConfigError):
        ViewConfig(local_size=4)
    print("✓ ViewConfig")


def test_perturb():
    """α=0 为恒等；α>0 时坐标仍在 [0,1]，且按种子确定"""
    lm = create_test_landmarks()
    same = landmark_perturb(lm, PerturbConfig(alpha=0.0), (0,))
    assert np.array_equal(same.coords.numpy(), lm.coords.numpy())

    a = landmark_perturb(lm, PerturbConfig(alpha=2.0), (0, 1))
    b = landmark_perturb(lm, PerturbConfig(alpha=2.0), (0, 1))
    assert np.array_equal(a.coords.numpy(), b.coords.numpy())
    assert not np.array_equal(a.coords.numpy(), lm.coords.numpy())
    assert np.all(a.coords.numpy() >= 0.0) and np.all(a.coords.numpy() <= 1.0)
    # 2 像素标准差在 112 画布上约为 0.018
    assert np.max(np.abs(a.coords.numpy() - lm.coords.numpy())) < 0.2

    with pytest.raises(ParameterError):
        PerturbConfig(alpha=-1.0)
    print("✓ 坐标扰动")


def test_shuffle():
    """打乱保持坐标多重集；恒等排列不改变顺序"""
    lm = create_test_landmarks()
    shuffled = landmark_shuffle(lm, (3,))
    assert _rows(shuffled) == _rows(lm)
    assert sorted(shuffled.indices) == list(range(lm.count))
    for row, idx in zip(shuffled.coords.numpy(), shuffled.indices):
        assert np.array_equal(row, lm.coords.numpy()[idx])

    ident = landmark_shuffle(lm, (3,), permutation=list(range(lm.count)))
    assert np.array_equal(ident.coords.numpy(), lm.coords.numpy())

    with pytest.raises(ParameterError):
        landmark_shuffle(lm, (3,), permutation=[0] * lm.count)
    print("✓ 关键点打乱")


def test_subsample():
    """子采样得到 k 个互不相同的原始下标"""
    lm = create_test_landmarks(n=20)
    sub = subsample_landmarks(lm, 7, (1, 2))
    assert sub.count == 7
    assert len(set(sub.indices)) == 7
    assert all(0 <= i < 20 for i in sub.indices)
    for row, idx in zip(sub.coords.numpy(), sub.indices):
        assert np.array_equal(row, lm.coords.numpy()[idx])

    ordered = subsample_landmarks(lm, 7, (1, 2), sorted_draw=True)
    assert ordered.indices == sorted(sub.indices)
    assert subsample_landmarks(lm, 20, (0,)).count == 20

    for bad in (0, 21):
        with pytest.raises(ParameterError):
            subsample_landmarks(lm, bad, (0,))
    print("✓ 子采样")


def test_perturb_std_monte_carlo():
    """10⁵ 个坐标样本：α=2、画布 112 时扰动标准差为 2/111，误差 5% 以内"""
    n = 50_000
    lm = LandmarkSet(Tensor(np.full((n, 2), 0.5)), canvas=112)
    moved = landmark_perturb(lm, PerturbConfig(alpha=2.0), (11,)).coords.numpy().astype(np.float64)
    delta = (moved - 0.5).reshape(-1)
    assert delta.size == 100_000
    expected = 2.0 / 111.0
    assert abs(delta.std() / expected - 1.0) < 0.05
    assert abs(delta.mean()) < 4 * expected / np.sqrt(delta.size)
    print("✓ 扰动标准差")


def test_subsample_uniform_monte_carlo():
    """R=10、k=3 抽 10⁴ 次：每个下标被选中的频数在 3σ 以内"""
    r, k, draws = 10, 3, 10_000
    lm = create_test_landmarks(n=r)
    counts = np.zeros(r, dtype=np.int64)
    for i in range(draws):
        counts[subsample_landmarks(lm, k, (i,)).indices] += 1
    assert counts.sum() == k * draws
    p = k / r
    sigma = np.sqrt(draws * p * (1 - p))
    assert np.all(np.abs(counts - draws * p) <= 3 * sigma), counts
    print("✓ 子采样均匀性")


def test_augment_gradients():
    """扰动 + 打乱之后梯度仍回到原始坐标"""
    coords = parameter(np.random.default_rng(4).uniform(0.2, 0.8, size=(6, 2)))
    lm = LandmarkSet(coords, canvas=112)
    with Tape() as tape:
        out = apply_landmark_augs(lm, (9,), PerturbConfig(alpha=2.0), shuffle=True)
        loss = out.coords.sum()
    backward(loss, tape)
    assert np.allclose(coords.grad, 1.0)
    print("✓ 增强梯度")


def main():
    print("\n" + "=" * 60)
    print("增强测试")
    print("=" * 60)
    try:
        test_generate_views()
        test_views_without_photometric()
        test_view_config()
        test_perturb()
        test_shuffle()
        test_subsample()
        test_perturb_std_monte_carlo()
        test_subsample_uniform_monte_carlo()
        test_augment_gradients()
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
