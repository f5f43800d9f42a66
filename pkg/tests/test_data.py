import numpy as np
import pytest

from gradinv.data import (DatasetSpec, StyleTransform, apply_style,
                          load_dataset, load_image, save_images)


def test_builtin_load_contract():
    store = load_dataset(DatasetSpec(size=50))
    assert store.images.shape == (50, 3, 32, 32)
    assert store.images.dtype == np.float32
    assert store.images.min() >= 0.0 and store.images.max() <= 1.0
    assert store.labels.shape == (50,)
    assert set(store.labels) == set(range(10))


def test_builtin_load_is_deterministic():
    a = load_dataset(DatasetSpec(size=40))
    b = load_dataset(DatasetSpec(size=40))
    assert a.digest() == b.digest()


def test_prefix_stability_across_sizes():
    """Growing the dataset must not change the earlier samples."""
    small = load_dataset(DatasetSpec(size=20))
    big = load_dataset(DatasetSpec(size=60))
    assert np.array_equal(small.images, big.images[:20])


def test_splits_are_disjoint():
    train = load_dataset(DatasetSpec(size=100, split="gan-train"))
    eval_ = load_dataset(DatasetSpec(size=100, split="fl-eval"))
    assert not set(train.ids) & set(eval_.ids)
    assert train.digest() != eval_.digest()


def test_unknown_split_raises():
    with pytest.raises(ValueError):
        load_dataset(DatasetSpec(split="test"))


def test_missing_folder_raises():
    with pytest.raises(FileNotFoundError):
        load_dataset(DatasetSpec(source="/no/such/dir"))


def test_folder_loading_roundtrip(tmp_path):
    store = load_dataset(DatasetSpec(size=20))
    for cls in range(4):
        idx = [i for i in range(20) if store.labels[i] == cls][:2]
        save_images(store.images[idx], str(tmp_path / f"class{cls}"), "img")
    loaded = load_dataset(DatasetSpec(source=str(tmp_path)))
    assert loaded.images.shape == (8, 3, 32, 32)
    assert list(loaded.labels) == [0, 0, 1, 1, 2, 2, 3, 3]


# ---------------------------------------------------------------------------
# Style transforms


@pytest.fixture()
def images():
    return load_dataset(DatasetSpec(size=10)).images


def test_identity_style_is_noop(images):
    out = apply_style(images, StyleTransform("identity"))
    assert np.array_equal(out, images)
    assert out is not images


def test_invert_is_an_involution(images):
    t = StyleTransform("invert")
    out = apply_style(apply_style(images, t), t)
    assert np.allclose(out, images, atol=1e-6)


def test_posterize_quantizes_to_levels(images):
    out = apply_style(images, StyleTransform("posterize", levels=4))
    legal = np.array([0.0, 1 / 3, 2 / 3, 1.0])
    assert np.all(np.min(np.abs(out[..., None] - legal), axis=-1) < 1e-6)


def test_hue_rotate_full_circle_is_identity(images):
    out = apply_style(images, StyleTransform("hue-rotate", degrees=360.0))
    assert np.allclose(out, images, atol=1e-5)


def test_edge_sketch_is_grayscale(images):
    out = apply_style(images, StyleTransform("edge-sketch"))
    assert out.shape == images.shape
    assert np.array_equal(out[:, 0], out[:, 1])
    assert out.min() >= 0.0 and out.max() <= 1.0


def test_styles_stay_in_range_and_keep_shape(images):
    for variant in ("invert", "posterize", "hue-rotate", "edge-sketch"):
        out = apply_style(images, StyleTransform(variant))
        assert out.shape == images.shape
        assert out.min() >= 0.0 and out.max() <= 1.0 + 1e-6


def test_unknown_style_raises(images):
    with pytest.raises(ValueError):
        apply_style(images, StyleTransform("sepia"))


# ---------------------------------------------------------------------------
# PNG serialization


def test_save_load_roundtrip_8bit(tmp_path, images):
    paths = save_images(images[:3], str(tmp_path), "recon")
    assert [p.split("/")[-1] for p in paths] == \
        ["recon_000.png", "recon_001.png", "recon_002.png"]
    for i, path in enumerate(paths):
        back = load_image(path)
        assert back.shape == (3, 32, 32)
        assert np.abs(back - images[i]).max() <= 0.5 / 255 + 1e-6


def test_save_images_single_image(tmp_path, images):
    paths = save_images(images[0], str(tmp_path), "x")
    assert len(paths) == 1
    assert load_image(paths[0]).shape == (3, 32, 32)
