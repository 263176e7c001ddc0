from pathlib import Path

import numpy as np
import pytest
from PIL import Image
from pydantic import ValidationError

from src.autograd.tensor import Tensor
from src.data.dataset import (
    AugmentConfig,
    DatasetIndex,
    Sample,
    affine_transform,
    augment,
    batch_iter,
    export_split_manifest,
    index_dataset,
    load_and_preprocess,
    read_split_manifest,
    resize_bilinear,
    split_validation,
)
from src.data.synthetic import make_synthetic_dataset
from src.error_handling import ConfigError, DataError


@pytest.fixture
def dataset(tmp_path):
    return make_synthetic_dataset(tmp_path / "data", per_class=10, size=12, seed=0)


def test_index_sorted_classes_and_paths(dataset):
    index = index_dataset(dataset)
    assert index.class_names == ["bright", "dark"]
    assert len(index) == 20
    paths = [str(s.path) for s in index.samples]
    assert paths == sorted(paths)
    assert index.class_counts().tolist() == [10, 10]


def test_index_missing_root(tmp_path):
    with pytest.raises(DataError) as exc:
        index_dataset(tmp_path / "nowhere")
    assert "nowhere" in str(exc.value)


def test_index_ignores_unsupported_files_and_warns_on_empty_class(dataset, caplog):
    (dataset / "bright" / "notes.txt").write_text("x", encoding="utf-8")
    (dataset / "empty").mkdir()
    index = index_dataset(dataset)
    assert index.class_names == ["bright", "dark", "empty"]
    assert len(index) == 20
    assert "contains no supported images" in caplog.text


def test_stratified_split_is_deterministic(dataset):
    index = index_dataset(dataset)
    train, val = split_validation(index, 0.1, seed=3)
    assert len(val) == 2 and len(train) == 18
    assert val.class_counts().tolist() == [1, 1]
    again_train, again_val = split_validation(index, 0.1, seed=3)
    assert [s.path for s in val.samples] == [s.path for s in again_val.samples]
    assert not set(s.path for s in train.samples) & set(s.path for s in val.samples)
    assert train.split == "train" and val.split == "val"


def test_split_needs_two_samples_per_class():
    index = DatasetIndex([Sample(Path("a.png"), 0), Sample(Path("b.png"), 1), Sample(Path("c.png"), 1)], ["x", "y"])
    with pytest.raises(DataError):
        split_validation(index, 0.5, seed=0)
    with pytest.raises(ConfigError):
        split_validation(index, 1.5, seed=0)


def test_split_keeps_one_training_sample_per_class():
    samples = [Sample(Path(f"{c}{i}.png"), label) for label, c in enumerate("xy") for i in range(2)]
    train, val = split_validation(DatasetIndex(samples, ["x", "y"]), 0.9, seed=0)
    assert train.class_counts().tolist() == [1, 1] and val.class_counts().tolist() == [1, 1]


def test_split_manifest_roundtrip(dataset, tmp_path):
    train, val = split_validation(index_dataset(dataset), 0.2, seed=0)
    manifest = tmp_path / "split.csv"
    export_split_manifest([train, val], manifest, root=dataset)
    assert manifest.read_text(encoding="utf-8").splitlines()[0] == "path,class,split"
    restored = read_split_manifest(manifest, train.class_names, "val", root=dataset)
    assert [s.path for s in restored.samples] == [s.path for s in val.samples]
    assert [s.label for s in restored.samples] == [s.label for s in val.samples]


def test_read_manifest_rejects_unknown_class(dataset, tmp_path):
    manifest = tmp_path / "split.csv"
    manifest.write_text("path,class,split\nbright/x.png,cat,val\n", encoding="utf-8")
    with pytest.raises(DataError):
        read_split_manifest(manifest, ["bright", "dark"], "val", root=dataset)


def test_load_grayscale_png_replicates_channels(tmp_path):
    pixels = np.arange(16, dtype=np.uint8).reshape(4, 4) * 16
    Image.fromarray(pixels, mode="L").save(tmp_path / "g.png")
    out = load_and_preprocess(tmp_path / "g.png", (4, 4)).data
    assert out.shape == (4, 4, 3)
    np.testing.assert_allclose(out[..., 0], pixels / 255.0)
    np.testing.assert_array_equal(out[..., 0], out[..., 2])


def test_load_16_bit_png(tmp_path):
    pixels = np.array([[0, 65535], [32768, 1000]], dtype=np.uint16)
    Image.fromarray(pixels).save(tmp_path / "deep.png")
    out = load_and_preprocess(tmp_path / "deep.png", (2, 2)).data
    np.testing.assert_allclose(out[..., 1], pixels / 65535.0)


def test_load_rejects_undecodable_and_unsupported(tmp_path):
    (tmp_path / "broken.png").write_bytes(b"not an image")
    with pytest.raises(DataError):
        load_and_preprocess(tmp_path / "broken.png", (4, 4))
    (tmp_path / "image.bmp").write_bytes(b"BM")
    with pytest.raises(DataError):
        load_and_preprocess(tmp_path / "image.bmp", (4, 4))


def test_resize_constant_and_identity():
    rng = np.random.default_rng(0)
    image = rng.uniform(size=(5, 7, 3))
    np.testing.assert_allclose(resize_bilinear(image, 5, 7), image)
    np.testing.assert_allclose(resize_bilinear(np.full((3, 3, 3), 0.4), 8, 5), 0.4)


def bilinear_oracle(image, height, width):
    """Half-pixel centers, clamped to the border, one output pixel at a time."""
    h, w, _ = image.shape
    out = np.zeros((height, width, image.shape[2]))
    for i in range(height):
        sy = min(max((i + 0.5) * h / height - 0.5, 0.0), h - 1)
        y0 = int(np.floor(sy))
        y1, fy = min(y0 + 1, h - 1), sy - y0
        for j in range(width):
            sx = min(max((j + 0.5) * w / width - 0.5, 0.0), w - 1)
            x0 = int(np.floor(sx))
            x1, fx = min(x0 + 1, w - 1), sx - x0
            top = (1 - fx) * image[y0, x0] + fx * image[y0, x1]
            bottom = (1 - fx) * image[y1, x0] + fx * image[y1, x1]
            out[i, j] = (1 - fy) * top + fy * bottom
    return out


def test_checkerboard_downscale_matches_loop_oracle():
    board = (np.indices((8, 12)).sum(axis=0) % 2).astype(np.float64)
    image = np.repeat(board[:, :, None], 3, axis=2)
    resized = resize_bilinear(image, 4, 6)
    np.testing.assert_allclose(resized, bilinear_oracle(image, 4, 6), rtol=0, atol=1e-12)
    np.testing.assert_allclose(resized, 0.5, atol=1e-12)
    np.testing.assert_allclose(resize_bilinear(image, 3, 5), bilinear_oracle(image, 3, 5), rtol=0, atol=1e-12)


def test_affine_identity_and_quarter_turn():
    rng = np.random.default_rng(1)
    image = rng.uniform(size=(6, 6, 3))
    np.testing.assert_allclose(affine_transform(image), image, atol=1e-12)
    np.testing.assert_allclose(affine_transform(image, angle=90.0), np.rot90(image, k=1, axes=(0, 1)), atol=1e-12)
    np.testing.assert_allclose(affine_transform(image, flip=True), image[:, ::-1], atol=1e-12)


def test_affine_shift_fills_with_zero():
    image = np.ones((4, 4, 3))
    shifted = affine_transform(image, shift=(1.0, 0.0))
    np.testing.assert_allclose(shifted[:, 0], 0.0)
    np.testing.assert_allclose(shifted[:, 1:], 1.0)


def test_augment_preserves_shape_and_range():
    rng = np.random.default_rng(2)
    image = Tensor(rng.uniform(size=(10, 10, 3)))
    out = augment(image, AugmentConfig(), np.random.default_rng(5)).data
    assert out.shape == (10, 10, 3)
    assert out.min() >= 0.0 and out.max() <= 1.0


def test_augment_config_validation():
    with pytest.raises(ValidationError):
        AugmentConfig(flip_probability=1.5)
    with pytest.raises(ValidationError):
        AugmentConfig(zoom_range=1.0)


def test_batches_cover_index_and_keep_partial_batch(dataset):
    index = index_dataset(dataset)
    batches = list(batch_iter(index, 8, shuffle_seed=1, size=(12, 12)))
    assert [len(b.labels) for b in batches] == [8, 8, 4]
    seen = sorted(str(p) for b in batches for p in b.paths)
    assert seen == sorted(str(s.path) for s in index.samples)
    assert batches[0].images.shape == (8, 12, 12, 3)


def test_batch_order_is_seeded_per_epoch(dataset):
    index = index_dataset(dataset)
    order = lambda epoch: [str(p) for b in batch_iter(index, 5, 7, (12, 12), epoch) for p in b.paths]
    assert order(0) == order(0)
    assert order(0) != order(1)


def test_augmentation_independent_of_prefetch(dataset):
    index = index_dataset(dataset)
    cfg = AugmentConfig(seed=4)
    eager = [b.images.data for b in batch_iter(index, 6, 2, (12, 12), 3, cfg, prefetch=0)]
    threaded = [b.images.data for b in batch_iter(index, 6, 2, (12, 12), 3, cfg, prefetch=3)]
    for a, b in zip(eager, threaded):
        np.testing.assert_array_equal(a, b)


def test_augmentation_only_on_train_split(dataset):
    _, index = split_validation(index_dataset(dataset), 0.5, seed=0)
    plain = [b.images.data for b in batch_iter(index, 20, None, (12, 12))]
    augmented = [b.images.data for b in batch_iter(index, 20, None, (12, 12), augment_cfg=AugmentConfig())]
    np.testing.assert_array_equal(plain[0], augmented[0])


def test_undecodable_sample_skipped_or_raised(dataset):
    (dataset / "dark" / "zz_broken.png").write_bytes(b"garbage")
    index = index_dataset(dataset)
    with pytest.raises(DataError):
        list(batch_iter(index, 32, None, (12, 12)))
    batches = list(batch_iter(index, 32, None, (12, 12), skip_errors=True))
    assert sum(len(b.labels) for b in batches) == 20


def test_empty_index_rejected():
    with pytest.raises(DataError):
        list(batch_iter(DatasetIndex([], ["a", "b"]), 4, None, (4, 4)))
