from collections import Counter

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from PIL import Image

from lesionforge import CLASS_NAMES
from lesionforge.data import (AugmentSpec, Dataset, Sample, augment_image, balance_by_oversampling,
                              compute_norm_stats, load_dataset, nearest_neighbor_accuracy, normalize,
                              parse_label, prep_dataset, resize_bilinear, save_dataset, stratified_split,
                              synth_generate)
from lesionforge.errors import ContractError, DataIOError, FormatError, SchemaError, SplitError
from lesionforge.tensor import save_tensor


def _write_manifest(tmp_path, rows, shape=(3, 4, 4)):
    lines = ["id,file,label"]
    for sid, label in rows:
        save_tensor(tmp_path / f"{sid}.ltd", np.full(shape, 0.5, np.float32))
        lines.append(f"{sid},{sid}.ltd,{label}")
    (tmp_path / "m.csv").write_text("\n".join(lines) + "\n")
    return tmp_path / "m.csv"


def _tiny(counts, shape=(1, 2, 2), seed=0):
    r = np.random.default_rng(seed)
    samples = [Sample(f"s{k}_{i}", r.uniform(size=shape).astype(np.float32), k)
               for k, n in enumerate(counts) for i in range(n)]
    return Dataset(samples, CLASS_NAMES[: len(counts)])


# ---------------------------------------------------------------- loading

def test_empty_manifest(tmp_path):
    (tmp_path / "m.csv").write_text("id,file,label\n")
    assert len(load_dataset(tmp_path / "m.csv")) == 0


def test_manifest_histogram(tmp_path):
    ds = load_dataset(_write_manifest(tmp_path, [("a", "nv"), ("b", "mel"), ("c", "nv")]))
    assert ds.histogram() == {"mel": 1, "nv": 2}
    assert ds.ids == ["a", "b", "c"]


def test_manifest_integer_labels(tmp_path):
    ds = load_dataset(_write_manifest(tmp_path, [("a", "6"), ("b", "0")]))
    assert ds.labels.tolist() == [6, 0]


def test_missing_file_names_sample(tmp_path):
    m = _write_manifest(tmp_path, [("a", "nv")])
    m.write_text(m.read_text() + "ghost,ghost.ltd,bcc\n")
    with pytest.raises(DataIOError, match="ghost"):
        load_dataset(m)


def test_unknown_label(tmp_path):
    with pytest.raises(SchemaError):
        load_dataset(_write_manifest(tmp_path, [("a", "melanoma")]))


def test_shape_mismatch(tmp_path):
    m = _write_manifest(tmp_path, [("a", "nv")])
    save_tensor(tmp_path / "b.ltd", np.zeros((3, 5, 5), np.float32))
    m.write_text(m.read_text() + "b,b.ltd,nv\n")
    with pytest.raises(FormatError):
        load_dataset(m)


def test_bad_header(tmp_path):
    (tmp_path / "m.csv").write_text("name,path,label\n")
    with pytest.raises(SchemaError):
        load_dataset(tmp_path / "m.csv")


def test_class_table_order():
    assert CLASS_NAMES == ("akiec", "bcc", "bkl", "df", "mel", "nv", "vasc")
    assert parse_label("vasc") == 6 and parse_label("0") == 0


def test_save_load_round_trip(tmp_path):
    ds = synth_generate(2, (8, 8), seed=1)
    back = load_dataset(save_dataset(ds, tmp_path))
    assert back.ids == ds.ids and back.labels.tolist() == ds.labels.tolist()
    np.testing.assert_array_equal(back.images(), ds.images())


def test_prep_raster_divides_by_255(tmp_path):
    px = np.zeros((4, 6, 3), np.uint8)
    px[..., 0] = 255
    px[0, 0] = (51, 102, 204)
    Image.fromarray(px).save(tmp_path / "a.png")
    (tmp_path / "m.csv").write_text("id,file,label\na,a.png,bkl\n")
    ds = prep_dataset(tmp_path / "m.csv", None, (4, 6))
    img = ds.samples[0].image
    assert img.shape == (3, 4, 6)
    np.testing.assert_allclose(img[:, 0, 0], [0.2, 0.4, 0.8], atol=1e-7)
    assert img[0, 1, 1] == 1.0
    assert prep_dataset(tmp_path / "m.csv", None, (8, 8)).samples[0].image.shape == (3, 8, 8)


# ---------------------------------------------------------------- resize

def test_resize_identity(rng):
    img = rng.uniform(size=(3, 5, 7)).astype(np.float32)
    np.testing.assert_array_equal(resize_bilinear(img, (5, 7)), img)


def test_resize_source_to_model_shape():
    assert resize_bilinear(np.zeros((3, 128, 128), np.float32), (224, 224)).shape == (3, 224, 224)


def test_resize_half_pixel_centers():
    img = np.array([[[0.0, 1.0]]], np.float32)
    np.testing.assert_allclose(resize_bilinear(img, (1, 4))[0, 0], [0.0, 0.25, 0.75, 1.0])


def test_resize_zero_target():
    with pytest.raises(ContractError):
        resize_bilinear(np.zeros((1, 2, 2)), (0, 3))


@given(c=st.floats(0, 1, width=32), h=st.integers(1, 9), w=st.integers(1, 9),
       th=st.integers(1, 12), tw=st.integers(1, 12))
def test_resize_constant_exact(c, h, w, th, tw):
    out = resize_bilinear(np.full((2, h, w), c, np.float32), (th, tw))
    assert (out == np.float32(c)).all()


@given(seed=st.integers(0, 2**16), th=st.integers(1, 12), tw=st.integers(1, 12))
def test_resize_within_input_range(seed, th, tw):
    img = np.random.default_rng(seed).uniform(-2, 3, (2, 5, 6)).astype(np.float32)
    out = resize_bilinear(img, (th, tw))
    assert out.min() >= img.min() and out.max() <= img.max()


# ---------------------------------------------------------------- normalize

def test_normalize_two_samples():
    ds = Dataset([Sample("a", np.zeros((1, 1, 1), np.float32), 0), Sample("b", np.ones((1, 1, 1), np.float32), 0)])
    out = normalize(ds)
    assert out.norm_stats.mean == (0.5,) and out.norm_stats.std == (0.5,)
    assert out.images().ravel().tolist() == [-1.0, 1.0]


def test_normalize_standardizes():
    out = normalize(synth_generate(5, (8, 8), seed=2))
    x = out.images().astype(np.float64)
    assert np.abs(x.mean(axis=(0, 2, 3))).max() < 1e-4
    assert np.abs(x.std(axis=(0, 2, 3)) - 1).max() < 1e-3


def test_normalize_constant_channel(caplog):
    ds = Dataset([Sample(str(i), np.full((1, 2, 2), 0.3, np.float32), 0) for i in range(3)])
    out = normalize(ds)
    assert not out.images().any()
    assert "zero std" in caplog.text


def test_test_split_uses_train_stats():
    train, test = stratified_split(synth_generate(6, (8, 8), seed=3), 0.5, seed=0)
    ntrain = normalize(train)
    ntest = normalize(test, ntrain.norm_stats)
    assert ntest.norm_stats == ntrain.norm_stats
    assert ntest.norm_stats != compute_norm_stats(test)


def test_normalize_empty():
    with pytest.raises(ContractError):
        normalize(Dataset([]))


# ---------------------------------------------------------------- balancing

def test_balance_counts():
    ds = _tiny([10, 3])
    out = balance_by_oversampling(ds, AugmentSpec(seed=1))
    assert out.class_counts().tolist() == [10, 10]
    assert sum(s.id.startswith("s1_") and "#aug" in s.id for s in out.samples) == 7
    assert out.provenance == "balanced"
    assert out.samples[: len(ds)] == ds.samples


def test_balance_fixed_point():
    ds = _tiny([4, 4])
    assert balance_by_oversampling(ds, AugmentSpec()) is ds


def test_balance_deterministic():
    ds = _tiny([6, 2, 1], shape=(3, 8, 8))
    a = balance_by_oversampling(ds, AugmentSpec(seed=5))
    b = balance_by_oversampling(ds, AugmentSpec(seed=5))
    assert [s.checksum() for s in a.samples] == [s.checksum() for s in b.samples]
    assert a.digest() != balance_by_oversampling(ds, AugmentSpec(seed=6)).digest()


def test_balance_preserves_labels_and_originals():
    ds = _tiny([5, 2, 3], shape=(3, 8, 8))
    out = balance_by_oversampling(ds, AugmentSpec(seed=0))
    orig = Counter(s.checksum() for s in ds.samples)
    assert not orig - Counter(s.checksum() for s in out.samples)
    for s in out.samples:
        assert s.id.startswith(f"s{s.label}_")


def test_balance_empty_class():
    with pytest.raises(ContractError):
        balance_by_oversampling(_tiny([3, 0, 2]), AugmentSpec())


def test_augment_spec_validation():
    with pytest.raises(ContractError):
        AugmentSpec(hflip_p=1.5)


def test_augment_identity_when_disabled(rng):
    img = rng.uniform(size=(3, 8, 8)).astype(np.float32)
    spec = AugmentSpec(0.0, 0.0, 0.0, 0.0)
    np.testing.assert_array_equal(augment_image(img, spec, rng), img)
    flipped = augment_image(img, AugmentSpec(1.0, 0.0, 0.0, 0.0), rng)
    np.testing.assert_array_equal(flipped, img[:, :, ::-1])


# ---------------------------------------------------------------- splits

def test_split_counts():
    train, test = stratified_split(_tiny([10, 20]), 0.2, seed=0)
    assert test.class_counts().tolist() == [2, 4]
    assert train.class_counts().tolist() == [8, 16]


@given(counts=st.lists(st.integers(2, 15), min_size=1, max_size=7), frac=st.floats(0.05, 0.95),
       seed=st.integers(0, 100))
def test_split_is_partition(counts, frac, seed):
    ds = _tiny(counts)
    train, test = stratified_split(ds, frac, seed)
    assert sorted(train.ids + test.ids) == sorted(ds.ids)
    assert not set(train.ids) & set(test.ids)
    again = stratified_split(ds, frac, seed)
    assert again[1].ids == test.ids


def test_split_round_half_up():
    # 0.25 * 2 = 0.5 rounds up to one test sample
    _, test = stratified_split(_tiny([2]), 0.25, seed=0)
    assert len(test) == 1


def test_split_errors():
    with pytest.raises(ContractError):
        stratified_split(_tiny([4]), 1.0)
    with pytest.raises(SplitError):
        stratified_split(_tiny([4, 1]), 0.2)


# ---------------------------------------------------------------- synthetic data

def test_synth_size_and_histogram():
    ds = synth_generate(10, (16, 16), seed=0)
    assert len(ds) == 70 and ds.class_counts().tolist() == [10] * 7
    assert ds.provenance == "synthetic"
    x = ds.images()
    assert x.shape == (70, 3, 16, 16) and x.min() >= 0 and x.max() <= 1


def test_synth_deterministic():
    assert synth_generate(3, (8, 8), seed=4).digest() == synth_generate(3, (8, 8), seed=4).digest()
    assert synth_generate(3, (8, 8), seed=4).digest() != synth_generate(3, (8, 8), seed=5).digest()


def test_synth_preconditions():
    with pytest.raises(ContractError):
        synth_generate(0)
    with pytest.raises(ContractError):
        synth_generate(2, (4, 8))


def test_synth_one_nn_separable():
    train, test = stratified_split(synth_generate(50, (32, 32), seed=0), 0.5, seed=0)
    assert nearest_neighbor_accuracy(train, test) >= 0.9
