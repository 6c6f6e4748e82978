import gzip
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fairaudit.dataio import (
    Dataset,
    SplitPlan,
    load_csv,
    load_dataset,
    load_idx,
    make_split,
    save_dataset,
    subsample_per_class,
    synth_blobs,
    write_idx,
)
from fairaudit.errors import ConfigError, ConsistencyError, DataError, FormatError
from fairaudit.model import Arch, ModelSpec, batch_predict
from fairaudit.train import TrainConfig, train


@pytest.fixture
def idx_pair(tmp_path):
    rng = np.random.default_rng(0)
    images = rng.integers(0, 256, size=(4, 28, 28), dtype=np.uint8)
    images[0, 0, 0], images[0, 0, 1] = 255, 0
    img, lab = tmp_path / "img.idx", tmp_path / "lab.idx"
    write_idx(img, lab, images, [0, 1, 2, 3])
    return img, lab, images


def test_load_idx_decodes_four_images(idx_pair):
    img, lab, images = idx_pair
    ds = load_idx(img, lab)
    assert (ds.n, ds.d) == (4, 784)
    assert ds.num_classes == ds.num_groups == 10
    assert ds.feature_shape == (1, 28, 28)
    assert ds.labels.tolist() == [0, 1, 2, 3]
    assert np.array_equal(ds.groups, ds.labels)
    assert ds.features[0, 0] == 1.0 and ds.features[0, 1] == 0.0
    assert np.array_equal(ds.features, images.reshape(4, -1) / 255.0)


def test_load_idx_reads_gzip(idx_pair, tmp_path):
    img, lab, _ = idx_pair
    gz = tmp_path / "img.gz"
    gz.write_bytes(gzip.compress(img.read_bytes()))
    assert np.array_equal(load_idx(gz, lab).features, load_idx(img, lab).features)


def test_load_idx_truncated_image_file(idx_pair, tmp_path):
    img, lab, _ = idx_pair
    short = tmp_path / "short.idx"
    short.write_bytes(img.read_bytes()[:-10])
    with pytest.raises(FormatError):
        load_idx(short, lab)


def test_load_idx_bad_magic(idx_pair, tmp_path):
    img, lab, _ = idx_pair
    bad = tmp_path / "bad.idx"
    raw = bytearray(img.read_bytes())
    raw[3] = 0x01
    bad.write_bytes(bytes(raw))
    with pytest.raises(FormatError):
        load_idx(bad, lab)


def test_load_idx_count_mismatch(idx_pair, tmp_path):
    img, _, _ = idx_pair
    lab = tmp_path / "lab3.idx"
    lab.write_bytes(struct.pack(">II", 0x801, 3) + bytes([0, 1, 2]))
    with pytest.raises(ConsistencyError):
        load_idx(img, lab)


def _write(tmp_path, text):
    p = tmp_path / "data.csv"
    p.write_text(text)
    return p


def test_load_csv_small_binary(tmp_path):
    p = _write(tmp_path, "age,color,y,sex\n30,red,1,M\n40,blue,0,F\n50,red,1,M\n")
    ds = load_csv(p, "y", "sex")
    assert ds.n == 3 and ds.num_groups == 2 and ds.num_classes == 2
    assert ds.labels.tolist() == [1, 0, 1]
    assert ds.metadata["columns"] == ["age", "color=red", "color=blue"]
    np.testing.assert_allclose(ds.features[:, 0].mean(), 0.0, atol=1e-15)
    np.testing.assert_allclose(ds.features[:, 0].std(), 1.0)
    assert ds.features[:, 1:].tolist() == [[1, 0], [0, 1], [1, 0]]


def test_load_csv_constant_column_is_zero(tmp_path):
    p = _write(tmp_path, "c,y,g\n5,0,a\n5,1,b\n5,0,a\n")
    assert load_csv(p, "y", "g").features[:, 0].tolist() == [0.0, 0.0, 0.0]


def test_load_csv_group_first_appearance(tmp_path):
    p = _write(tmp_path, "x,y,g\n1,0,B\n2,1,A\n3,0,C\n4,1,A\n")
    ds = load_csv(p, "y", "g")
    assert ds.groups.tolist() == [0, 1, 2, 1]
    assert ds.metadata["group_values"] == ["B", "A", "C"]


def test_load_csv_missing_column(tmp_path):
    p = _write(tmp_path, "x,y\n1,0\n2,1\n")
    with pytest.raises(ConfigError):
        load_csv(p, "y", "g")


def test_load_csv_bad_cell_names_row(tmp_path):
    p = _write(tmp_path, "x,y,g\n1,0,a\n2,1,b\noops,0,a\n")
    with pytest.raises(FormatError, match="row 2"):
        load_csv(p, "y", "g")


def test_blobs_separable_lr_reaches_full_train_accuracy():
    ds = synth_blobs(50, 2, 4, separation=10.0, label_noise=0.0, seed=3)
    spec = ModelSpec(Arch.LR, (4,), 2)
    art = train(ds, np.arange(ds.n), spec, TrainConfig("SGD", epochs=20, batch_size=20, seed=1))
    assert (batch_predict(art.final_params, ds.features) == ds.labels).mean() == 1.0


def test_blobs_deterministic_and_label_noise():
    a = synth_blobs(30, 2, 3, 2.0, 0.0, seed=9)
    b = synth_blobs(30, 2, 3, 2.0, 0.0, seed=9)
    flipped = synth_blobs(30, 2, 3, 2.0, 1.0, seed=9)
    assert a.features.tobytes() == b.features.tobytes()
    assert a.features.tobytes() == flipped.features.tobytes()
    assert np.array_equal(flipped.labels, 1 - a.labels)


def test_blobs_rejects_single_group():
    with pytest.raises(ConfigError):
        synth_blobs(10, 1, 3, 1.0)


def test_blobs_scale_step_grows_norms():
    ds = synth_blobs(200, 3, 5, 0.0, 0.0, seed=0, scale_step=1.0)
    norms = [np.linalg.norm(ds.features[ds.groups == k], axis=1).mean() for k in range(3)]
    assert norms[0] < norms[1] < norms[2]


def _mnist_like(per_class, classes=10):
    labels = np.repeat(np.arange(classes), per_class)
    feats = np.random.default_rng(0).random((labels.size, 4))
    return Dataset(feats, labels, labels, classes, classes, "fake", (4,))


def test_subsample_per_class_counts():
    ds = _mnist_like(200)
    sub = subsample_per_class(ds, 60, seed=1)
    assert sub.n == 600
    assert np.bincount(sub.labels).tolist() == [60] * 10
    assert np.unique(sub.groups).size == sub.num_groups


def test_subsample_full_class_is_permutation():
    ds = _mnist_like(7)
    sub = subsample_per_class(ds, 7, seed=2)
    assert sorted(map(tuple, sub.features)) == sorted(map(tuple, ds.features))


def test_subsample_insufficient_names_class():
    ds = _mnist_like(5)
    with pytest.raises(DataError, match="class 0"):
        subsample_per_class(ds, 6, seed=0)


def test_subsample_deterministic():
    ds = _mnist_like(20)
    a, b = subsample_per_class(ds, 10, 4), subsample_per_class(ds, 10, 4)
    assert np.array_equal(a.features, b.features) and np.array_equal(a.labels, b.labels)


def test_split_plan_contract():
    ds = _mnist_like(10)
    sp = make_split(ds, 0.2, seed=0, audit_size=30)
    assert np.intersect1d(sp.train_indices, sp.test_indices).size == 0
    assert sp.m == 30 and np.isin(sp.audit_indices, sp.train_indices).all()
    assert make_split(ds, 0.2, seed=0).m == sp.train_indices.size
    with pytest.raises(ConsistencyError):
        SplitPlan([0, 1], [1, 2], [0])
    with pytest.raises(ConsistencyError):
        SplitPlan([0, 1], [2], [3])


def test_dataset_invariants():
    with pytest.raises(ConsistencyError):
        Dataset(np.zeros((3, 2)), [0, 1], [0, 1, 0], 2, 2)
    with pytest.raises(ConsistencyError):
        Dataset(np.zeros((2, 2)), [0, 2], [0, 1], 2, 2)
    with pytest.raises(ConsistencyError):
        Dataset(np.array([[0.0, np.nan], [1, 1]]), [0, 1], [0, 1], 2, 2)


@settings(max_examples=25, deadline=None)
@given(
    n=st.integers(1, 30),
    d=st.integers(1, 6),
    seed=st.integers(0, 2**32 - 1),
)
def test_container_round_trip_bit_identical(tmp_path_factory, n, d, seed):
    rng = np.random.default_rng(seed)
    ds = Dataset(
        rng.standard_normal((n, d)) * 10.0 ** rng.integers(-150, 150, size=(n, d)),
        rng.integers(0, 3, n),
        rng.integers(0, 4, n),
        3,
        4,
        "rt",
        (d,),
    )
    prefix = tmp_path_factory.mktemp("c") / "ds"
    save_dataset(ds, prefix)
    back = load_dataset(prefix)
    assert back.features.tobytes() == ds.features.tobytes()
    assert np.array_equal(back.labels, ds.labels) and np.array_equal(back.groups, ds.groups)
    assert (back.num_classes, back.num_groups, back.feature_shape) == (3, 4, (d,))
