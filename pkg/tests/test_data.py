import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from protostream.data import (
    FeatureBatch,
    batch_iter,
    l2_normalize,
    load_manifest,
    read_feature_header,
    read_features,
    read_features_unlabeled,
    synth_stream,
    write_features,
)
from protostream.errors import (
    BadMagicError,
    FormatError,
    GenerationError,
    TruncatedFileError,
    ValidationError,
    VersionMismatchError,
)

from oracles import nearest_mean_labels, two_means


def test_round_trip_small(tmp_path):
    x = np.array([[1, 0, 0], [0, 1, 0]], dtype=np.float32)
    path = tmp_path / "f.ucfv"
    write_features(x, path)
    assert path.stat().st_size == 20 + 24
    back, labels = read_features(path)
    assert labels is None
    np.testing.assert_array_equal(back, x)


def test_round_trip_seeded_unit_rows_with_labels(tmp_path):
    rng = np.random.default_rng(42)
    x = rng.standard_normal((100, 768))
    x = (x / np.linalg.norm(x, axis=1, keepdims=True)).astype(np.float32)
    labels = rng.integers(0, 25, size=100)
    path = tmp_path / "f.ucfv"
    write_features(x, path, labels=labels)
    back, back_labels = read_features(path)
    assert back.tobytes() == x.tobytes()  # bit-exact
    np.testing.assert_array_equal(back_labels, labels)


def test_write_rejects_empty_and_nonfinite(tmp_path):
    with pytest.raises(ValidationError):
        write_features(np.zeros((0, 4), dtype=np.float32), tmp_path / "e.ucfv")
    bad = np.ones((2, 2), dtype=np.float32)
    bad[0, 0] = np.nan
    with pytest.raises(ValidationError):
        write_features(bad, tmp_path / "n.ucfv")


def test_write_normalizes_off_unit_rows(tmp_path):
    x = np.array([[3.0, 0.0], [0.0, 2.0]], dtype=np.float32)
    path = tmp_path / "f.ucfv"
    write_features(x, path)
    back, _ = read_features(path)
    np.testing.assert_allclose(np.linalg.norm(back, axis=1), 1.0, atol=1e-6)


def test_label_length_mismatch(tmp_path):
    with pytest.raises(ValidationError):
        write_features(np.eye(3, dtype=np.float32), tmp_path / "f.ucfv", labels=[0, 1])


def test_corrupted_magic(tmp_path):
    path = tmp_path / "f.ucfv"
    write_features(np.eye(3, dtype=np.float32), path)
    raw = bytearray(path.read_bytes())
    raw[:4] = b"XXXX"
    path.write_bytes(bytes(raw))
    with pytest.raises(BadMagicError, match="XXXX"):
        read_features(path)


def test_version_mismatch(tmp_path):
    path = tmp_path / "f.ucfv"
    write_features(np.eye(3, dtype=np.float32), path)
    raw = bytearray(path.read_bytes())
    raw[4] = 99
    path.write_bytes(bytes(raw))
    with pytest.raises(VersionMismatchError):
        read_features(path)


def test_truncated_payload(tmp_path):
    path = tmp_path / "f.ucfv"
    write_features(np.eye(3, dtype=np.float32), path)
    raw = path.read_bytes()
    path.write_bytes(raw[:-1])  # n*d*4 payload minus one byte
    with pytest.raises(TruncatedFileError):
        read_features(path)


def test_trailing_bytes_rejected(tmp_path):
    path = tmp_path / "f.ucfv"
    write_features(np.eye(3, dtype=np.float32), path)
    path.write_bytes(path.read_bytes() + b"\x00")
    with pytest.raises(FormatError):
        read_features(path)


def test_header_inspection(tmp_path):
    path = tmp_path / "f.ucfv"
    write_features(np.eye(4, dtype=np.float32), path, labels=[0, 1, 2, 3])
    header = read_feature_header(path)
    assert header == {"count": 4, "dim": 4, "normalized": True, "has_labels": True}


def test_unlabeled_access_drops_labels(tmp_path):
    path = tmp_path / "f.ucfv"
    write_features(np.eye(3, dtype=np.float32), path, labels=[0, 1, 2])
    z = read_features_unlabeled(path)
    assert isinstance(z, np.ndarray) and z.shape == (3, 3)


def test_batch_partition_sizes():
    z = np.eye(10, dtype=np.float32)
    batches = list(batch_iter(z, 4, seed=0, epoch=0))
    assert [b.z.shape[0] for b in batches] == [4, 4, 2]


@settings(max_examples=40, deadline=None)
@given(n=st.integers(1, 64), b=st.integers(1, 70), seed=st.integers(0, 10), epoch=st.integers(0, 3))
def test_batch_partition_property(n, b, seed, epoch):
    z = np.arange(n, dtype=np.float32).reshape(n, 1) + 1.0
    seen = np.concatenate([batch.z[:, 0] for batch in batch_iter(z, b, seed, epoch)])
    assert sorted(seen.tolist()) == (np.arange(n) + 1.0).tolist()


def test_batch_iter_deterministic_and_epoch_varies():
    z = np.random.default_rng(0).standard_normal((32, 3)).astype(np.float32)
    a = np.vstack([b.z for b in batch_iter(z, 8, seed=5, epoch=0)])
    b_ = np.vstack([b.z for b in batch_iter(z, 8, seed=5, epoch=0)])
    np.testing.assert_array_equal(a, b_)
    differs = 0
    for seed in range(50):
        e0 = np.vstack([b.z for b in batch_iter(z, 8, seed=seed, epoch=0)])
        e1 = np.vstack([b.z for b in batch_iter(z, 8, seed=seed, epoch=1)])
        differs += int(not np.array_equal(e0, e1))
    assert differs >= 49


def test_batch_size_larger_than_n():
    z = np.eye(3, dtype=np.float32)
    batches = list(batch_iter(z, 100, seed=0, epoch=0))
    assert len(batches) == 1 and batches[0].z.shape[0] == 3


def test_batch_rejects_bad_size():
    with pytest.raises(ValidationError):
        list(batch_iter(np.eye(3, dtype=np.float32), 0, seed=0, epoch=0))


def test_feature_batch_rejects_empty():
    with pytest.raises(ValidationError):
        FeatureBatch(z=np.zeros((0, 3)))


def test_synth_two_tight_clusters_recoverable(tmp_path):
    result = synth_stream(
        tmp_path, tasks=1, classes_per_task=2, dim=8,
        train_per_class=50, test_per_class=10, spread=0.01, seed=3,
    )
    z, labels = read_features(result.manifest.train_path(0))
    pred = two_means(z.astype(np.float64))
    agree = max(np.mean(pred == labels), np.mean(1 - pred == labels))
    assert agree == 1.0


def test_synth_deterministic(tmp_path):
    kw = dict(tasks=2, classes_per_task=3, dim=16, train_per_class=10,
              test_per_class=5, spread=0.05, seed=11)
    synth_stream(tmp_path / "a", **kw)
    synth_stream(tmp_path / "b", **kw)
    for name in ["task0_train.ucfv", "task1_test.ucfv", "manifest.json"]:
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_synth_global_labels(tmp_path):
    result = synth_stream(
        tmp_path, tasks=5, classes_per_task=5, dim=128,
        train_per_class=4, test_per_class=2, spread=0.03, seed=0,
    )
    seen = []
    for t in range(5):
        _, labels = read_features(result.manifest.train_path(t))
        seen.extend(np.unique(labels).tolist())
    assert seen == list(range(25))


def test_synth_separability_invariant(tmp_path):
    result = synth_stream(
        tmp_path, tasks=1, classes_per_task=8, dim=32,
        train_per_class=5, test_per_class=40, spread=0.05, seed=21,
    )
    z, labels = read_features(result.manifest.test_path(0))
    pred = nearest_mean_labels(z.astype(np.float64), result.class_means)
    assert np.mean(pred == labels) >= 0.999


def test_synth_rejects_bad_params(tmp_path):
    with pytest.raises(ValidationError):
        synth_stream(tmp_path, tasks=0, classes_per_task=2, dim=8,
                     train_per_class=5, test_per_class=5, spread=0.1, seed=0)
    with pytest.raises(ValidationError):
        synth_stream(tmp_path, tasks=1, classes_per_task=2, dim=8,
                     train_per_class=5, test_per_class=5, spread=0.0, seed=0)


def test_synth_infeasible_means(tmp_path):
    with pytest.raises(GenerationError, match="dim"):
        synth_stream(tmp_path, tasks=1, classes_per_task=100, dim=2,
                     train_per_class=2, test_per_class=2, spread=0.1, seed=0)


def test_manifest_round_trip(tmp_path):
    result = synth_stream(
        tmp_path, tasks=2, classes_per_task=2, dim=8,
        train_per_class=3, test_per_class=3, spread=0.1, seed=5,
    )
    manifest = load_manifest(result.manifest_path)
    assert manifest.dim == 8
    assert [t.cnum for t in manifest.tasks] == [2, 2]
    manifest.validate()


def test_manifest_unknown_keys(tmp_path):
    path = tmp_path / "m.json"
    path.write_text('{"dim": 4, "tasks": [], "typo": 1}')
    with pytest.raises(ValidationError, match="typo"):
        load_manifest(path)


def test_l2_normalize_zero_row():
    with pytest.raises(ValidationError):
        l2_normalize(np.zeros((1, 4)))
