import struct

import numpy as np
import pytest

from nlvc.data import (Dataset, DatasetFormatError, LabeledVideo, SyntheticSpec, dataset_from_bytes,
                       dataset_to_bytes, gen_synthetic, load_dataset, save_dataset, synthetic_world)


def small(**kw):
    base = dict(videos=30, classes=6, frames_min=3, frames_max=7, d_visual=5, d_audio=2, seed=1)
    base.update(kw)
    return gen_synthetic(SyntheticSpec(**base))


def same(a: Dataset, b: Dataset):
    assert (a.d_visual, a.d_audio, a.num_classes, len(a)) == (b.d_visual, b.d_audio, b.num_classes, len(b))
    for x, y in zip(a.videos, b.videos):
        assert x.id == y.id and x.labels == y.labels
        np.testing.assert_array_equal(x.visual, y.visual)
        np.testing.assert_array_equal(x.audio, y.audio)


@pytest.mark.parametrize("fmt", ["binary", "jsonl"])
def test_file_round_trip(tmp_path, fmt):
    ds = small()
    path = tmp_path / f"d.{fmt}"
    save_dataset(ds, path, fmt)
    same(ds, load_dataset(path))


def test_binary_header():
    data = dataset_to_bytes(small(videos=2))
    assert data[:4] == b"Y8MF"
    assert struct.unpack("<5I", data[4:24]) == (1, 2, 5, 2, 6)


def test_binary_errors():
    data = dataset_to_bytes(small(videos=3))
    with pytest.raises(DatasetFormatError):
        dataset_from_bytes(b"ABCD" + data[4:])
    with pytest.raises(DatasetFormatError):
        dataset_from_bytes(data[:-3])
    with pytest.raises(DatasetFormatError):
        dataset_from_bytes(data + b"\x00")
    with pytest.raises(DatasetFormatError):
        dataset_from_bytes(data[:4] + struct.pack("<I", 2) + data[8:])


def test_unknown_file(tmp_path):
    p = tmp_path / "x"
    p.write_bytes(b"\xff\xfe\x00garbage")
    with pytest.raises(DatasetFormatError):
        load_dataset(p)


def test_video_validation():
    with pytest.raises(ValueError):
        LabeledVideo("a", np.zeros((3, 2)), np.zeros((2, 1)), [0])
    with pytest.raises(ValueError):
        LabeledVideo("a", np.zeros((0, 2)), np.zeros((0, 1)), [0])
    with pytest.raises(ValueError):
        LabeledVideo("a", np.zeros((2, 2)), np.zeros((2, 1)), [1, 1])
    with pytest.raises(DatasetFormatError):
        Dataset([LabeledVideo("a", np.zeros((2, 2)), np.zeros((2, 1)), [9])], 2, 1, 5)


def test_split():
    ds = small(videos=10)
    tr, te = ds.split(0.2)
    assert len(tr) == 8 and len(te) == 2
    assert [v.id for v in tr.videos + te.videos] == [v.id for v in ds.videos]


def test_generation_is_deterministic_and_seeded():
    same(small(), small())
    assert not np.array_equal(small().videos[0].visual, small(seed=2).videos[0].visual)


def test_generated_ranges():
    ds = small(videos=200, max_labels=3)
    for v in ds.videos:
        assert 3 <= v.num_frames <= 7
        assert 1 <= len(v.labels) <= 3 and list(v.labels) == sorted(v.labels)
        assert v.visual.dtype == np.float32


def test_noise_free_frames_are_prototypes():
    spec = SyntheticSpec(videos=20, classes=4, frames_min=2, frames_max=5, d_visual=3, d_audio=2,
                         noise=0.0, seed=5)
    world = synthetic_world(spec)
    for v in gen_synthetic(spec).videos:
        allowed = world.visual[list(v.labels)].reshape(-1, 3).astype(np.float32)
        for frame in v.visual:
            assert np.any(np.all(allowed == frame, axis=1))


def test_label_frequency_is_uniform():
    ds = gen_synthetic(SyntheticSpec(videos=10000, classes=10, frames_min=1, frames_max=1, d_visual=1,
                                     d_audio=1, seed=0))
    counts = np.bincount([lab for v in ds.videos for lab in v.labels], minlength=10)
    expected = counts.sum() / 10
    # chi-square with 9 dof; 99.9th percentile is 27.9
    assert ((counts - expected) ** 2 / expected).sum() < 27.9


@pytest.mark.parametrize("kw", [dict(videos=0), dict(frames_min=9, frames_max=3), dict(noise=-1.0)])
def test_spec_validation(kw):
    with pytest.raises(ValueError):
        SyntheticSpec(**kw)


def test_same_seed_gives_identical_file(tmp_path):
    save_dataset(small(), tmp_path / "a")
    save_dataset(small(), tmp_path / "b")
    assert (tmp_path / "a").read_bytes() == (tmp_path / "b").read_bytes()


def test_label_frequency_within_five_percent():
    ds = gen_synthetic(SyntheticSpec(videos=10000, classes=10, frames_min=1, frames_max=1, d_visual=1,
                                     d_audio=1, seed=0))
    counts = np.bincount([lab for v in ds.videos for lab in v.labels], minlength=10)
    assert np.all(np.abs(counts / counts.mean() - 1.0) <= 0.05)
