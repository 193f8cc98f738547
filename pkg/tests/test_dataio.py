import hashlib
from pathlib import Path

import numpy as np
import pytest

from landuq.dataio import read_image, read_split, write_image, write_split
from landuq.errors import DataError
from landuq.synth import DEFAULT_STRUCTURES, make_dataset, make_ood_set


def tree_digest(root: Path) -> str:
    h = hashlib.sha256()
    for p in sorted(root.rglob("*")):
        if p.is_file():
            h.update(p.name.encode())
            h.update(p.read_bytes())
    return h.hexdigest()


def test_image_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    img = rng.uniform(size=(16, 24)).astype(np.float32)
    write_image(tmp_path / "a.img", img)
    back = read_image(tmp_path / "a.img")
    assert np.array_equal(back, img)
    assert (tmp_path / "a.img").stat().st_size == 16 + 4 * 16 * 24


def test_image_bad_magic(tmp_path):
    (tmp_path / "bad.img").write_bytes(b"NOPE" + b"\0" * 28)
    with pytest.raises(DataError):
        read_image(tmp_path / "bad.img")


def test_image_truncated(tmp_path):
    rng = np.random.default_rng(0)
    write_image(tmp_path / "a.img", rng.uniform(size=(8, 8)).astype(np.float32))
    raw = (tmp_path / "a.img").read_bytes()
    (tmp_path / "a.img").write_bytes(raw[:-4])
    with pytest.raises(DataError):
        read_image(tmp_path / "a.img")


def test_split_round_trip(tmp_path):
    train, _, _ = make_dataset(DEFAULT_STRUCTURES, 32, 32, 4, 1, 1, master_seed=3)
    write_split(tmp_path / "train", train, DEFAULT_STRUCTURES, 3, "train")
    back, manifest = read_split(tmp_path / "train")
    assert manifest["ids"] == [s.id for s in train]
    assert manifest["topology"] == [[s.name, s.node_count, s.closed] for s in DEFAULT_STRUCTURES]
    for orig, loaded in zip(train, back):
        assert orig.id == loaded.id
        assert np.array_equal(orig.image, loaded.image)
        assert np.array_equal(orig.landmarks, loaded.landmarks)
        assert np.array_equal(orig.annotation_mask, loaded.annotation_mask)
        assert orig.ood_label is loaded.ood_label


def test_ood_split_round_trip(tmp_path):
    ood = make_ood_set(DEFAULT_STRUCTURES, 32, 32, 2, 11)
    write_split(tmp_path / "ood", ood, DEFAULT_STRUCTURES, 11, "ood")
    back, _ = read_split(tmp_path / "ood")
    for orig, loaded in zip(ood, back):
        assert orig.ood_label is loaded.ood_label
        assert not loaded.annotation_mask.any()
        assert np.array_equal(orig.landmarks, loaded.landmarks)


def test_regeneration_is_byte_identical(tmp_path):
    for sub in ("a", "b"):
        train, val, test = make_dataset(DEFAULT_STRUCTURES, 32, 32, 3, 2, 2, master_seed=17)
        for name, samples in (("train", train), ("val", val), ("test", test)):
            write_split(tmp_path / sub / name, samples, DEFAULT_STRUCTURES, 17, name)
    assert tree_digest(tmp_path / "a") == tree_digest(tmp_path / "b")


def test_missing_manifest(tmp_path):
    (tmp_path / "empty").mkdir()
    with pytest.raises(DataError):
        read_split(tmp_path / "empty")
