"""Binary format round-trips and damage detection."""

import numpy as np
import pytest

from pixelda.formats import (
    CHECKPOINT_MAGIC,
    DataFormatError,
    read_checkpoint,
    read_idx,
    read_manifest,
    read_pnm,
    write_checkpoint,
    write_idx_images,
    write_idx_labels,
    write_manifest,
    write_pnm,
)


def rng(seed=0):
    return np.random.default_rng(seed)


# ---- IDX ----------------------------------------------------------------------

def test_idx_images_roundtrip(tmp_path):
    images = rng(1).integers(0, 256, size=(7, 5, 4), dtype=np.uint8)
    p = tmp_path / "im.idx"
    write_idx_images(p, images)
    np.testing.assert_array_equal(read_idx(p), images)


def test_idx_labels_roundtrip(tmp_path):
    labels = rng(2).integers(0, 10, size=100).astype(np.uint8)
    p = tmp_path / "lb.idx"
    write_idx_labels(p, labels)
    np.testing.assert_array_equal(read_idx(p), labels)


def test_idx_rejects_bad_magic(tmp_path):
    p = tmp_path / "junk.idx"
    p.write_bytes(b"\x00\x00\x08\x05" + b"\x00" * 16)
    with pytest.raises(DataFormatError):
        read_idx(p)


def test_idx_rejects_truncated_payload(tmp_path):
    images = rng(3).integers(0, 256, size=(4, 3, 3), dtype=np.uint8)
    p = tmp_path / "im.idx"
    write_idx_images(p, images)
    whole = p.read_bytes()
    p.write_bytes(whole[:-5])
    with pytest.raises(DataFormatError):
        read_idx(p)


# ---- netpbm ---------------------------------------------------------------------

def test_pgm_roundtrip(tmp_path):
    img = rng(4).integers(0, 256, size=(9, 6), dtype=np.uint8)
    p = tmp_path / "a.pgm"
    write_pnm(p, img)
    np.testing.assert_array_equal(read_pnm(p), img)


def test_ppm_roundtrip(tmp_path):
    img = rng(5).integers(0, 256, size=(4, 7, 3), dtype=np.uint8)
    p = tmp_path / "a.ppm"
    write_pnm(p, img)
    np.testing.assert_array_equal(read_pnm(p), img)


def test_pgm_16bit_roundtrip(tmp_path):
    img = rng(6).integers(0, 65536, size=(5, 5), dtype=np.uint16)
    p = tmp_path / "d.pgm"
    write_pnm(p, img)
    back = read_pnm(p)
    assert back.dtype == np.uint16
    np.testing.assert_array_equal(back, img)


def test_pnm_comment_tolerated(tmp_path):
    p = tmp_path / "c.pgm"
    p.write_bytes(b"P5\n# a comment line\n2 2\n255\n\x01\x02\x03\x04")
    np.testing.assert_array_equal(read_pnm(p), [[1, 2], [3, 4]])


def test_pnm_rejects_unknown_magic(tmp_path):
    p = tmp_path / "x.pgm"
    p.write_bytes(b"P7\n2 2\n255\n\x00\x00\x00\x00")
    with pytest.raises(DataFormatError):
        read_pnm(p)


def test_pnm_rejects_truncated(tmp_path):
    p = tmp_path / "t.pgm"
    p.write_bytes(b"P5\n4 4\n255\n\x00\x00")
    with pytest.raises(DataFormatError):
        read_pnm(p)


# ---- manifest --------------------------------------------------------------------

def test_manifest_roundtrip_plain(tmp_path):
    rows = [("0.pgm", 2), ("1.pgm", 0)]
    p = tmp_path / "manifest.csv"
    write_manifest(p, rows)
    names, labels, quats, masks = read_manifest(p)
    assert names == ["0.pgm", "1.pgm"]
    np.testing.assert_array_equal(labels, [2, 0])
    assert quats is None and masks is None


def test_manifest_roundtrip_pose_and_mask(tmp_path):
    q = [0.5, 0.5, 0.5, 0.5]
    rows = [("0.pgm", 1, q, "0_mask.pgm")]
    p = tmp_path / "manifest.csv"
    write_manifest(p, rows, with_pose=True, with_mask=True)
    names, labels, quats, masks = read_manifest(p)
    np.testing.assert_allclose(quats[0], q)
    assert masks == ["0_mask.pgm"]


def test_manifest_rejects_ragged_row(tmp_path):
    p = tmp_path / "manifest.csv"
    p.write_text("filename,label\n0.pgm,1,extra\n")
    with pytest.raises(DataFormatError):
        read_manifest(p)


# ---- checkpoints -------------------------------------------------------------------

def sample_tensors():
    g = rng(7)
    return {
        "g/w": g.normal(size=(3, 4)).astype(np.float32),
        "d/b": g.normal(size=(5,)).astype(np.float64),
        "mask": g.integers(0, 2, size=(2, 2)).astype(np.uint8),
        "depth": g.integers(0, 65536, size=(2, 2)).astype(np.uint16),
        "steps": np.array([1, 2, 3], dtype=np.int64),
    }


def test_checkpoint_roundtrip_all_dtypes(tmp_path):
    tensors = sample_tensors()
    meta = {"adam_t": 17, "nested": {"a": [1, 2]}}
    p = tmp_path / "c.pxda"
    write_checkpoint(p, 123, tensors, meta)
    step, back, meta_back = read_checkpoint(p)
    assert step == 123
    assert meta_back == meta
    assert set(back) == set(tensors)
    for name in tensors:
        assert back[name].dtype == tensors[name].dtype
        np.testing.assert_array_equal(back[name], tensors[name])


def test_checkpoint_rewrite_is_byte_identical(tmp_path):
    tensors = sample_tensors()
    meta = {"b": 1, "a": 2}
    p1, p2 = tmp_path / "a.pxda", tmp_path / "b.pxda"
    write_checkpoint(p1, 9, tensors, meta)
    step, back, meta_back = read_checkpoint(p1)
    write_checkpoint(p2, step, back, meta_back)
    assert p1.read_bytes() == p2.read_bytes()


def test_checkpoint_name_order_does_not_matter(tmp_path):
    tensors = sample_tensors()
    flipped = dict(reversed(list(tensors.items())))
    p1, p2 = tmp_path / "a.pxda", tmp_path / "b.pxda"
    write_checkpoint(p1, 0, tensors, {})
    write_checkpoint(p2, 0, flipped, {})
    assert p1.read_bytes() == p2.read_bytes()


def test_checkpoint_magic_present(tmp_path):
    p = tmp_path / "c.pxda"
    write_checkpoint(p, 0, {}, {})
    assert p.read_bytes()[:4] == CHECKPOINT_MAGIC


def test_checkpoint_rejects_bad_magic(tmp_path):
    p = tmp_path / "c.pxda"
    write_checkpoint(p, 0, {}, {})
    data = bytearray(p.read_bytes())
    data[:4] = b"NOPE"
    p.write_bytes(bytes(data))
    with pytest.raises(DataFormatError):
        read_checkpoint(p)


def test_checkpoint_rejects_truncation(tmp_path):
    p = tmp_path / "c.pxda"
    write_checkpoint(p, 0, sample_tensors(), {"k": 1})
    data = p.read_bytes()
    p.write_bytes(data[: len(data) // 2])
    with pytest.raises(DataFormatError):
        read_checkpoint(p)


def test_checkpoint_rejects_trailing_garbage(tmp_path):
    p = tmp_path / "c.pxda"
    write_checkpoint(p, 0, sample_tensors(), {})
    p.write_bytes(p.read_bytes() + b"\x00")
    with pytest.raises(DataFormatError):
        read_checkpoint(p)


def test_checkpoint_rejects_unsupported_dtype(tmp_path):
    with pytest.raises(ValueError):
        write_checkpoint(tmp_path / "c.pxda", 0,
                         {"x": np.zeros(2, dtype=np.complex64)}, {})
