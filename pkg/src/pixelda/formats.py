"""On-disk formats: IDX tensors, netpbm images, manifests, checkpoints.

Everything here round-trips losslessly; the tests depend on that. IDX uses
the classic big-endian layout (magic 0x803 for image stacks, 0x801 for label
vectors). Images are binary PGM/PPM, with 16-bit PGM (big-endian samples,
maxval 65535) for depth maps. Checkpoints are a little-endian tagged tensor
table plus a canonical-JSON trailer, written so save -> load -> save is
byte-identical.
"""

from __future__ import annotations

import csv
import json
import struct

import numpy as np

IDX_IMAGE_MAGIC = 0x00000803
IDX_LABEL_MAGIC = 0x00000801

CHECKPOINT_MAGIC = b"PXDA"
CHECKPOINT_VERSION = 1

_DTYPE_CODES = {
    np.dtype(np.float32): 1,
    np.dtype(np.float64): 2,
    np.dtype(np.uint8): 3,
    np.dtype(np.uint16): 4,
    np.dtype(np.int64): 5,
}
_CODE_DTYPES = {v: k for k, v in _DTYPE_CODES.items()}


class DataFormatError(ValueError):
    """A file does not parse as the format its reader expects."""


def _read_exact(f, count, what):
    data = f.read(count)
    if len(data) != count:
        raise DataFormatError(f"truncated file: expected {count} bytes of {what}")
    return data


# ---- IDX -------------------------------------------------------------------


def read_idx(path):
    """Read an IDX file; returns (N,H,W) uint8 images or (N,) uint8 labels."""
    with open(path, "rb") as f:
        magic = struct.unpack(">I", _read_exact(f, 4, "magic"))[0]
        if magic == IDX_IMAGE_MAGIC:
            count, rows, cols = struct.unpack(">III", _read_exact(f, 12, "header"))
            if max(count, rows, cols) > 2**24:
                raise DataFormatError(f"implausible IDX dimensions {count}x{rows}x{cols}")
            payload = f.read()
            expected = count * rows * cols
            if len(payload) != expected:
                raise DataFormatError(
                    f"IDX payload is {len(payload)} bytes, header promises {expected}"
                )
            return np.frombuffer(payload, dtype=np.uint8).reshape(count, rows, cols).copy()
        if magic == IDX_LABEL_MAGIC:
            count = struct.unpack(">I", _read_exact(f, 4, "header"))[0]
            payload = f.read()
            if len(payload) != count:
                raise DataFormatError(
                    f"IDX payload is {len(payload)} bytes, header promises {count}"
                )
            return np.frombuffer(payload, dtype=np.uint8).copy()
    raise DataFormatError(f"unrecognized IDX magic 0x{magic:08x} in {path}")


def write_idx_images(path, images):
    images = np.asarray(images)
    if images.ndim != 3 or images.dtype != np.uint8:
        raise ValueError(f"image stack must be uint8 (N,H,W), got {images.dtype} {images.shape}")
    with open(path, "wb") as f:
        f.write(struct.pack(">IIII", IDX_IMAGE_MAGIC, *images.shape))
        f.write(images.tobytes())


def write_idx_labels(path, labels):
    labels = np.asarray(labels)
    if labels.ndim != 1:
        raise ValueError(f"labels must be 1-d, got shape {labels.shape}")
    if labels.min() < 0 or labels.max() > 255:
        raise ValueError("labels must fit in uint8")
    with open(path, "wb") as f:
        f.write(struct.pack(">II", IDX_LABEL_MAGIC, labels.shape[0]))
        f.write(labels.astype(np.uint8).tobytes())


# ---- netpbm ----------------------------------------------------------------


def _read_pnm_token(f):
    # tokens are whitespace-separated; '#' starts a comment to end of line
    token = b""
    while True:
        ch = f.read(1)
        if not ch:
            raise DataFormatError("truncated netpbm header")
        if ch == b"#":
            while ch and ch != b"\n":
                ch = f.read(1)
            continue
        if ch.isspace():
            if token:
                return token
            continue
        token += ch


def read_pnm(path):
    """Read binary PGM/PPM. Returns (H,W) uint8/uint16 or (H,W,3) uint8."""
    with open(path, "rb") as f:
        kind = _read_pnm_token(f)
        if kind not in (b"P5", b"P6"):
            raise DataFormatError(f"{path}: expected binary PGM/PPM, got {kind!r}")
        width = int(_read_pnm_token(f))
        height = int(_read_pnm_token(f))
        maxval = int(_read_pnm_token(f))
        if kind == b"P6":
            if maxval != 255:
                raise DataFormatError(f"{path}: only 8-bit PPM supported, maxval={maxval}")
            raw = _read_exact(f, width * height * 3, "pixel data")
            return np.frombuffer(raw, dtype=np.uint8).reshape(height, width, 3).copy()
        if maxval == 255:
            raw = _read_exact(f, width * height, "pixel data")
            return np.frombuffer(raw, dtype=np.uint8).reshape(height, width).copy()
        if maxval == 65535:
            raw = _read_exact(f, width * height * 2, "pixel data")
            return (
                np.frombuffer(raw, dtype=">u2").reshape(height, width).astype(np.uint16)
            )
        raise DataFormatError(f"{path}: unsupported PGM maxval {maxval}")


def write_pnm(path, image):
    """Write (H,W) uint8/uint16 as PGM or (H,W,3) uint8 as PPM."""
    image = np.asarray(image)
    if image.ndim == 3 and image.shape[2] == 3 and image.dtype == np.uint8:
        header = b"P6\n%d %d\n255\n" % (image.shape[1], image.shape[0])
        payload = image.tobytes()
    elif image.ndim == 2 and image.dtype == np.uint8:
        header = b"P5\n%d %d\n255\n" % (image.shape[1], image.shape[0])
        payload = image.tobytes()
    elif image.ndim == 2 and image.dtype == np.uint16:
        header = b"P5\n%d %d\n65535\n" % (image.shape[1], image.shape[0])
        payload = image.astype(">u2").tobytes()
    else:
        raise ValueError(f"cannot encode array of dtype {image.dtype} shape {image.shape}")
    with open(path, "wb") as f:
        f.write(header)
        f.write(payload)


# ---- manifests ---------------------------------------------------------------

MANIFEST_NAME = "manifest.csv"


def write_manifest(path, rows, with_pose=False, with_mask=False):
    """rows: (filename, label [, quaternion] [, mask_filename]) tuples."""
    header = ["filename", "label"]
    if with_pose:
        header += ["qw", "qx", "qy", "qz"]
    if with_mask:
        header += ["mask_filename"]
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(header)
        for row in rows:
            out = [row[0], row[1]]
            cursor = 2
            if with_pose:
                out += [f"{v:.9g}" for v in row[cursor]]
                cursor += 1
            if with_mask:
                out += [row[cursor]]
            writer.writerow(out)


def read_manifest(path):
    """Returns (filenames, labels, quaternions|None, mask_filenames|None)."""
    with open(path, newline="") as f:
        reader = csv.reader(f)
        try:
            header = next(reader)
        except StopIteration:
            raise DataFormatError(f"{path}: empty manifest")
        if header[:2] != ["filename", "label"]:
            raise DataFormatError(f"{path}: manifest must start with filename,label")
        pose_cols = header[2:6] == ["qw", "qx", "qy", "qz"]
        mask_col = header[-1] == "mask_filename" and len(header) > 2
        names, labels, quats, masks = [], [], [], []
        for line, row in enumerate(reader, start=2):
            if not row:
                continue
            expected = 2 + (4 if pose_cols else 0) + (1 if mask_col else 0)
            if len(row) != expected:
                raise DataFormatError(f"{path}:{line}: expected {expected} fields, got {len(row)}")
            names.append(row[0])
            labels.append(int(row[1]))
            if pose_cols:
                quats.append([float(v) for v in row[2:6]])
            if mask_col:
                masks.append(row[-1])
    return (
        names,
        np.asarray(labels, dtype=np.int64),
        np.asarray(quats, dtype=np.float32) if pose_cols else None,
        masks if mask_col else None,
    )


# ---- checkpoints -------------------------------------------------------------


def write_checkpoint(path, step, tensors, meta):
    """Write the tagged tensor table; `meta` must be JSON-serializable.

    Table entries are sorted by name so the byte stream never depends on
    insertion order.
    """
    blob = bytearray()
    blob += CHECKPOINT_MAGIC
    blob += struct.pack("<I", CHECKPOINT_VERSION)
    blob += struct.pack("<Q", step)
    names = sorted(tensors)
    blob += struct.pack("<I", len(names))
    for name in names:
        arr = np.ascontiguousarray(tensors[name])
        code = _DTYPE_CODES.get(arr.dtype)
        if code is None:
            raise ValueError(f"cannot checkpoint dtype {arr.dtype} for {name!r}")
        encoded = name.encode("utf-8")
        blob += struct.pack("<H", len(encoded))
        blob += encoded
        blob += struct.pack("<BB", code, arr.ndim)
        blob += struct.pack(f"<{arr.ndim}I", *arr.shape)
        little = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
        blob += little.tobytes()
    payload = json.dumps(meta, sort_keys=True, separators=(",", ":")).encode("utf-8")
    blob += struct.pack("<I", len(payload))
    blob += payload
    with open(path, "wb") as f:
        f.write(blob)


def read_checkpoint(path):
    """Returns (step, {name: array}, meta). Complains loudly about damage."""
    with open(path, "rb") as f:
        magic = _read_exact(f, 4, "magic")
        if magic != CHECKPOINT_MAGIC:
            raise DataFormatError(f"{path}: bad checkpoint magic {magic!r}")
        version = struct.unpack("<I", _read_exact(f, 4, "version"))[0]
        if version != CHECKPOINT_VERSION:
            raise DataFormatError(f"{path}: unsupported checkpoint version {version}")
        step = struct.unpack("<Q", _read_exact(f, 8, "step"))[0]
        count = struct.unpack("<I", _read_exact(f, 4, "table size"))[0]
        tensors = {}
        for _ in range(count):
            name_len = struct.unpack("<H", _read_exact(f, 2, "name length"))[0]
            name = _read_exact(f, name_len, "name").decode("utf-8")
            code, ndim = struct.unpack("<BB", _read_exact(f, 2, "dtype/ndim"))
            dtype = _CODE_DTYPES.get(code)
            if dtype is None:
                raise DataFormatError(f"{path}: unknown dtype code {code} for {name!r}")
            shape = struct.unpack(f"<{ndim}I", _read_exact(f, 4 * ndim, "shape"))
            nbytes = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
            raw = _read_exact(f, nbytes, f"tensor {name!r}")
            arr = np.frombuffer(raw, dtype=dtype.newbyteorder("<")).reshape(shape)
            tensors[name] = arr.astype(dtype)
        json_len = struct.unpack("<I", _read_exact(f, 4, "trailer length"))[0]
        meta = json.loads(_read_exact(f, json_len, "trailer").decode("utf-8"))
        extra = f.read(1)
        if extra:
            raise DataFormatError(f"{path}: trailing bytes after checkpoint payload")
    return step, tensors, meta
