"""Datasets, pixel normalization, noise sampling, batching, and synthesis.

A Dataset keeps raw uint8 pixels; normalization to [-1, 1] happens when a
batch is cut. Datasets tagged unlabeled refuse to hand out labels at all,
which is what keeps the trainer honest about never peeking at target
annotations.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from . import formats
from .autodiff import Tensor

SOURCE = "source"
TARGET = "target"


class UnlabeledDataError(RuntimeError):
    """Labels were requested from a dataset tagged as unlabeled."""


@dataclass
class SynthesisConfig:
    background_dir: str | Path
    threshold: float = 0.5
    seed: int = 0


@dataclass
class Dataset:
    """Raw uint8 images plus whatever annotations the split carries.

    images: (N,H,W,C) uint8 with C in {1, 3}. poses: (N,4) float32 unit
    quaternions. masks: (N,H,W) uint8 in {0,1}. depth: (N,H,W) uint16,
    stacked as one extra channel at normalize time.
    """

    split: str
    domain: str
    images: np.ndarray
    labeled: bool = True
    class_count: int = 0
    _labels: np.ndarray | None = None
    poses: np.ndarray | None = None
    masks: np.ndarray | None = None
    depth: np.ndarray | None = None

    def __post_init__(self):
        if self.images.ndim != 4 or self.images.dtype != np.uint8:
            raise ValueError(
                f"images must be uint8 (N,H,W,C), got {self.images.dtype} "
                f"{self.images.shape}"
            )
        if self.images.shape[3] not in (1, 3):
            raise ValueError(f"images must have 1 or 3 channels, got {self.images.shape[3]}")
        n = len(self.images)
        if self.labeled:
            if self._labels is None:
                raise ValueError(f"split {self.split!r} is labeled but has no labels")
            if len(self._labels) != n:
                raise ValueError(
                    f"{len(self._labels)} labels for {n} images in split {self.split!r}"
                )
            if self.class_count <= 0:
                self.class_count = int(self._labels.max()) + 1 if n else 0
            if n and self._labels.max() >= self.class_count:
                raise ValueError(
                    f"label {self._labels.max()} out of range for "
                    f"{self.class_count} classes"
                )
        for name in ("poses", "masks", "depth"):
            extra = getattr(self, name)
            if extra is not None and len(extra) != n:
                raise ValueError(f"{name} length {len(extra)} does not match {n} images")

    def __len__(self):
        return len(self.images)

    @property
    def labels(self):
        if not self.labeled or self._labels is None:
            raise UnlabeledDataError(
                f"split {self.split!r} ({self.domain}) is unlabeled; labels unavailable"
            )
        return self._labels

    @property
    def channels(self):
        return self.images.shape[3] + (1 if self.depth is not None else 0)

    @property
    def image_shape(self):
        return self.images.shape[1:3]

    def as_unlabeled(self):
        """Copy with the annotations physically dropped, not just hidden."""
        return replace(self, labeled=False, _labels=None, poses=None)

    def subset(self, indices):
        indices = np.asarray(indices)
        pick = lambda a: None if a is None else a[indices]
        return replace(
            self,
            images=self.images[indices],
            _labels=pick(self._labels),
            poses=pick(self.poses),
            masks=pick(self.masks),
            depth=pick(self.depth),
        )

    def filter_classes(self, classes):
        classes = sorted(set(classes))
        missing = [c for c in classes if c not in self.labels]
        if missing:
            raise ValueError(f"classes {missing} absent from split {self.split!r}")
        return self.subset(np.isin(self.labels, classes))


# ---- pixel value mapping ----------------------------------------------------


def expand_grayscale(dataset):
    """Replicate a single channel to three so gray sources match RGB targets."""
    if dataset.images.shape[3] != 1:
        return dataset
    return replace(dataset, images=np.repeat(dataset.images, 3, axis=3))


def normalize(image):
    """uint8 [0,255] -> float32 [-1,1] (or uint16 over its full range)."""
    image = np.asarray(image)
    if image.dtype == np.uint8:
        return (image.astype(np.float32) / 127.5) - 1.0
    if image.dtype == np.uint16:
        return (image.astype(np.float32) / 32767.5) - 1.0
    raise ValueError(f"normalize expects uint8 or uint16 pixels, got {image.dtype}")


def denormalize(values, dtype=np.uint8):
    """Invert normalize: scale back, round to nearest, clamp to range."""
    arr = values.data if isinstance(values, Tensor) else np.asarray(values)
    if dtype == np.uint8:
        scaled = (arr.astype(np.float64) + 1.0) * 127.5
        return np.clip(np.rint(scaled), 0, 255).astype(np.uint8)
    if dtype == np.uint16:
        scaled = (arr.astype(np.float64) + 1.0) * 32767.5
        return np.clip(np.rint(scaled), 0, 65535).astype(np.uint16)
    raise ValueError(f"denormalize target must be uint8 or uint16, got {dtype}")


def sample_noise(count, noise_dim, rng):
    """(count, noise_dim) float32 uniform on the open interval (-1, 1)."""
    u = rng.uniform(-1.0, 1.0, (count, noise_dim)).astype(np.float32)
    # uniform() includes its low end; nudge exact endpoints inward
    u[u <= -1.0] = np.nextafter(np.float32(-1.0), np.float32(0.0))
    u[u >= 1.0] = np.nextafter(np.float32(1.0), np.float32(0.0))
    return u


# ---- batching ----------------------------------------------------------------


@dataclass
class Batch:
    """One training slice, already normalized to NCHW float32."""

    images: np.ndarray
    indices: np.ndarray
    onehot: np.ndarray | None = None
    labels: np.ndarray | None = None
    poses: np.ndarray | None = None
    masks: np.ndarray | None = None

    def __len__(self):
        return len(self.images)


def _cut_batch(dataset, indices):
    imgs = normalize(dataset.images[indices]).transpose(0, 3, 1, 2)
    if dataset.depth is not None:
        d = normalize(dataset.depth[indices])[:, None, :, :]
        imgs = np.concatenate([imgs, d], axis=1)
    onehot = labels = poses = masks = None
    if dataset.labeled:
        labels = dataset.labels[indices]
        onehot = np.zeros((len(indices), dataset.class_count), dtype=np.float32)
        onehot[np.arange(len(indices)), labels] = 1.0
        if dataset.poses is not None:
            poses = dataset.poses[indices]
    if dataset.masks is not None:
        masks = dataset.masks[indices].astype(np.float32)[:, None, :, :]
    return Batch(images=np.ascontiguousarray(imgs), indices=np.asarray(indices),
                 onehot=onehot, labels=labels, poses=poses, masks=masks)


class BatchStream:
    """Endless epoch-shuffled batches with a fully serializable cursor.

    Each epoch draws a fresh permutation from its own rng; the tail that
    does not fill a batch is dropped. state()/restore() capture the rng
    state as of the start of the current epoch plus the offset inside it,
    so a restored stream replays the exact same batch sequence.
    """

    def __init__(self, dataset, batch_size, seed):
        if len(dataset) == 0:
            raise ValueError(f"split {dataset.split!r} is empty")
        if not 1 <= batch_size <= len(dataset):
            raise ValueError(
                f"batch size {batch_size} out of range for {len(dataset)} images"
            )
        self.dataset = dataset
        self.batch_size = batch_size
        self._rng = np.random.default_rng(seed)
        self._epoch_state = self._rng.bit_generator.state
        self._perm = self._rng.permutation(len(dataset))
        self._pos = 0
        self._usable = len(dataset) - len(dataset) % batch_size

    def next_batch(self):
        if self._pos + self.batch_size > self._usable:
            self._epoch_state = self._rng.bit_generator.state
            self._perm = self._rng.permutation(len(self.dataset))
            self._pos = 0
        take = self._perm[self._pos : self._pos + self.batch_size]
        self._pos += self.batch_size
        return _cut_batch(self.dataset, take)

    def state(self):
        return {"rng": self._epoch_state, "pos": self._pos}

    def restore(self, state):
        self._rng.bit_generator.state = state["rng"]
        self._epoch_state = self._rng.bit_generator.state
        self._perm = self._rng.permutation(len(self.dataset))
        self._pos = state["pos"]


def batch_iterator(dataset, batch_size, seed, epochs=1):
    """Finite epoch-shuffled batch generator; partial tails are dropped."""
    if epochs < 1:
        raise ValueError(f"epochs must be >= 1, got {epochs}")
    stream = BatchStream(dataset, batch_size, seed)
    per_epoch = stream._usable // batch_size
    for _ in range(epochs * per_epoch):
        yield stream.next_batch()


def coverage_batches(dataset, batch_size):
    """Deterministic full sweep for evaluation; the tail batch may be short."""
    for start in range(0, len(dataset), batch_size):
        yield _cut_batch(dataset, np.arange(start, min(start + batch_size, len(dataset))))


# ---- synthesis ----------------------------------------------------------------


def foreground_mask(image, threshold=0.5):
    """Binary mask of pixels strictly brighter than threshold * 255."""
    if not 0 < threshold < 1:
        raise ValueError(f"threshold must be in (0, 1), got {threshold}")
    return (np.asarray(image) > threshold * 255.0).astype(np.uint8)


def synthesize_composite(glyph, background, threshold=0.5):
    """Blend a grayscale glyph into a background by inverting it there.

    Output pixel = 255 - background inside the glyph mask, background
    outside, channel by channel. Returns (composite, mask).
    """
    glyph = np.asarray(glyph)
    background = np.asarray(background)
    if glyph.ndim != 2:
        raise ValueError(f"glyph must be grayscale (H,W), got shape {glyph.shape}")
    if background.shape[:2] != glyph.shape:
        raise ValueError(
            f"background {background.shape} does not cover glyph {glyph.shape}"
        )
    mask = foreground_mask(glyph, threshold)
    m = mask[..., None] if background.ndim == 3 else mask
    composite = np.where(m.astype(bool), 255 - background, background)
    return composite.astype(np.uint8), mask


def load_backgrounds(directory):
    """All netpbm images under `directory`, sorted by name for determinism."""
    paths = sorted(
        p for p in Path(directory).iterdir() if p.suffix in (".pgm", ".ppm")
    )
    if not paths:
        raise ValueError(f"no .pgm/.ppm backgrounds under {directory}")
    return [formats.read_pnm(p) for p in paths]


def build_synthetic_target_set(source, config):
    """Composite every source image over a random background crop.

    Backgrounds come from config.background_dir; each image picks a
    background and a crop offset from the seeded rng, so two seeds give two
    visually different target sets. Labels and poses carry over; strip them
    with as_unlabeled() before handing the result to the trainer as the
    target domain.
    """
    if source.images.shape[3] != 1:
        raise ValueError("synthesis needs a grayscale source (one channel)")
    backgrounds = load_backgrounds(config.background_dir)
    h, w = source.image_shape
    for i, bg in enumerate(backgrounds):
        if bg.shape[0] < h or bg.shape[1] < w:
            raise ValueError(
                f"background {i} is {bg.shape[:2]}, smaller than the {h}x{w} crop"
            )
        if bg.ndim != backgrounds[0].ndim:
            raise ValueError("backgrounds mix grayscale and color images")
    rng = np.random.default_rng(config.seed)
    channels = 3 if backgrounds[0].ndim == 3 else 1
    out = np.empty((len(source), h, w, channels), dtype=np.uint8)
    for i in range(len(source)):
        bg = backgrounds[rng.integers(len(backgrounds))]
        top = rng.integers(bg.shape[0] - h + 1)
        left = rng.integers(bg.shape[1] - w + 1)
        crop = bg[top : top + h, left : left + w]
        composite, _ = synthesize_composite(
            source.images[i, :, :, 0], crop, config.threshold
        )
        out[i] = composite if channels == 3 else composite[..., None]
    return Dataset(
        split=f"{source.split}-composite",
        domain=TARGET,
        images=out,
        labeled=source.labeled,
        class_count=source.class_count,
        _labels=None if source._labels is None else source._labels.copy(),
        poses=None if source.poses is None else source.poses.copy(),
    )


# ---- loading ------------------------------------------------------------------


def load_idx_dataset(images_path, labels_path, split, domain, class_count=0):
    images = formats.read_idx(images_path)
    labels = formats.read_idx(labels_path)
    if images.ndim != 3:
        raise formats.DataFormatError(f"{images_path} holds labels, not images")
    if labels.ndim != 1:
        raise formats.DataFormatError(f"{labels_path} holds images, not labels")
    if len(images) != len(labels):
        raise formats.DataFormatError(
            f"{len(images)} images but {len(labels)} labels"
        )
    return Dataset(
        split=split,
        domain=domain,
        images=images[..., None],
        labeled=True,
        class_count=class_count,
        _labels=labels.astype(np.int64),
    )


def load_image_directory(path, split, domain, class_count=0):
    """Dataset from a directory of netpbm files plus manifest.csv.

    Depth maps ride along automatically when `<stem>_depth.pgm` exists next
    to an image; masks come from the manifest's mask_filename column.
    """
    path = Path(path)
    manifest = path / formats.MANIFEST_NAME
    if not manifest.exists():
        raise formats.DataFormatError(f"no {formats.MANIFEST_NAME} under {path}")
    names, labels, quats, mask_names = formats.read_manifest(manifest)
    if not names:
        raise formats.DataFormatError(f"{manifest}: manifest lists no images")
    images, masks, depths = [], [], []
    for i, name in enumerate(names):
        img = formats.read_pnm(path / name)
        if img.ndim == 2:
            img = img[..., None]
        images.append(img)
        depth_path = path / f"{Path(name).stem}_depth.pgm"
        if depth_path.exists():
            depths.append(formats.read_pnm(depth_path))
        if mask_names is not None:
            m = formats.read_pnm(path / mask_names[i])
            masks.append((m > 0).astype(np.uint8))
    shapes = {img.shape for img in images}
    if len(shapes) != 1:
        raise formats.DataFormatError(f"{path}: mixed image shapes {sorted(shapes)}")
    if depths and len(depths) != len(images):
        raise formats.DataFormatError(f"{path}: only some images have depth maps")
    return Dataset(
        split=split,
        domain=domain,
        images=np.stack(images),
        labeled=True,
        class_count=class_count,
        _labels=labels,
        poses=quats,
        masks=np.stack(masks) if masks else None,
        depth=np.stack(depths) if depths else None,
    )


def write_image_directory(dataset, path):
    """Inverse of load_image_directory for labeled datasets."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    rows = []
    with_pose = dataset.poses is not None
    with_mask = dataset.masks is not None
    width = len(str(max(len(dataset) - 1, 1)))
    for i in range(len(dataset)):
        img = dataset.images[i]
        name = f"{i:0{width}d}." + ("ppm" if img.shape[2] == 3 else "pgm")
        formats.write_pnm(path / name, img if img.shape[2] == 3 else img[:, :, 0])
        if dataset.depth is not None:
            formats.write_pnm(path / f"{Path(name).stem}_depth.pgm", dataset.depth[i])
        row = [name, int(dataset.labels[i])]
        if with_pose:
            row.append([float(v) for v in dataset.poses[i]])
        if with_mask:
            mask_name = f"{i:0{width}d}_mask.pgm"
            formats.write_pnm(path / mask_name, (dataset.masks[i] * 255).astype(np.uint8))
            row.append(mask_name)
        rows.append(tuple(row))
    formats.write_manifest(path / formats.MANIFEST_NAME, rows,
                           with_pose=with_pose, with_mask=with_mask)
