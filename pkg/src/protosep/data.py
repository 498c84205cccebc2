"""Synthetic fine-grained benchmark and deterministic augmentation.

Every image is a blurred-noise background, a family glyph (a large
outline shape shared by all classes of one family), and a small binary
micro-pattern unique to the class — both placed at random locations.
Backgrounds and placements are statistically identical across classes,
so classwise pixel means carry almost no signal and a nearest-centroid
classifier sits near chance; only the local micro-pattern identifies
the class. That forces any successful model to find small
discriminative parts, which is the regime the prototype branch is
built for.

Datasets are materialized to disk as 8-bit RGB PNGs in one directory
per class plus a `split.csv` index (path,label,split). Generation and
augmentation are keyed by (seed, image id, variant id), so identical
inputs produce byte-identical datasets.
"""

import csv
import os
from dataclasses import dataclass, replace

import numpy as np
from PIL import Image

from .autodiff import InvalidArgumentError
from .util import STREAM_AUGMENT, STREAM_DATA, rng_for

GLYPH_SIZE = 24  # family outline shapes are drawn into this box
PATTERN_GRID = 4  # class micro-patterns are G x G binary grids, upscaled


@dataclass(frozen=True)
class SyntheticDatasetConfig:
    n_classes: int = 8
    n_families: int = 4
    image_size: int = 64
    train_per_class: int = 200
    test_per_class: int = 50
    texture_seed: int = 7
    patch_size: int = 12

    def validate(self):
        if self.n_classes < 2 or self.n_families < 1:
            raise InvalidArgumentError(
                f"need >= 2 classes in >= 1 family, got "
                f"{self.n_classes}/{self.n_families}")
        if self.n_classes % self.n_families != 0:
            raise InvalidArgumentError(
                f"{self.n_classes} classes do not split evenly into "
                f"{self.n_families} families")
        if not 4 <= self.patch_size <= self.image_size - GLYPH_SIZE:
            raise InvalidArgumentError(
                f"patch size {self.patch_size} does not fit a "
                f"{self.image_size}px image")
        if self.train_per_class < 1 or self.test_per_class < 0:
            raise InvalidArgumentError("sample counts must be positive")

    def family_of(self, label):
        return label % self.n_families


@dataclass
class Dataset:
    """In-memory view of an on-disk dataset, in index-file row order."""
    images: np.ndarray  # (N, S, S, 3) float64 in [0, 1]
    labels: np.ndarray  # (N,) int
    ids: np.ndarray     # (N,) int, row index in split.csv
    paths: list
    split: np.ndarray   # (N,) str

    def subset(self, split):
        keep = self.split == split
        return Dataset(images=self.images[keep], labels=self.labels[keep],
                       ids=self.ids[keep],
                       paths=[p for p, k in zip(self.paths, keep) if k],
                       split=self.split[keep])

    def __len__(self):
        return len(self.labels)


def _box_blur(img, radius, passes=2):
    out = img.astype(np.float64, copy=True)
    k = 2 * radius + 1
    for _ in range(passes):
        for axis in (0, 1):
            pad = [(0, 0)] * out.ndim
            pad[axis] = (radius, radius)
            padded = np.pad(out, pad, mode="edge")
            csum = np.cumsum(padded, axis=axis)
            zero_shape = list(padded.shape)
            zero_shape[axis] = 1
            csum = np.concatenate([np.zeros(zero_shape), csum], axis=axis)
            n = out.shape[axis]
            hi = np.take(csum, range(k, k + n), axis=axis)
            lo = np.take(csum, range(0, n), axis=axis)
            out = (hi - lo) / k
    return out


def _family_glyph(family, texture_seed):
    """Outline shape mask (GLYPH_SIZE x GLYPH_SIZE) shared by one family."""
    g = GLYPH_SIZE
    yy, xx = np.mgrid[0:g, 0:g].astype(np.float64)
    cy = cx = (g - 1) / 2.0
    r = g / 2.0 - 1.5
    kind = family % 4
    if kind == 0:  # ring
        d = np.hypot(yy - cy, xx - cx)
        mask = np.abs(d - r * 0.8) < 1.8
    elif kind == 1:  # square frame
        d = np.maximum(np.abs(yy - cy), np.abs(xx - cx))
        mask = np.abs(d - r * 0.75) < 1.6
    elif kind == 2:  # diamond frame
        d = np.abs(yy - cy) + np.abs(xx - cx)
        mask = np.abs(d - r) < 2.2
    else:  # X cross
        mask = (np.abs((yy - cy) - (xx - cx)) < 1.8) | \
               (np.abs((yy - cy) + (xx - cx)) < 1.8)
    if family >= 4:  # extra families get a seeded blob overlay
        rng = rng_for(texture_seed, STREAM_DATA, 900 + family)
        blob = _box_blur(rng.uniform(0, 1, (g, g)), 2) > 0.52
        mask = mask ^ blob
    return mask.astype(np.float64)


def _class_pattern(label, texture_seed, patch_size):
    """Binary micro-pattern (patch x patch), the only class-specific cue.

    Exactly half the cells are set, so every class patch has the same
    mean brightness and classwise pixel means stay uninformative.
    """
    rng = rng_for(texture_seed, STREAM_DATA, 100 + label)
    n = PATTERN_GRID * PATTERN_GRID
    flat = np.zeros(n)
    flat[: n // 2] = 1.0
    grid = rng.permutation(flat).reshape(PATTERN_GRID, PATTERN_GRID)
    cell = patch_size // PATTERN_GRID
    up = np.kron(grid, np.ones((cell, cell)))
    pad = patch_size - up.shape[0]
    if pad:
        up = np.pad(up, ((0, pad), (0, pad)), mode="edge")
    return up


def _paste(img, top, left, values, mask):
    h, w = mask.shape
    region = img[top:top + h, left:left + w]
    img[top:top + h, left:left + w] = np.where(mask[..., None] > 0, values,
                                               region)


def render_image(cfg, label, image_index, seed):
    """One synthetic sample as float64 (S, S, 3) in [0, 1], quantized."""
    s = cfg.image_size
    rng = rng_for(seed, STREAM_DATA, image_index)
    base = rng.uniform(0.0, 1.0, size=(s, s, 3))
    img = np.clip(0.5 + 1.6 * (_box_blur(base, 2) - 0.5), 0.25, 0.75)

    # glyph polarity flips per image so family shapes leave no trace in
    # classwise pixel means, only in local structure
    glyph = _family_glyph(cfg.family_of(label), cfg.texture_seed)
    gy = int(rng.integers(0, s - GLYPH_SIZE + 1))
    gx = int(rng.integers(0, s - GLYPH_SIZE + 1))
    glyph_value = 0.12 if rng.integers(0, 2) else 0.88
    _paste(img, gy, gx, glyph_value, glyph)

    pattern = _class_pattern(label, cfg.texture_seed, cfg.patch_size)
    py = int(rng.integers(0, s - cfg.patch_size + 1))
    px = int(rng.integers(0, s - cfg.patch_size + 1))
    patch = np.where(pattern[..., None] > 0, 0.95, 0.05)
    _paste(img, py, px, patch, np.ones_like(pattern))

    return np.round(img * 255.0) / 255.0


def _write_png(path, img):
    arr = np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)
    Image.fromarray(arr, mode="RGB").save(path, format="PNG")


def _read_png(path):
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float64)
    return arr / 255.0


def gen_dataset(cfg, seed, out_dir):
    """Materialize the benchmark to disk; returns the index rows."""
    cfg.validate()
    os.makedirs(out_dir, exist_ok=True)
    for k in range(cfg.n_classes):
        os.makedirs(os.path.join(out_dir, f"class_{k}"), exist_ok=True)
    rows = []
    index = 0
    for split, per_class in (("train", cfg.train_per_class),
                             ("test", cfg.test_per_class)):
        for label in range(cfg.n_classes):
            for _ in range(per_class):
                rel = f"class_{label}/{split}_{index:05d}.png"
                img = render_image(cfg, label, index, seed)
                _write_png(os.path.join(out_dir, rel), img)
                rows.append((rel, label, split))
                index += 1
    with open(os.path.join(out_dir, "split.csv"), "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["path", "label", "split"])
        writer.writerows(rows)
    return rows


def load_dataset(root, split=None):
    """Read an on-disk dataset back into memory (optionally one split)."""
    index_path = os.path.join(root, "split.csv")
    if not os.path.exists(index_path):
        raise InvalidArgumentError(f"no split.csv under {root!r}")
    images, labels, ids, paths, splits = [], [], [], [], []
    with open(index_path, newline="") as fh:
        for i, row in enumerate(csv.DictReader(fh)):
            if split is not None and row["split"] != split:
                continue
            images.append(_read_png(os.path.join(root, row["path"])))
            labels.append(int(row["label"]))
            ids.append(i)
            paths.append(row["path"])
            splits.append(row["split"])
    return Dataset(images=np.array(images), labels=np.array(labels),
                   ids=np.array(ids), paths=paths, split=np.array(splits))


def nearest_centroid_accuracy(train, test):
    """Pixel-space nearest-centroid baseline; near chance by construction."""
    from sklearn.neighbors import NearestCentroid
    clf = NearestCentroid()
    clf.fit(train.images.reshape(len(train), -1), train.labels)
    pred = clf.predict(test.images.reshape(len(test), -1))
    return float(np.mean(pred == test.labels))


# ---------------------------------------------------------------------------
# augmentation
# ---------------------------------------------------------------------------

def _bilinear_sample(img, yy, xx):
    h, w = img.shape[:2]
    yy = np.clip(yy, 0.0, h - 1.0)
    xx = np.clip(xx, 0.0, w - 1.0)
    y0 = np.clip(np.floor(yy).astype(int), 0, h - 2)
    x0 = np.clip(np.floor(xx).astype(int), 0, w - 2)
    ty = (yy - y0)[..., None]
    tx = (xx - x0)[..., None]
    a = img[y0, x0]
    b = img[y0, x0 + 1]
    c = img[y0 + 1, x0]
    d = img[y0 + 1, x0 + 1]
    return (a * (1 - ty) * (1 - tx) + b * (1 - ty) * tx
            + c * ty * (1 - tx) + d * ty * tx)


def warp_image(img, angle_deg, shear, flip, elastic_field=None):
    """Flip, then rotate+shear about the center, then elastic displacement.

    All resampling is bilinear with edge clamping, so the label-carrying
    content survives every combination in range.
    """
    out = img[:, ::-1] if flip else img
    h, w = out.shape[:2]
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    theta = np.deg2rad(angle_deg)
    fwd = np.array([[np.cos(theta), -np.sin(theta)],
                    [np.sin(theta), np.cos(theta)]]) @ \
        np.array([[1.0, shear], [shear, 1.0]])
    inv = np.linalg.inv(fwd)
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    src_y = inv[0, 0] * (yy - cy) + inv[0, 1] * (xx - cx) + cy
    src_x = inv[1, 0] * (yy - cy) + inv[1, 1] * (xx - cx) + cx
    if elastic_field is not None:
        src_y = src_y + elastic_field[..., 0]
        src_x = src_x + elastic_field[..., 1]
    return _bilinear_sample(out, src_y, src_x)


def make_variant(img, image_id, variant_id, seed, max_angle=15.0,
                 max_shear=0.1, elastic_px=2.5):
    """Deterministic augmentation variant keyed by (image id, variant id)."""
    rng = rng_for(seed, STREAM_AUGMENT, image_id, variant_id)
    angle = float(rng.uniform(-max_angle, max_angle))
    shear = float(rng.uniform(-max_shear, max_shear))
    flip = bool(rng.integers(0, 2))
    field = _box_blur(rng.uniform(-1.0, 1.0, size=img.shape[:2] + (2,)), 4)
    peak = np.abs(field).max()
    field = field * (elastic_px / peak) if peak > 0 else field
    return np.clip(warp_image(img, angle, shear, flip, field), 0.0, 1.0)


def augment_dataset(root, out_dir, fold, seed):
    """Materialize a fold-times-larger training split; test split is copied.

    fold=1 reproduces the dataset unchanged. Variant v of train image i
    is keyed by (seed, i, v), so reruns are byte-identical.
    """
    if fold < 1:
        raise InvalidArgumentError(f"fold must be >= 1, got {fold}")
    data = load_dataset(root)
    os.makedirs(out_dir, exist_ok=True)
    for label in np.unique(data.labels):
        os.makedirs(os.path.join(out_dir, f"class_{label}"), exist_ok=True)
    rows = []
    for img, label, image_id, rel, split in zip(
            data.images, data.labels, data.ids, data.paths, data.split):
        _write_png(os.path.join(out_dir, rel), img)
        rows.append((rel, int(label), split))
        if split != "train":
            continue
        for v in range(1, fold):
            stem, ext = os.path.splitext(rel)
            vrel = f"{stem}_v{v}{ext}"
            _write_png(os.path.join(out_dir, vrel),
                       make_variant(img, int(image_id), v, seed))
            rows.append((vrel, int(label), split))
    with open(os.path.join(out_dir, "split.csv"), "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["path", "label", "split"])
        writer.writerows(rows)
    return rows
