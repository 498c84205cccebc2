"""Qualitative exports: prototype heatmaps and vector tables."""

import csv
import os

import numpy as np
from PIL import Image, ImageDraw

from . import autodiff as ad
from .autodiff import InvalidArgumentError
from .data import _bilinear_sample


def bilinear_upsample(map2d, size):
    """Resize a 2-d map to (size, size), corners aligned."""
    h, w = map2d.shape
    if h == 1 and w == 1:
        return np.full((size, size), float(map2d[0, 0]))
    yy = np.linspace(0.0, h - 1.0, size)
    xx = np.linspace(0.0, w - 1.0, size)
    grid_y, grid_x = np.meshgrid(yy, xx, indexing="ij")
    return _bilinear_sample(map2d[..., None], grid_y, grid_x)[..., 0]


def _normalize01(map2d):
    lo = float(map2d.min())
    hi = float(map2d.max())
    if hi - lo <= 0:
        return np.zeros_like(map2d)
    return (map2d - lo) / (hi - lo)


def heatmap_overlay(image, map2d):
    """Blend a red heat layer over an RGB image in [0, 1]."""
    size = image.shape[0]
    heat = _normalize01(bilinear_upsample(map2d, size))
    alpha = (0.65 * heat)[..., None]
    red = np.array([1.0, 0.1, 0.05])
    return np.clip((1.0 - alpha) * image + alpha * red, 0.0, 1.0)


def _annotated_png(path, overlay, lines):
    """Write the overlay with a caption strip underneath."""
    size = overlay.shape[0]
    img = Image.fromarray(
        np.round(np.clip(overlay, 0, 1) * 255).astype(np.uint8), mode="RGB")
    strip = 12 * len(lines) + 4
    canvas = Image.new("RGB", (size, size + strip), (22, 22, 22))
    canvas.paste(img, (0, 0))
    draw = ImageDraw.Draw(canvas)
    for i, text in enumerate(lines):
        draw.text((2, size + 2 + 12 * i), text, fill=(230, 230, 230))
    canvas.save(path, format="PNG")


def export_heatmaps(model, image, out_dir, top_n=5, tag="image"):
    """Write per-prototype similarity heatmaps for one input image.

    Exports the top_n prototypes by modulated similarity score, each
    upsampled to input resolution and captioned with prototype id,
    class, and score, plus the attention-map overlay. top_n larger
    than the bank clamps. Returns the manifest records.
    """
    if top_n < 1:
        raise InvalidArgumentError(f"top_n must be >= 1, got {top_n}")
    if model.bank is None:
        raise InvalidArgumentError("model has no prototype branch to export")
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 3:
        raise InvalidArgumentError(
            f"expected one (H, W, C) image, got shape {image.shape}")
    os.makedirs(out_dir, exist_ok=True)
    with ad.no_grad():
        fw = model.forward(image[None])
    scores = fw.similarity.scores.data[0]
    maps = fw.similarity.maps.data[0]
    order = np.argsort(-scores, kind="stable")[:min(top_n, model.bank.m)]

    records = []
    for rank, l in enumerate(order):
        proto_class = int(model.bank.class_of[l])
        path = os.path.join(out_dir, f"{tag}_rank{rank}_p{int(l):03d}.png")
        overlay = heatmap_overlay(image, maps[:, :, l])
        _annotated_png(path, overlay, [f"p{int(l)} class{proto_class}",
                                       f"s={scores[l]:.4f}"])
        records.append({"prototype": int(l), "class": proto_class,
                        "score": float(scores[l]), "path": path})

    att_path = os.path.join(out_dir, f"{tag}_attention.png")
    _annotated_png(att_path, heatmap_overlay(image, fw.attention.data[0]),
                   ["attention"])

    manifest = os.path.join(out_dir, f"{tag}_scores.csv")
    with open(manifest, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["prototype", "class", "score", "path"])
        for rec in records:
            writer.writerow([rec["prototype"], rec["class"],
                             repr(rec["score"]), os.path.basename(rec["path"])])
    return records


def projection_attention_mass(model, dataset):
    """Attention weight at each prototype's projection site.

    Prototypes that were never projected get nan.
    """
    bank = model.bank
    mass = np.full(bank.m, np.nan)
    by_image = {}
    for l in range(bank.m):
        img_id, row, col = bank.provenance[l]
        if img_id >= 0:
            by_image.setdefault(int(img_id), []).append(
                (l, int(row), int(col)))
    for img_id, entries in by_image.items():
        index = np.flatnonzero(dataset.ids == img_id)
        if len(index) == 0:
            raise InvalidArgumentError(
                f"projection image id {img_id} is not in the dataset")
        with ad.no_grad():
            fw = model.forward(dataset.images[index[:1]])
        for l, row, col in entries:
            mass[l] = float(fw.attention.data[0, row, col])
    return mass


def export_prototype_vectors(model, dataset, out_path):
    """One CSV row per prototype: id, class, vector, attention mass.

    Vector entries are written with repr so the stored values
    round-trip exactly.
    """
    if model.bank is None:
        raise InvalidArgumentError("model has no prototype branch to export")
    bank = model.bank
    mass = projection_attention_mass(model, dataset)
    with open(out_path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["prototype", "class"]
                        + [f"z{j}" for j in range(bank.dim)]
                        + ["attention_mass"])
        for l in range(bank.m):
            writer.writerow(
                [l, int(bank.class_of[l])]
                + [repr(float(v)) for v in bank.P.data[l]]
                + [repr(float(mass[l]))])
    return out_path


def read_prototype_vectors(path):
    """Load the CSV back: (vectors (m, D), classes, masses)."""
    with open(path, "r", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        dim = len(header) - 3
        vectors, classes, masses = [], [], []
        for row in reader:
            classes.append(int(row[1]))
            vectors.append([float(v) for v in row[2:2 + dim]])
            masses.append(float(row[-1]))
    return (np.asarray(vectors, dtype=np.float64),
            np.asarray(classes, dtype=np.int64),
            np.asarray(masses, dtype=np.float64))
