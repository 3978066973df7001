"""On-disk dataset layout: `root/{train,val,test}/<label>/<item files>`.

Items are binary PPM (P6, 8-bit) for interchange, or single-entry tensor
containers when exact float32 values must round-trip. Class labels come
from directory names; items are ordered by filename so a directory tree
always loads into the same Dataset.
"""

from __future__ import annotations

import os

import numpy as np

from .checkpoint import read_tensors, write_tensors
from .episodes import SPLITS, ClassRecord, Dataset
from .errors import FormatError


def read_ppm(path):
    """Read a binary (P6) 8-bit PPM file into a (3, H, W) float32 in [0, 1]."""
    with open(path, "rb") as f:
        data = f.read()
    fields, pos = [], 0
    while len(fields) < 4:
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        if pos < len(data) and data[pos : pos + 1] == b"#":
            while pos < len(data) and data[pos : pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace():
            pos += 1
        if pos == start:
            raise FormatError(f"{path}: truncated header")
        fields.append(data[start:pos])
    pos += 1  # single whitespace byte after maxval, then raster
    magic, w_s, h_s, maxval_s = fields
    if magic != b"P6":
        raise FormatError(f"{path}: not a binary PPM (magic {magic!r})")
    try:
        w, h, maxval = int(w_s), int(h_s), int(maxval_s)
    except ValueError:
        raise FormatError(f"{path}: non-numeric header fields") from None
    if w < 1 or h < 1:
        raise FormatError(f"{path}: bad dimensions {w}x{h}")
    if maxval != 255:
        raise FormatError(f"{path}: only 8-bit PPM supported, maxval {maxval}")
    raster = data[pos : pos + w * h * 3]
    if len(raster) != w * h * 3:
        raise FormatError(f"{path}: raster has {len(raster)} bytes, expected {w * h * 3}")
    arr = np.frombuffer(raster, dtype=np.uint8).reshape(h, w, 3)
    return (arr.transpose(2, 0, 1).astype(np.float32) / 255.0).copy()


def write_ppm(path, img):
    """Write a (3, H, W) array in [0, 1] as binary 8-bit PPM."""
    if img.ndim != 3 or img.shape[0] != 3:
        raise FormatError(f"expected a (3, H, W) image, got shape {img.shape}")
    _, h, w = img.shape
    u8 = np.clip(np.rint(np.asarray(img) * 255.0), 0, 255).astype(np.uint8)
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        f.write(u8.transpose(1, 2, 0).tobytes())


def _read_item(path):
    if path.endswith(".ppm"):
        return read_ppm(path)
    if path.endswith(".sct1"):
        entries = read_tensors(path)
        if "image" not in entries:
            raise FormatError(f"{path}: container has no 'image' entry")
        img = entries["image"]
        if img.ndim != 3 or img.shape[0] != 3:
            raise FormatError(f"{path}: 'image' entry has shape {img.shape}, expected (3, H, W)")
        return img.astype(np.float32)
    raise FormatError(f"{path}: unknown item format")


def write_manifest(ds, root, codec="ppm"):
    """Materialize a Dataset under root/{train,val,test}/<label>/."""
    if codec not in ("ppm", "sct1"):
        raise FormatError(f"unknown item codec {codec!r}")
    for split in SPLITS:
        os.makedirs(os.path.join(root, split), exist_ok=True)
        for cid in ds.splits.get(split, ()):
            rec = ds.classes[cid]
            d = os.path.join(root, split, rec.label)
            os.makedirs(d, exist_ok=True)
            for i in range(rec.n_items):
                path = os.path.join(d, f"item{i:04d}.{codec}")
                if codec == "ppm":
                    write_ppm(path, rec.items[i])
                else:
                    write_tensors(path, {"image": rec.items[i]})


def load_manifest(root):
    """Load a directory tree into a Dataset. Splits are directory names."""
    if not os.path.isdir(root):
        raise FormatError(f"{root}: not a directory")
    classes = []
    splits = {}
    for split in SPLITS:
        split_dir = os.path.join(root, split)
        if not os.path.isdir(split_dir):
            raise FormatError(f"{split_dir}: missing split directory")
        ids = []
        for label in sorted(os.listdir(split_dir)):
            class_dir = os.path.join(split_dir, label)
            if not os.path.isdir(class_dir):
                continue
            names = sorted(n for n in os.listdir(class_dir) if not n.startswith("."))
            if not names:
                raise FormatError(f"{class_dir}: class directory has no items")
            items = []
            for n in names:
                path = os.path.join(class_dir, n)
                try:
                    items.append(_read_item(path))
                except FormatError:
                    raise
                except OSError as e:
                    raise FormatError(f"{path}: unreadable item ({e})") from e
            shapes = {it.shape for it in items}
            if len(shapes) > 1:
                raise FormatError(f"{class_dir}: items disagree on shape: {sorted(shapes)}")
            cid = len(classes)
            classes.append(ClassRecord(class_id=cid, label=label, items=np.stack(items)))
            ids.append(cid)
        splits[split] = tuple(ids)
    return Dataset(classes=classes, splits=splits)
