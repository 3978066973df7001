"""Dataset abstraction, episodic sampling, and image augmentation.

An episode is K classes drawn without replacement from one split, with
N support and M query items per class, drawn without replacement from
that class's items. Sampling is a pure function of the generator handed
in, and evaluation derives one generator per episode index, so results
cannot depend on thread scheduling.

Augmentation follows the usual recipe: random resized crop (area fraction
in [0.5, 1], aspect in [3/4, 4/3], bilinear), horizontal flip at p=0.5,
then brightness/contrast/saturation factors in [0.8, 1.2] applied in that
fixed order, clamped to [0, 1]. The random draw and the deterministic
application are split (`sample_augment_params` / `apply_augment`) so the
identity configuration is directly constructible in tests.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import CapacityError, DimensionError, ParameterError

SPLITS = ("train", "val", "test")


@dataclass
class ClassRecord:
    class_id: int
    label: str
    items: np.ndarray  # (n_items, 3, H, W) float32 in [0, 1]
    semantic: np.ndarray | None = None  # synthetic datasets carry a vector

    @property
    def n_items(self):
        return self.items.shape[0]


@dataclass
class Dataset:
    classes: list
    splits: dict = field(default_factory=dict)  # split name -> tuple of class ids

    def __post_init__(self):
        labels = [c.label for c in self.classes]
        if len(set(labels)) != len(labels):
            dupes = sorted({l for l in labels if labels.count(l) > 1})
            raise ParameterError(f"class labels must be unique, repeated: {dupes}")
        for i, c in enumerate(self.classes):
            if c.class_id != i:
                raise ParameterError(f"class ids must be dense, got {c.class_id} at index {i}")
        seen = {}
        for name, ids in self.splits.items():
            for cid in ids:
                if cid in seen:
                    raise ParameterError(
                        f"class {cid} appears in splits {seen[cid]!r} and {name!r}"
                    )
                seen[cid] = name

    def split_class_ids(self, split):
        if split not in self.splits:
            raise ParameterError(f"unknown split {split!r}, have {sorted(self.splits)}")
        return self.splits[split]

    def by_label(self, label):
        for c in self.classes:
            if c.label == label:
                return c
        raise ParameterError(f"no class labeled {label!r}")


@dataclass
class Episode:
    support_images: np.ndarray  # (K*N, 3, H, W)
    support_labels: np.ndarray  # (K*N,) episode class indices, class-major
    query_images: np.ndarray  # (K*M, 3, H, W)
    query_labels: np.ndarray
    class_map: tuple  # episode class index -> dataset class id

    @property
    def k(self):
        return len(self.class_map)


def sample_episode(ds, K, N, M, rng, split="train"):
    """Draw one K-way N-shot episode with M queries per class.

    Draw order is fixed (classes first, then items per episode class in
    order), so a given generator state always yields the same episode.
    """
    if K < 2 or N < 1 or M < 1:
        raise ParameterError(f"episode shape K={K}, N={N}, M={M} is not sensible")
    ids = ds.split_class_ids(split)
    if len(ids) < K:
        raise CapacityError(f"split {split!r} has {len(ids)} classes, episode needs K={K}")
    chosen = rng.choice(len(ids), size=K, replace=False)
    class_map = tuple(ids[int(i)] for i in chosen)
    support, query = [], []
    for cid in class_map:
        rec = ds.classes[cid]
        need = N + M
        if rec.n_items < need:
            raise CapacityError(
                f"class {rec.label!r} has {rec.n_items} items, episode needs N+M={need}"
            )
        picks = rng.choice(rec.n_items, size=need, replace=False)
        support.append(rec.items[picks[:N]])
        query.append(rec.items[picks[N:]])
    return Episode(
        support_images=np.concatenate(support, axis=0),
        support_labels=np.repeat(np.arange(K), N),
        query_images=np.concatenate(query, axis=0),
        query_labels=np.repeat(np.arange(K), M),
        class_map=class_map,
    )


# ---------------------------------------------------------------------------
# augmentation


@dataclass
class AugmentParams:
    top: int
    left: int
    crop_h: int
    crop_w: int
    flip: bool
    brightness: float
    contrast: float
    saturation: float


def identity_params(h, w):
    return AugmentParams(0, 0, h, w, False, 1.0, 1.0, 1.0)


def sample_augment_params(rng, h, w):
    """One draw of crop window, flip, and jitter factors for an HxW image."""
    area = h * w * rng.uniform(0.5, 1.0)
    ratio = np.exp(rng.uniform(np.log(3.0 / 4.0), np.log(4.0 / 3.0)))
    cw = int(np.clip(round(np.sqrt(area * ratio)), 1, w))
    ch = int(np.clip(round(np.sqrt(area / ratio)), 1, h))
    top = int(rng.integers(0, h - ch + 1))
    left = int(rng.integers(0, w - cw + 1))
    flip = bool(rng.uniform() < 0.5)
    b, c, s = rng.uniform(0.8, 1.2, size=3)
    return AugmentParams(top, left, ch, cw, flip, float(b), float(c), float(s))


_LUMA = np.array([0.299, 0.587, 0.114])


def apply_augment(img, params, target):
    """Deterministically apply one augmentation draw to a (3, H, W) image."""
    crop = img[
        :,
        params.top : params.top + params.crop_h,
        params.left : params.left + params.crop_w,
    ]
    out = bilinear_resize(crop, target, target)
    if params.flip:
        out = out[:, :, ::-1]
    out = out * params.brightness
    if params.contrast != 1.0:
        gray_mean = float((_LUMA @ out.reshape(3, -1)).mean())
        out = params.contrast * out + (1.0 - params.contrast) * gray_mean
    if params.saturation != 1.0:
        gray = np.tensordot(_LUMA, out, axes=(0, 0))[None]
        out = params.saturation * out + (1.0 - params.saturation) * gray
    return np.clip(out, 0.0, 1.0).astype(img.dtype, copy=False)


def augment(img, rng, target=84):
    """Random train-time transform of a (3, H, W) image to (3, target, target)."""
    c, h, w = img.shape
    if c != 3:
        raise DimensionError(f"augment expects a (3, H, W) image, got {img.shape}")
    if h < 16 or w < 16:
        raise DimensionError(f"augment needs at least 16x16 input, got {h}x{w}")
    return apply_augment(img, sample_augment_params(rng, h, w), target)


def eval_transform(img, target=84):
    """Deterministic eval-time transform: center square crop, then resize."""
    _, h, w = img.shape
    if (h, w) == (target, target):
        return img
    side = min(h, w)
    top = (h - side) // 2
    left = (w - side) // 2
    return bilinear_resize(img[:, top : top + side, left : left + side], target, target)


def bilinear_resize(img, out_h, out_w):
    """Half-pixel-center bilinear resize of a (C, H, W) array."""
    c, h, w = img.shape
    if (h, w) == (out_h, out_w):
        return img.copy()
    ys = np.clip((np.arange(out_h) + 0.5) * (h / out_h) - 0.5, 0, h - 1)
    xs = np.clip((np.arange(out_w) + 0.5) * (w / out_w) - 0.5, 0, w - 1)
    y0 = np.floor(ys).astype(int)
    x0 = np.floor(xs).astype(int)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    fy = (ys - y0)[None, :, None]
    fx = (xs - x0)[None, None, :]
    ia = img[:, y0[:, None], x0[None, :]]
    ib = img[:, y0[:, None], x1[None, :]]
    ic = img[:, y1[:, None], x0[None, :]]
    id_ = img[:, y1[:, None], x1[None, :]]
    top = ia * (1 - fx) + ib * fx
    bot = ic * (1 - fx) + id_ * fx
    return top * (1 - fy) + bot * fy
