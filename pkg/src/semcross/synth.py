"""Synthetic episodic benchmark with controllable visual/semantic structure.

Each class renders a colored silhouette (ellipse, rectangle, or diamond)
carrying a sinusoidal stripe texture whose frequency falls in a low or a
high band. Class semantics are built from the *attributes*: every
(silhouette, frequency band) combination owns a shared direction in the
semantic space, and each class sits at that direction plus a small
private offset. Color deliberately never enters the semantics: it is the
easy visual shortcut.

Two controlled failure modes:

- visual twins: pairs of classes that share color, silhouette, scale and
  orientation but sit in opposite frequency bands. They are nearly
  identical in pixel space yet far apart semantically, so a model that
  leans on color cannot tell them apart while one aligned with the
  semantic axes can.
- bimodal classes: a single label rendered in two distinct visual modes,
  so its item distribution is not unimodal in pixel space.

Twin pairs are assigned to splits in the order test, val, train (repeating),
which guarantees the held-out splits contain confusable pairs first.
Bimodal classes are drawn from the remaining train classes.

Everything is derived from one seed through a fixed draw order, so the
same config and seed reproduce the dataset bit for bit.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .episodes import ClassRecord, Dataset
from .errors import ConfigError

SHAPES = ("ellipse", "rectangle", "diamond")

# stripe frequency bands (cycles across the unit coordinate span)
FREQ_BANDS = {"low": (2.2, 2.8), "high": (4.2, 4.8)}


@dataclass
class SynthConfig:
    n_classes: int = 16
    items_per_class: int = 40
    image_size: int = 84
    twin_fraction: float = 0.5
    bimodal_fraction: float = 0.125
    semantic_dim: int = 32
    train_classes: int = 6
    val_classes: int = 5
    test_classes: int = 5
    noise: float = 0.02
    group_offset: float = 0.25

    def validate(self):
        if self.n_classes < 4:
            raise ConfigError(f"need at least 4 classes, got {self.n_classes}")
        if self.items_per_class < 2:
            raise ConfigError(f"need at least 2 items per class, got {self.items_per_class}")
        if self.image_size < 16:
            raise ConfigError(f"image size must be >= 16, got {self.image_size}")
        for name in ("twin_fraction", "bimodal_fraction"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ConfigError(f"{name} must be in [0, 1], got {v}")
        if self.semantic_dim < 2:
            raise ConfigError(f"semantic dim must be >= 2, got {self.semantic_dim}")
        total = self.train_classes + self.val_classes + self.test_classes
        if total != self.n_classes:
            raise ConfigError(
                f"split sizes {self.train_classes}+{self.val_classes}+{self.test_classes}"
                f" = {total} do not cover n_classes = {self.n_classes}"
            )
        if min(self.train_classes, self.val_classes, self.test_classes) < 2:
            raise ConfigError("every split needs at least 2 classes to form an episode")
        if self.noise < 0:
            raise ConfigError(f"noise must be >= 0, got {self.noise}")


@dataclass
class _ClassSpec:
    shape: str
    band: str
    freq: float
    color: np.ndarray
    scale: float
    orient: float
    twin_of: int | None = None
    bimodal: bool = False
    # second render mode, only for bimodal classes
    alt_shape: str | None = None
    alt_color: np.ndarray | None = None
    alt_scale: float | None = None


def _assign_splits(config):
    # class ids are dense: train block, then val, then test
    t, v = config.train_classes, config.val_classes
    return {
        "train": tuple(range(t)),
        "val": tuple(range(t, t + v)),
        "test": tuple(range(t + v, config.n_classes)),
    }


def _pick_twin_pairs(config, splits, rng):
    """Pair up classes within the held-out splits only.

    Twins never land in the train split: the band distinction they embody
    must stay unnecessary for the training task, so that only the semantic
    branch carries it. That is the mismatch the benchmark exists to probe.
    """
    n_pairs = int(round(config.twin_fraction * config.n_classes / 2))
    pools = {s: list(splits[s]) for s in splits}
    for s in pools:
        rng.shuffle(pools[s])
    pairs = []
    order = ("test", "val")
    i = 0
    while len(pairs) < n_pairs:
        placed = False
        for _ in range(len(order)):
            s = order[i % len(order)]
            i += 1
            if len(pools[s]) >= 2:
                pairs.append((pools[s].pop(), pools[s].pop()))
                placed = True
                break
        if not placed:
            break  # no split has room left; cap silently at what fits
    return pairs, pools


def _build_specs(config, rng):
    splits = _assign_splits(config)
    pairs, pools = _pick_twin_pairs(config, splits, rng)

    specs = [None] * config.n_classes
    for cid in range(config.n_classes):
        shape = SHAPES[cid % len(SHAPES)]
        band = "low" if rng.uniform() < 0.5 else "high"
        lo, hi = FREQ_BANDS[band]
        specs[cid] = _ClassSpec(
            shape=shape,
            band=band,
            freq=float(rng.uniform(lo, hi)),
            color=0.25 + 0.7 * rng.uniform(size=3),
            scale=float(rng.uniform(0.45, 0.7)),
            orient=float(rng.uniform(0.0, np.pi)),
        )

    # twins copy everything visual and flip the frequency band
    for a, b in pairs:
        sa, sb = specs[a], specs[b]
        sb.shape = sa.shape
        sb.color = sa.color.copy()
        sb.scale = sa.scale
        sb.orient = sa.orient
        sb.band = "high" if sa.band == "low" else "low"
        lo, hi = FREQ_BANDS[sb.band]
        sb.freq = float(rng.uniform(lo, hi))
        sa.twin_of, sb.twin_of = b, a

    n_bimodal = int(round(config.bimodal_fraction * config.n_classes))
    free_train = sorted(pools["train"])
    for cid in free_train[:n_bimodal]:
        s = specs[cid]
        s.bimodal = True
        s.alt_shape = SHAPES[(SHAPES.index(s.shape) + 1) % len(SHAPES)]
        # half-cycle shift in the color cube moves every channel by 0.35,
        # so the two modes are unambiguously distinct in pixel space
        unit = (s.color - 0.25) / 0.7
        s.alt_color = 0.25 + 0.7 * ((unit + 0.5) % 1.0)
        s.alt_scale = 0.45 + (0.7 - s.scale)  # reflect within the scale range
    return specs, splits


def _semantic_vectors(config, specs, rng):
    """Group direction per (shape, band), plus a small per-class offset."""
    groups = {}
    for shape in SHAPES:
        for band in FREQ_BANDS:
            groups[(shape, band)] = rng.normal(0.0, 1.0, size=config.semantic_dim)
    vecs = []
    for s in specs:
        off = rng.normal(0.0, 1.0, size=config.semantic_dim)
        vecs.append(groups[(s.shape, s.band)] + config.group_offset * off)
    return [v.astype(np.float64) for v in vecs]


def _render(size, shape, color, freq, cx, cy, scale, orient, phase, bg, noise, rng):
    ax = (np.arange(size) + 0.5) / size * 2.0 - 1.0
    yy = ax[:, None]
    xx = ax[None, :]
    u = (xx - cx) / scale
    v = (yy - cy) / scale
    if shape == "ellipse":
        d = u * u + (v / 0.7) ** 2
        mask = np.clip((1.0 - d) / 0.15, 0.0, 1.0)
    elif shape == "rectangle":
        d = np.maximum(np.abs(u), np.abs(v) / 0.7)
        mask = np.clip((1.0 - d) / 0.10, 0.0, 1.0)
    elif shape == "diamond":
        d = np.abs(u) + np.abs(v) / 0.8
        mask = np.clip((1.0 - d) / 0.12, 0.0, 1.0)
    else:
        raise ConfigError(f"unknown silhouette {shape!r}")
    # moderate stripe contrast: enough to read the frequency, not so much
    # that random phase dominates within-class pixel variance
    axis = np.cos(orient) * xx + np.sin(orient) * yy
    texture = 0.75 + 0.25 * np.sin(2.0 * np.pi * freq * axis + phase)
    img = bg * (1.0 - mask)[None] + (mask * texture)[None] * color[:, None, None]
    if noise > 0:
        img = img + rng.normal(0.0, noise, size=img.shape)
    return np.clip(img, 0.0, 1.0).astype(np.float32)


def _render_class(config, spec, rng):
    items = np.empty(
        (config.items_per_class, 3, config.image_size, config.image_size), dtype=np.float32
    )
    for i in range(config.items_per_class):
        # bimodal classes alternate modes by item index so both modes
        # appear in every support/query set of realistic size
        alt = spec.bimodal and (i % 2 == 1)
        shape = spec.alt_shape if alt else spec.shape
        color = spec.alt_color if alt else spec.color
        scale = spec.alt_scale if alt else spec.scale
        items[i] = _render(
            size=config.image_size,
            shape=shape,
            color=color,
            freq=spec.freq * float(rng.uniform(0.96, 1.04)),
            cx=float(rng.uniform(-0.12, 0.12)),
            cy=float(rng.uniform(-0.12, 0.12)),
            scale=scale * float(rng.uniform(0.92, 1.08)),
            orient=spec.orient + float(rng.uniform(-0.1, 0.1)),
            phase=float(rng.uniform(0.0, 2.0 * np.pi)),
            bg=float(rng.uniform(0.15, 0.25)),
            noise=config.noise,
            rng=rng,
        )
    return items


def generate_synthetic(config, seed):
    """Build the full dataset (images, labels, splits, semantic vectors)."""
    config.validate()
    rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(71,)))
    specs, splits = _build_specs(config, rng)
    vecs = _semantic_vectors(config, specs, rng)
    classes = []
    for cid, spec in enumerate(specs):
        label = f"{spec.shape}{cid:02d}"
        items = _render_class(config, spec, rng)
        classes.append(ClassRecord(class_id=cid, label=label, items=items, semantic=vecs[cid]))
    return Dataset(classes=classes, splits=splits)


@dataclass
class ClassDescription:
    label: str
    split: str
    shape: str
    band: str
    freq: float
    twin_of: int | None
    bimodal: bool


def describe_synthetic(config, seed):
    """Per-class structure (twins, modes, bands) for the same config and seed.

    Replays exactly the draws `generate_synthetic` makes before rendering,
    so the descriptions match the generated dataset class for class.
    """
    config.validate()
    rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(71,)))
    specs, splits = _build_specs(config, rng)
    split_of = {cid: s for s, ids in splits.items() for cid in ids}
    return [
        ClassDescription(
            label=f"{spec.shape}{cid:02d}",
            split=split_of[cid],
            shape=spec.shape,
            band=spec.band,
            freq=spec.freq,
            twin_of=spec.twin_of,
            bimodal=spec.bimodal,
        )
        for cid, spec in enumerate(specs)
    ]


def vectors_text(ds, precision=8):
    """Dataset semantics as text, one `token v1 v2 ...` row per class."""
    lines = []
    for c in ds.classes:
        if c.semantic is None:
            raise ConfigError(f"class {c.label!r} has no semantic vector")
        vals = " ".join(f"{v:.{precision}f}" for v in c.semantic)
        lines.append(f"{c.label} {vals}")
    return "\n".join(lines) + "\n"
