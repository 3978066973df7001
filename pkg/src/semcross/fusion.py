"""Combining visual features with projected semantic features.

Four variants, exactly one active per model:

- cam: cross-attention where the semantic patch sequence queries the
  visual patches. Keys and values are affine projections of the visual
  patches into the semantic dimension; attention is a scaled dot product
  softmaxed over the key axis, and the attended values are reshaped back
  into a feature map of the semantic dimension.
- squeeze_excitation: channel re-weighting of the visual map from its own
  global average, no semantic input.
- concat: channel-wise stack of the visual map and the unpatchified
  semantic sequence.
- none: identity on the visual map.

All forwards accept a single feature map (C, h, w) or a batch
(B, C, h, w) and run on graph tensors. The batched patch-level helpers
(`affine_patches`, `attend`) are shared with the model's channels-last
path, so the reference functions here and the training hot path cannot
drift apart.
"""

from __future__ import annotations

from dataclasses import dataclass

from . import tensor as T
from .errors import DimensionError, ParameterError
from .tensor import Tensor

VARIANTS = ("none", "cam", "squeeze_excitation", "concat")


@dataclass
class CamParams:
    """Key/value projections into the semantic dimension plus the logit scale."""

    key_w: Tensor  # (l_out, l_inter)
    key_b: Tensor  # (l_out,)
    value_w: Tensor  # (l_out, l_inter)
    value_b: Tensor  # (l_out,)
    scale: float

    def __post_init__(self):
        if self.scale <= 0:
            raise ParameterError(f"attention scale must be positive, got {self.scale}")
        if self.key_w.shape != self.value_w.shape:
            raise DimensionError(
                f"key and value projections disagree: {self.key_w.shape} vs {self.value_w.shape}"
            )


@dataclass
class SeParams:
    fc1_w: Tensor  # (C // r, C)
    fc1_b: Tensor
    fc2_w: Tensor  # (C, C // r)
    fc2_b: Tensor


def default_scale(l_out):
    """Standard attention scaling, the center of the sweep range."""
    return 1.0 / (l_out**0.5)


def _is_single(e):
    if e.data.ndim == 3:
        return True
    if e.data.ndim == 4:
        return False
    raise DimensionError(f"feature map must be (C, h, w) or (B, C, h, w), got {e.shape}")


def patchify(e):
    """(C, h, w) -> (h*w, C) in row-major spatial order; batched likewise."""
    e = e if isinstance(e, Tensor) else Tensor(e)
    if _is_single(e):
        c, h, w = e.data.shape
        return T.reshape(T.permute(e, (1, 2, 0)), (h * w, c))
    b, c, h, w = e.data.shape
    return T.reshape(T.permute(e, (0, 2, 3, 1)), (b, h * w, c))


def unpatchify(p, h, w):
    """Inverse of patchify: (h*w, C) -> (C, h, w); batched likewise."""
    p = p if isinstance(p, Tensor) else Tensor(p)
    if p.data.ndim == 2:
        hw, c = p.data.shape
        if hw != h * w:
            raise DimensionError(f"unpatchify: {hw} patches cannot fill {h}x{w}")
        return T.permute(T.reshape(p, (h, w, c)), (2, 0, 1))
    if p.data.ndim == 3:
        b, hw, c = p.data.shape
        if hw != h * w:
            raise DimensionError(f"unpatchify: {hw} patches cannot fill {h}x{w}")
        return T.permute(T.reshape(p, (b, h, w, c)), (0, 3, 1, 2))
    raise DimensionError(f"patch sequence must be (hw, C) or (B, hw, C), got {p.shape}")


def affine_patches(patches, w, b):
    """Apply one affine map to every patch row; works batched or not."""
    return T.add(T.matmul(patches, T.transpose_last(w)), b)


def attend(query, key, value, scale):
    """softmax(query . key^T * scale) over the key axis, then weight values."""
    logits = T.scale(T.matmul(query, T.transpose_last(key)), scale)
    att = T.softmax(logits, axis=-1)
    return T.matmul(att, value), att


def cam_attention(e_main, e_aux, params):
    """The attention matrix alone, for inspection and invariant tests."""
    patches = patchify(e_main)
    key = affine_patches(patches, params.key_w, params.key_b)
    query = e_aux if isinstance(e_aux, Tensor) else Tensor(e_aux)
    _, att = attend(query, key, affine_patches(patches, params.value_w, params.value_b), params.scale)
    return att


def cam_forward(e_main, e_aux, params):
    """Semantic cross-attention over visual patches.

    e_main (C, h, w) or (B, C, h, w); e_aux (h*w, l_out) or batched. The
    output has the semantic dimension as its channel axis: (l_out, h, w).
    """
    e_main = e_main if isinstance(e_main, Tensor) else Tensor(e_main)
    e_aux = e_aux if isinstance(e_aux, Tensor) else Tensor(e_aux)
    single = _is_single(e_main)
    h, w = e_main.data.shape[-2:]
    hw = h * w
    if e_aux.data.shape[-2] != hw:
        raise DimensionError(
            f"cam_forward: {e_aux.data.shape[-2]} semantic patches for {h}x{w} visual map"
        )
    if single != (e_aux.data.ndim == 2):
        raise DimensionError("cam_forward: mixed single and batched inputs")
    patches = patchify(e_main)
    key = affine_patches(patches, params.key_w, params.key_b)
    value = affine_patches(patches, params.value_w, params.value_b)
    out, _ = attend(e_aux, key, value, params.scale)
    return unpatchify(out, h, w)


def se_forward(e_main, params):
    """Squeeze-excitation channel gate; shape-preserving."""
    e_main = e_main if isinstance(e_main, Tensor) else Tensor(e_main)
    single = _is_single(e_main)
    x = T.reshape(e_main, (1,) + e_main.data.shape) if single else e_main
    pooled = T.mean(x, axis=(2, 3))  # (B, C)
    z = T.relu(affine_patches(pooled, params.fc1_w, params.fc1_b))
    s = T.sigmoid(affine_patches(z, params.fc2_w, params.fc2_b))
    gate = T.reshape(s, s.data.shape + (1, 1))
    out = T.mul(x, gate)
    return T.reshape(out, out.data.shape[1:]) if single else out


def concat_fusion(e_main, e_aux):
    """Channel-wise stack: (l_inter + l_out, h, w)."""
    e_main = e_main if isinstance(e_main, Tensor) else Tensor(e_main)
    e_aux = e_aux if isinstance(e_aux, Tensor) else Tensor(e_aux)
    single = _is_single(e_main)
    h, w = e_main.data.shape[-2:]
    if e_aux.data.shape[-2] != h * w:
        raise DimensionError(
            f"concat_fusion: {e_aux.data.shape[-2]} semantic patches for {h}x{w} visual map"
        )
    sem = unpatchify(e_aux, h, w)
    return T.concat(e_main, sem, axis=0 if single else 1)
