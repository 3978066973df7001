"""The shared embedding network and the auxiliary projection head.

Four identical blocks (3x3 conv pad 1 -> batch norm -> relu -> 2x2 max
pool) with filter counts 64, 64, 128, 128 halve the spatial size each
time, so an 84x84 image becomes a 128-channel 5x5 feature map. The
auxiliary head maps each spatial position (patch) of that map into the
word-vector dimension with one shared affine layer, and the auxiliary
prediction pools the projected patches by summation before a temperature
softmax.

Both tasks read the same parameter instance; that hard sharing is the
point of the architecture, not an implementation convenience.

The training hot path keeps activations channels-last from input to
feature map (``embed_nhwc``); ``embed`` is the channel-first view of the
same computation.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import DimensionError, ParameterError
from .fusion import affine_patches, patchify
from .seeding import named_rng
from .tensor import RunningStats, Tensor

CONV4_FILTERS = (64, 64, 128, 128)
L_INTER = CONV4_FILTERS[-1]


def glorot_uniform(rng, shape, fan_in, fan_out):
    """Centered uniform with half-width sqrt(6 / (fan_in + fan_out))."""
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


@dataclass
class ConvBlockParams:
    conv_w: Tensor  # (O, C, 3, 3)
    conv_b: Tensor  # (O,)
    bn_gamma: Tensor
    bn_beta: Tensor
    bn_stats: RunningStats

    @property
    def out_channels(self):
        return self.conv_w.data.shape[0]


@dataclass
class BackboneParams:
    """Conv blocks plus the auxiliary projection; one instance serves both tasks."""

    blocks: list
    aux_w: Tensor  # (l_out, l_inter)
    aux_b: Tensor  # (l_out,)
    filters: tuple = field(default=CONV4_FILTERS)

    @property
    def l_inter(self):
        return self.blocks[-1].out_channels

    @property
    def l_out(self):
        return self.aux_w.data.shape[0]


def init_conv_block(seed, name, in_channels, out_channels):
    rng = named_rng(seed, f"{name}.conv.w")
    w = glorot_uniform(
        rng, (out_channels, in_channels, 3, 3), fan_in=in_channels * 9, fan_out=out_channels * 9
    )
    return ConvBlockParams(
        conv_w=Tensor(w, requires_grad=True),
        conv_b=Tensor(np.zeros(out_channels), requires_grad=True),
        bn_gamma=Tensor(np.ones(out_channels), requires_grad=True),
        bn_beta=Tensor(np.zeros(out_channels), requires_grad=True),
        bn_stats=RunningStats.create(out_channels),
    )


def init_affine(seed, name, out_dim, in_dim):
    """(out_dim, in_dim) weight plus zero bias, seeded by parameter name."""
    rng = named_rng(seed, f"{name}.w")
    w = glorot_uniform(rng, (out_dim, in_dim), fan_in=in_dim, fan_out=out_dim)
    return Tensor(w, requires_grad=True), Tensor(np.zeros(out_dim), requires_grad=True)


def init_backbone(seed, l_out=300, filters=CONV4_FILTERS, in_channels=3):
    """Fresh backbone parameters. Each parameter draws from its own named
    stream, so two models sharing a seed initialize shared parameters
    identically no matter what other parameters either of them owns."""
    if len(filters) < 1:
        raise ParameterError("backbone needs at least one conv block")
    blocks = []
    prev = in_channels
    for i, n_filt in enumerate(filters, start=1):
        blocks.append(init_conv_block(seed, f"backbone.block{i}", prev, n_filt))
        prev = n_filt
    aux_w, aux_b = init_affine(seed, "aux.proj", l_out, prev)
    return BackboneParams(blocks=blocks, aux_w=aux_w, aux_b=aux_b, filters=tuple(filters))


def embed_nhwc(x, params, training):
    """Run the blocks on a channels-last batch (B, H, W, C_in) -> (B, h, w, l_inter)."""
    h = x
    for blk in params.blocks:
        h = T.conv2d_nhwc(h, blk.conv_w, blk.conv_b)
        h = T.batch_norm2d_nhwc(h, blk.bn_gamma, blk.bn_beta, blk.bn_stats, training)
        h = T.relu(h)
        h = T.max_pool2d_nhwc(h)
    return h


def embed(x, params, mode="eval"):
    """Embed (3, H, W) or (B, 3, H, W) into a channel-first feature map.

    The spatial size must survive one halving per block (>= 2^len(blocks)),
    which for the standard four blocks means >= 16.
    """
    if mode not in ("train", "eval"):
        raise ParameterError(f"embed mode must be 'train' or 'eval', got {mode!r}")
    x = x if isinstance(x, Tensor) else Tensor(x)
    single = x.data.ndim == 3
    if single:
        x = T.reshape(x, (1,) + x.data.shape)
    if x.data.ndim != 4:
        raise DimensionError(f"embed input must be (3, H, W) or (B, 3, H, W), got {x.shape}")
    b, c, hh, ww = x.data.shape
    expect_c = params.blocks[0].conv_w.data.shape[1]
    if c != expect_c:
        raise DimensionError(f"embed: input has {c} channels, backbone expects {expect_c}")
    min_side = 2 ** len(params.blocks)
    if hh < min_side or ww < min_side:
        raise DimensionError(
            f"embed: {hh}x{ww} input cannot survive {len(params.blocks)} poolings (needs >= {min_side})"
        )
    out = embed_nhwc(T.permute(x, (0, 2, 3, 1)), params, training=(mode == "train"))
    out = T.permute(out, (0, 3, 1, 2))
    return T.reshape(out, out.data.shape[1:]) if single else out


def aux_project(e_main, params):
    """Project each patch of a feature map into the semantic dimension.

    (l_inter, h, w) -> (h*w, l_out) in row-major patch order, or batched.
    """
    e_main = e_main if isinstance(e_main, Tensor) else Tensor(e_main)
    cin = e_main.data.shape[-3]
    if cin != params.aux_w.data.shape[1]:
        raise DimensionError(
            f"aux_project: feature channels {cin} != projection input {params.aux_w.data.shape[1]}"
        )
    return affine_patches(patchify(e_main), params.aux_w, params.aux_b)


def aux_predict(e_aux, tau=1.0):
    """Sum the projected patches and softmax at temperature tau.

    (hw, l_out) -> (l_out,) distribution; batched (B, hw, l_out) -> (B, l_out).
    """
    if tau <= 0:
        raise ParameterError(f"auxiliary temperature must be positive, got {tau}")
    e_aux = e_aux if isinstance(e_aux, Tensor) else Tensor(e_aux)
    if e_aux.data.ndim not in (2, 3):
        raise DimensionError(f"aux_predict input must be (hw, l) or (B, hw, l), got {e_aux.shape}")
    pooled = T.sum_(e_aux, axis=-2)
    return T.softmax(pooled, axis=-1, tau=tau)
