"""Model assembly: backbone + auxiliary head + one fusion variant.

The model owns every parameter tensor and knows their canonical state
names, which double as checkpoint entry names. Trainable parameters and
batch-norm running statistics are kept separate: `parameters()` is what
an optimizer updates, `state_entries()` is what a checkpoint stores.

`episode_embeddings` is the single forward used by both training and
evaluation. It runs support and query images through the backbone as one
channels-last batch (so batch norm sees the whole episode), applies the
configured fusion, and flattens feature maps in channel-major order. The
auxiliary patch projection is computed only when something consumes it:
the auxiliary loss, or a fusion variant that takes semantic input. A
model whose loss weight is zero therefore never touches the auxiliary
parameters, and they stay exactly at their initialization.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .backbone import CONV4_FILTERS, BackboneParams, embed_nhwc, init_affine, init_backbone
from .errors import ConfigError, DimensionError, FormatError
from .fusion import CamParams, SeParams, VARIANTS, affine_patches, attend, default_scale
from .tensor import Tensor

SE_REDUCTION = 4


@dataclass
class ModelConfig:
    fusion: str = "cam"
    l_out: int = 300
    filters: tuple = CONV4_FILTERS
    in_channels: int = 3
    scale: float | None = None  # attention logit scale; None -> 1/sqrt(l_out)

    def validate(self):
        if self.fusion not in VARIANTS:
            raise ConfigError(f"fusion must be one of {VARIANTS}, got {self.fusion!r}")
        if self.l_out < 1:
            raise ConfigError(f"semantic dimension must be >= 1, got {self.l_out}")
        if not self.filters:
            raise ConfigError("backbone needs at least one conv block")
        if self.scale is not None and self.scale <= 0:
            raise ConfigError(f"attention scale must be positive, got {self.scale}")


@dataclass
class Model:
    config: ModelConfig
    backbone: BackboneParams
    cam: CamParams | None = None
    se: SeParams | None = None

    @classmethod
    def create(cls, config, seed):
        """Initialize all parameters, each from its own name-keyed stream."""
        config.validate()
        bb = init_backbone(
            seed, l_out=config.l_out, filters=config.filters, in_channels=config.in_channels
        )
        cam = se = None
        if config.fusion == "cam":
            kw, kb = init_affine(seed, "cam.key", config.l_out, bb.l_inter)
            vw, vb = init_affine(seed, "cam.value", config.l_out, bb.l_inter)
            scale = config.scale if config.scale is not None else default_scale(config.l_out)
            cam = CamParams(key_w=kw, key_b=kb, value_w=vw, value_b=vb, scale=scale)
        elif config.fusion == "squeeze_excitation":
            c = bb.l_inter
            hidden = max(1, c // SE_REDUCTION)
            f1w, f1b = init_affine(seed, "se.fc1", hidden, c)
            f2w, f2b = init_affine(seed, "se.fc2", c, hidden)
            se = SeParams(fc1_w=f1w, fc1_b=f1b, fc2_w=f2w, fc2_b=f2b)
        return cls(config=config, backbone=bb, cam=cam, se=se)

    # -- state -------------------------------------------------------------

    def parameters(self):
        """Trainable tensors by canonical name, in a stable order."""
        out = {}
        for i, blk in enumerate(self.backbone.blocks, start=1):
            out[f"backbone.block{i}.conv.w"] = blk.conv_w
            out[f"backbone.block{i}.conv.b"] = blk.conv_b
            out[f"backbone.block{i}.bn.gamma"] = blk.bn_gamma
            out[f"backbone.block{i}.bn.beta"] = blk.bn_beta
        out["aux.proj.w"] = self.backbone.aux_w
        out["aux.proj.b"] = self.backbone.aux_b
        if self.cam is not None:
            out["cam.key.w"] = self.cam.key_w
            out["cam.key.b"] = self.cam.key_b
            out["cam.value.w"] = self.cam.value_w
            out["cam.value.b"] = self.cam.value_b
        if self.se is not None:
            out["se.fc1.w"] = self.se.fc1_w
            out["se.fc1.b"] = self.se.fc1_b
            out["se.fc2.w"] = self.se.fc2_w
            out["se.fc2.b"] = self.se.fc2_b
        return out

    def state_entries(self):
        """Everything a checkpoint stores: parameters plus running stats."""
        out = {name: t.data for name, t in self.parameters().items()}
        for i, blk in enumerate(self.backbone.blocks, start=1):
            out[f"backbone.block{i}.bn.mean"] = blk.bn_stats.mean
            out[f"backbone.block{i}.bn.var"] = blk.bn_stats.var
        return out

    def load_state(self, entries):
        """Overwrite parameters and running stats from checkpoint entries."""
        expected = self.state_entries()
        missing = sorted(set(expected) - set(entries))
        if missing:
            raise FormatError(f"checkpoint is missing entries: {missing}")
        extra = sorted(set(entries) - set(expected))
        if extra:
            raise FormatError(f"checkpoint has unknown entries: {extra}")
        params = self.parameters()
        for name, arr in entries.items():
            if tuple(arr.shape) != tuple(expected[name].shape):
                raise FormatError(
                    f"checkpoint entry {name!r} has shape {arr.shape}, "
                    f"expected {expected[name].shape}"
                )
            if name in params:
                t = params[name]
                t.data = np.asarray(arr, dtype=t.data.dtype)
            else:  # running statistic
                i = int(name.split(".")[1][len("block") :])
                stats = self.backbone.blocks[i - 1].bn_stats
                kind = name.rsplit(".", 1)[1]
                target = stats.mean if kind == "mean" else stats.var
                target[...] = np.asarray(arr, dtype=target.dtype)


@dataclass
class EpisodeForward:
    """Everything downstream losses need from one episode forward."""

    support_emb: Tensor  # (K*N, D)
    query_emb: Tensor  # (K*M, D)
    aux_patches: Tensor | None  # (B, h*w, l_out) over support+query, or None


def _flatten_chw(fmap_nhwc):
    """(B, h, w, C) -> (B, C*h*w) flattened channel-major."""
    b, h, w, c = fmap_nhwc.data.shape
    return T.reshape(T.permute(fmap_nhwc, (0, 3, 1, 2)), (b, c * h * w))


def _flatten_patches(patches):
    """(B, h*w, C) patch rows -> (B, C*h*w) flattened channel-major."""
    b, hw, c = patches.data.shape
    return T.reshape(T.transpose_last(patches), (b, c * hw))


def episode_embeddings(model, support_x, query_x, *, training, need_aux):
    """One shared forward over all episode images.

    support_x, query_x: numpy (B, 3, H, W) image batches. Returns fused,
    flattened embeddings split back into support and query, plus the
    auxiliary patch projections when requested or required by the fusion.
    """
    if support_x.ndim != 4 or query_x.ndim != 4:
        raise DimensionError("episode batches must be (B, 3, H, W)")
    n_sup = support_x.shape[0]
    batch = np.concatenate([support_x, query_x], axis=0)
    # channels-last from the start; images are constants, so this transpose
    # happens once in numpy and never enters the graph
    x = Tensor(np.ascontiguousarray(batch.transpose(0, 2, 3, 1)))

    fmap = embed_nhwc(x, model.backbone, training=training)
    b, h, w, c = fmap.data.shape
    patches = T.reshape(fmap, (b, h * w, c))

    fusion = model.config.fusion
    aux_patches = None
    if need_aux or fusion in ("cam", "concat"):
        aux_patches = affine_patches(patches, model.backbone.aux_w, model.backbone.aux_b)

    if fusion == "none":
        emb = _flatten_chw(fmap)
    elif fusion == "cam":
        key = affine_patches(patches, model.cam.key_w, model.cam.key_b)
        value = affine_patches(patches, model.cam.value_w, model.cam.value_b)
        out, _ = attend(aux_patches, key, value, model.cam.scale)
        emb = _flatten_patches(out)
    elif fusion == "squeeze_excitation":
        pooled = T.mean(fmap, axis=(1, 2))  # (B, C)
        z = T.relu(affine_patches(pooled, model.se.fc1_w, model.se.fc1_b))
        s = T.sigmoid(affine_patches(z, model.se.fc2_w, model.se.fc2_b))
        gate = T.reshape(s, (b, 1, 1, c))
        emb = _flatten_chw(T.mul(fmap, gate))
    elif fusion == "concat":
        vis = _flatten_chw(fmap)
        sem = _flatten_patches(aux_patches)
        emb = T.concat(vis, sem, axis=1)
    else:  # pragma: no cover - validate() rejects unknown variants
        raise ConfigError(f"unknown fusion {fusion!r}")

    support_emb = T.narrow(emb, 0, 0, n_sup)
    query_emb = T.narrow(emb, 0, n_sup, batch.shape[0] - n_sup)
    if aux_patches is not None and not need_aux:
        aux_patches = None
    return EpisodeForward(support_emb=support_emb, query_emb=query_emb, aux_patches=aux_patches)
