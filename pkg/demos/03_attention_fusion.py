"""How the fusion variants reshape a feature map.

CAM is cross-attention: queries from the semantic branch, keys and values
from visual patches. The semantic side decides which patches matter, and
the fused map lives in the semantic dimension. SE reweights channels from a
global squeeze; concat just stacks the two maps.

Run with: python3 demos/03_attention_fusion.py
"""

import numpy as np

from semcross.backbone import aux_predict, aux_project, embed
from semcross.fusion import cam_attention, cam_forward, concat_fusion, default_scale, se_forward
from semcross.model import Model, ModelConfig
from semcross.tensor import Tensor

rng = np.random.default_rng(3)
L_OUT = 6

model = Model.create(ModelConfig(fusion="cam", l_out=L_OUT, filters=(8, 8), in_channels=3), seed=0)
img = rng.normal(size=(3, 16, 16))

e_single = embed(Tensor(img), model.backbone)   # (C, h, w)
C, h, w = e_single.data.shape
print(f"backbone output: {h}x{w} map, {C} channels")

# The auxiliary head projects each patch into the word-vector dimension.
patches = aux_project(e_single, model.backbone)
print(f"semantic patches: {tuple(patches.data.shape)} (h*w, l_out)")
pred = aux_predict(patches, tau=1.0)
print(f"aux prediction sums to {float(pred.data.sum()):.6f} over {L_OUT} dims")

# Cross-attention. Rows of the attention matrix are distributions over the
# visual patches, one row per semantic patch position.
att = cam_attention(e_single, Tensor(patches.data), model.cam)
print(f"\nattention matrix: {tuple(att.data.shape)}, row sums "
      f"{np.sum(att.data, axis=-1).min():.6f}..{np.sum(att.data, axis=-1).max():.6f}")
print(f"logit scale: {model.cam.scale:.4f} (= 1/sqrt(l_out) = {default_scale(L_OUT):.4f})")

fused = cam_forward(e_single, Tensor(patches.data), model.cam)
print(f"cam fusion:    {tuple(e_single.data.shape)} -> {tuple(fused.data.shape)} "
      "(channel axis becomes the semantic dimension)")

se_model = Model.create(ModelConfig(fusion="squeeze_excitation", l_out=L_OUT, filters=(8, 8), in_channels=3), seed=0)
se_out = se_forward(e_single, se_model.se)
print(f"se fusion:     {tuple(e_single.data.shape)} -> {tuple(se_out.data.shape)} (channels reweighted)")

cat = concat_fusion(e_single, Tensor(patches.data))
print(f"concat fusion: {tuple(e_single.data.shape)} + patches -> {tuple(cat.data.shape)}")
