# ---
# jupyter:
#   jupytext:
#     formats: ipynb,py:percent
#     text_representation:
#       extension: .py
#       format_name: percent
#       format_version: '1.3'
#   kernelspec:
#     display_name: Python 3
#     language: python
#     name: python3
# ---

# %% [markdown]
# # Structural ablations
#
# Four switches change the encoder: overlapping patch embeddings, a fourth
# downsampling stage, a single non-pyramid Transformer stage, and removal of
# the channel attention.

# %%
import numpy as np

from paratranscnn.config import ModelConfig
from paratranscnn.model import ParaTransCNN, count_parameters
from paratranscnn.tensor import Tensor, no_grad

FLAGS = ["patch_overlap", "four_stages", "no_pyramid", "no_channel_attention"]
x = Tensor(np.random.default_rng(0).uniform(0, 1, (1, 3, 64, 64)).astype(np.float32))

# %%
for flag in [None] + FLAGS:
    cfg = ModelConfig.desk(**({flag: True} if flag else {}))
    model = ParaTransCNN(cfg).eval()
    with no_grad():
        logits, feats = model(x, return_features=True)
    fused = [f.shape[1] for f in feats.fused]
    print(f"{flag or 'full':>22}: {count_parameters(model):>8,} params, fused widths {fused}, logits {logits.shape}")

# %% [markdown]
# Without the pyramid only the deepest stage is fused, so the shallower
# skips carry CNN features alone.
