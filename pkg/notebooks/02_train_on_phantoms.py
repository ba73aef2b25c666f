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
# # Training on synthetic phantoms
#
# Noisy ellipses stand in for organs. Each foreground class gets its own
# intensity band, so a small network can learn the task in a few minutes.

# %%
import tempfile
from pathlib import Path

import numpy as np

from paratranscnn.config import ModelConfig, TrainConfig
from paratranscnn.data import synth_generate
from paratranscnn.io import load_pgm
from paratranscnn.train import evaluate, export_attention, render_loss_curve, train

work = Path(tempfile.mkdtemp())
data = synth_generate(work / "data", n_cases=2, slices_per_case=4, num_classes=4, size=64, seed=0)
len(data), data.num_classes

# %% [markdown]
# A short run to keep the notebook quick. Thirty epochs lower the loss but
# leave the masks rough; 200 epochs reach a train DSC above 0.95.

# %%
EPOCHS = 30
ck, tlog = train(ModelConfig.desk(), TrainConfig(epochs=EPOCHS, batch_size=2, augment=False),
                 data, work / "run")
print(f"{len(tlog.records)} iterations, loss {tlog.losses()[0]:.3f} -> {tlog.losses()[-1]:.3f}")

# %%
curve = render_loss_curve(tlog, work / "run" / "loss_curve.pgm")
curve.shape

# %% [markdown]
# Evaluation groups slices by case and scores each case as a volume.

# %%
rep = evaluate(ck, data)
print(rep.summary())

# %% [markdown]
# ## Attention maps
#
# For each stage we get the channel weights and a heat map of the mean
# absolute fused feature.

# %%
maps = export_attention(ck, data.root / data.records[0].image, work / "attention")
for stage, entry in maps.items():
    w = entry["weights"]
    print(f"stage {stage}: {w.size} weights in [{w.min():.3f}, {w.max():.3f}]")

# %%
heat = load_pgm(work / "attention" / "stage1_heatmap.pgm")
heat.shape, int(heat.min()), int(heat.max())
