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
# # The tensor engine and the network's shapes
#
# Everything here runs on numpy. Tensors record each op on a thread-local
# tape and `backward` walks it in reverse.

# %%
import numpy as np

from paratranscnn import ops
from paratranscnn.config import ModelConfig
from paratranscnn.gradcheck import check_function
from paratranscnn.model import ParaTransCNN, count_flops, count_parameters
from paratranscnn.tensor import Tensor, backward, no_grad

# %% [markdown]
# A two-line sanity check: the gradient of `sum(x * x)` is `2x`.

# %%
x = Tensor(np.array([1.0, -2.0]), requires_grad=True)
backward(ops.sum(ops.mul(x, x)))
x.grad

# %% [markdown]
# Central differences agree with the analytic gradient of a strided conv.
# ReLU masks and max-pool winners are frozen during the finite differences,
# so the check never straddles a kink.

# %%
rng = np.random.default_rng(0)
res = check_function("conv", lambda a, w: ops.conv2d(a, w, None, 2, 3),
                     [rng.standard_normal((1, 2, 8, 8)), rng.standard_normal((3, 2, 7, 7))])
[(r.name, f"{r.max_rel:.1e}") for r in res]

# %% [markdown]
# ## Stage shapes
#
# The desk configuration keeps the layout of the full model at 64 px.

# %%
cfg = ModelConfig.desk()
model = ParaTransCNN(cfg).eval()
with no_grad():
    logits, feats = model(Tensor(rng.uniform(0, 1, (1, 3, 64, 64)).astype(np.float32)), return_features=True)

for i, (v, c, f) in enumerate(zip(feats.vit, feats.cnn, feats.fused), start=1):
    print(f"stage {i}: transformer {v.shape[1:]}  cnn {c.shape[1:]}  fused {f.shape[1:]}")
print("logits", logits.shape)

# %% [markdown]
# Counts for the 224 px variants. These are computed by running the forward
# pass once under a FLOP counter.

# %%
for name in ("small", "base", "medium", "large"):
    c = ModelConfig.variant(name, 2)
    print(f"{name:>6}: {count_parameters(c) / 1e6:7.2f} M params, {count_flops(c) / 1e9:7.2f} GFLOPs")
