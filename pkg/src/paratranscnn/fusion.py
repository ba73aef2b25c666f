"""Channel-attention fusion of the CNN and Transformer features of one stage."""
from __future__ import annotations

import numpy as np

from . import ops
from .nn import Linear, Module
from .tensor import Tensor


def merge(f_cnn: Tensor, f_vit: Tensor) -> Tensor:
    """Channel concatenation, CNN channels first."""
    if f_cnn.shape[0] != f_vit.shape[0] or f_cnn.shape[2:] != f_vit.shape[2:]:
        raise ops.ShapeError(f"branch features misaligned: cnn {f_cnn.shape} vs vit {f_vit.shape}")
    return ops.concat([f_cnn, f_vit], axis=1)


def hidden_width(channels: int, reduction: int) -> int:
    return min(channels, max(4, channels // reduction))


class ChannelAttention(Module):
    """Squeeze-and-excitation style gate: avg-pool -> FC -> ReLU -> FC -> sigmoid -> scale."""

    def __init__(self, channels: int, reduction: int = 16, *, rng, dtype=np.float32):
        super().__init__()
        hidden = hidden_width(channels, reduction)
        self.fc1 = Linear(channels, hidden, rng=rng, dtype=dtype, init="uniform")
        self.fc2 = Linear(hidden, channels, rng=rng, dtype=dtype, init="uniform")

    def attention_map(self, f_m: Tensor) -> Tensor:
        b, c = f_m.shape[:2]
        # B x 1 x C so the MLP runs one row per sample, independent of batch size
        pooled = ops.reshape(ops.global_avg_pool2d(f_m), (b, 1, c))
        z = self.fc2(ops.relu(self.fc1(pooled)))
        return ops.reshape(ops.sigmoid(z), (b, c, 1, 1))

    def forward(self, f_m: Tensor, return_map: bool = False):
        f_am = self.attention_map(f_m)
        f_ca = apply(f_am, f_m)
        return (f_ca, f_am) if return_map else f_ca

    def zero_init(self) -> None:
        for p in self.parameters():
            p.data[...] = 0


def apply(f_am: Tensor, f_m: Tensor) -> Tensor:
    """Broadcast the B x C x 1 x 1 channel weights over the spatial extent."""
    return ops.mul(f_m, f_am)


class StageFusion(Module):
    """Merge one stage's branch features and optionally gate them."""

    def __init__(self, cnn_width: int, vit_width: int, reduction: int = 16, use_attention: bool = True,
                 *, rng, dtype=np.float32):
        super().__init__()
        self.width = cnn_width + vit_width
        self.ca = ChannelAttention(self.width, reduction, rng=rng, dtype=dtype) if use_attention else None

    def forward(self, f_cnn: Tensor, f_vit: Tensor):
        """Return ``(fused, attention_map_or_None, merged)``."""
        f_m = merge(f_cnn, f_vit)
        if self.ca is None:
            return f_m, None, f_m
        f_ca, f_am = self.ca(f_m, return_map=True)
        return f_ca, f_am, f_m
