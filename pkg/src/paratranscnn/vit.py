"""Pyramid Transformer branch: patch embedding + pre-norm Transformer layers per stage."""
from __future__ import annotations

import numpy as np

from . import ops
from .config import ConfigError, ModelConfig
from .nn import Conv2d, LayerNorm, Linear, Module, ModuleList, trunc_normal
from .tensor import Parameter, Tensor


def tokens_to_map(tokens: Tensor, h: int, w: int) -> Tensor:
    b, n, d = tokens.shape
    return ops.transpose(ops.reshape(tokens, (b, h, w, d)), (0, 3, 1, 2))


def map_to_tokens(x: Tensor) -> Tensor:
    b, c, h, w = x.shape
    return ops.reshape(ops.transpose(x, (0, 2, 3, 1)), (b, h * w, c))


class PatchEmbed(Module):
    """Strided conv projection to tokens plus a learned positional embedding.

    ``kernel == stride == patch`` by default; the overlapping variant widens
    the kernel and pads so the token grid is unchanged.
    """

    def __init__(self, cin, dim, patch, grid, overlap=False, *, rng, dtype=np.float32):
        super().__init__()
        self.patch = patch
        if overlap:
            kernel, padding = (7, 3) if patch == 4 else (2 * patch - 1, patch // 2)
        else:
            kernel, padding = patch, 0
        self.proj = Conv2d(cin, dim, kernel, stride=patch, padding=padding, rng=rng, dtype=dtype, init="trunc_normal")
        self.pos_embed = Parameter(np.zeros((1, grid * grid, dim), dtype=dtype))

    def forward(self, x: Tensor):
        if x.shape[2] % self.patch or x.shape[3] % self.patch:
            raise ConfigError(f"spatial size {x.shape[2:]} not divisible by patch size {self.patch}")
        y = self.proj(x)
        h, w = y.shape[2], y.shape[3]
        if h * w != self.pos_embed.shape[1]:
            raise ConfigError(f"token grid {h}x{w} does not match positional embedding of {self.pos_embed.shape[1]}")
        return ops.add(map_to_tokens(y), self.pos_embed), (h, w)


class Attention(Module):
    """Multi-head scaled dot-product self-attention."""

    def __init__(self, dim, heads, attn_drop=0.0, *, rng, dtype=np.float32):
        super().__init__()
        if dim % heads:
            raise ConfigError(f"dim {dim} not divisible by {heads} heads")
        self.heads = heads
        self.scale = (dim // heads) ** -0.5
        self.attn_drop = attn_drop
        self._drop_rng = np.random.default_rng(rng.integers(2**63))
        self.last_weights = None
        for n in ("q", "k", "v", "o"):
            setattr(self, f"w{n}", Parameter(trunc_normal(rng, (dim, dim), dtype=dtype)))
            setattr(self, f"b{n}", Parameter(np.zeros(dim, dtype=dtype)))

    def _split(self, x: Tensor) -> Tensor:
        b, n, d = x.shape
        return ops.transpose(ops.reshape(x, (b, n, self.heads, d // self.heads)), (0, 2, 1, 3))

    def forward(self, x: Tensor, keep_weights: bool = False) -> Tensor:
        b, n, d = x.shape
        q = self._split(ops.linear(x, self.wq, self.bq))
        k = self._split(ops.linear(x, self.wk, self.bk))
        v = self._split(ops.linear(x, self.wv, self.bv))
        scores = ops.mul(ops.matmul(q, ops.transpose(k, (0, 1, 3, 2))), self.scale)
        attn = ops.softmax(scores, axis=-1)
        if keep_weights:
            self.last_weights = attn.data
        if self.training and self.attn_drop > 0:
            keep = (self._drop_rng.random(attn.shape) >= self.attn_drop).astype(attn.dtype)
            attn = ops.mul(attn, keep / (1.0 - self.attn_drop))
        y = ops.matmul(attn, v)
        y = ops.reshape(ops.transpose(y, (0, 2, 1, 3)), (b, n, d))
        return ops.linear(y, self.wo, self.bo)


class Mlp(Module):
    def __init__(self, dim, hidden, *, rng, dtype=np.float32):
        super().__init__()
        self.fc1 = Linear(dim, hidden, rng=rng, dtype=dtype)
        self.fc2 = Linear(hidden, dim, rng=rng, dtype=dtype)

    def forward(self, x: Tensor) -> Tensor:
        return self.fc2(ops.gelu(self.fc1(x)))


class TransformerLayer(Module):
    """Pre-norm block: ``x + MSA(LN(x))`` then ``x + MLP(LN(x))``."""

    def __init__(self, dim, heads, mlp_ratio=4.0, attn_drop=0.0, *, rng, dtype=np.float32):
        super().__init__()
        self.norm1 = LayerNorm(dim, dtype=dtype)
        self.attn = Attention(dim, heads, attn_drop, rng=rng, dtype=dtype)
        self.norm2 = LayerNorm(dim, dtype=dtype)
        self.mlp = Mlp(dim, int(dim * mlp_ratio), rng=rng, dtype=dtype)

    def forward(self, x: Tensor) -> Tensor:
        x = ops.add(x, self.attn(self.norm1(x)))
        return ops.add(x, self.mlp(self.norm2(x)))

    def zero_residual_outputs(self) -> None:
        for p in (self.attn.wo, self.attn.bo, self.mlp.fc2.weight, self.mlp.fc2.bias):
            p.data[...] = 0


class VitStage(Module):
    def __init__(self, cin, dim, patch, grid, layers, heads, cfg: ModelConfig, overlap=False, *, rng, dtype):
        super().__init__()
        self.embed = PatchEmbed(cin, dim, patch, grid, overlap, rng=rng, dtype=dtype)
        self.layer = ModuleList(
            TransformerLayer(dim, heads, cfg.mlp_ratio, cfg.attn_drop, rng=rng, dtype=dtype) for _ in range(layers)
        )

    def forward(self, x: Tensor) -> Tensor:
        tokens, (h, w) = self.embed(x)
        for layer in self.layer:
            tokens = layer(tokens)
        return tokens_to_map(tokens, h, w)


class VitBranch(Module):
    """Global-feature encoder; returns one B x D_j x H_j x W_j map per stage.

    Stage 1 uses patch 4 (/4) and later stages patch 2, giving /4, /8, /16
    (and /32 with four stages) at widths C, 2C, 4C (8C). Without the pyramid
    a single patch-16 embedding feeds every layer at width 4C and only one
    map (at /16) is returned.
    """

    def __init__(self, cfg: ModelConfig, *, rng, dtype=np.float32):
        super().__init__()
        self.pyramid = not cfg.no_pyramid
        size = cfg.input_size
        stages = []
        if self.pyramid:
            cin = cfg.in_channels
            reduction = 1
            for j, (dim, layers) in enumerate(zip(cfg.vit_widths(), cfg.stage_layers())):
                patch = 4 if j == 0 else 2
                reduction *= patch
                stages.append(VitStage(cin, dim, patch, size // reduction, layers, cfg.heads_for(dim), cfg,
                                       cfg.patch_overlap, rng=rng, dtype=dtype))
                cin = dim
        else:
            dim = 4 * cfg.token_dim
            stages.append(VitStage(cfg.in_channels, dim, 16, size // 16, sum(cfg.layers_per_stage[:3]),
                                   cfg.heads_for(dim), cfg, rng=rng, dtype=dtype))
        self.stage = ModuleList(stages, start=1)

    def forward(self, x: Tensor) -> list:
        feats = []
        for stage in self.stage:
            x = stage(x)
            feats.append(x)
        return feats

    def layers(self):
        for stage in self.stage:
            yield from stage.layer

    def attention_modules(self):
        return [layer.attn for layer in self.layers()]
