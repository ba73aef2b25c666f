"""Residual CNN branch aligned stage-for-stage with the Transformer branch."""
from __future__ import annotations

import numpy as np

from . import ops
from .config import ModelConfig
from .nn import BatchNorm2d, Conv2d, Module, ModuleList
from .tensor import Tensor


class Shortcut(Module):
    def __init__(self, cin, cout, stride, *, rng, dtype):
        super().__init__()
        self.conv = Conv2d(cin, cout, 1, stride, 0, bias=False, rng=rng, dtype=dtype)
        self.bn = BatchNorm2d(cout, dtype=dtype)

    def forward(self, x: Tensor) -> Tensor:
        return self.bn(self.conv(x))


class BasicBlock(Module):
    """Two 3x3 conv+BN layers with a projection shortcut on stride or width change."""

    def __init__(self, cin, cout, stride=1, *, rng, dtype=np.float32):
        super().__init__()
        self.conv1 = Conv2d(cin, cout, 3, stride, 1, bias=False, rng=rng, dtype=dtype)
        self.bn1 = BatchNorm2d(cout, dtype=dtype)
        self.conv2 = Conv2d(cout, cout, 3, 1, 1, bias=False, rng=rng, dtype=dtype)
        self.bn2 = BatchNorm2d(cout, dtype=dtype)
        self.shortcut = Shortcut(cin, cout, stride, rng=rng, dtype=dtype) if (stride != 1 or cin != cout) else None

    def forward(self, x: Tensor) -> Tensor:
        y = ops.relu(self.bn1(self.conv1(x)))
        y = self.bn2(self.conv2(y))
        skip = self.shortcut(x) if self.shortcut is not None else x
        return ops.relu(ops.add(y, skip))

    @property
    def last_bn(self) -> BatchNorm2d:
        return self.bn2


class BottleneckBlock(Module):
    """1x1 reduce, 3x3, 1x1 expand; inner width is a quarter of the output width."""

    def __init__(self, cin, cout, stride=1, *, rng, dtype=np.float32):
        super().__init__()
        mid = max(1, cout // 4)
        self.conv1 = Conv2d(cin, mid, 1, 1, 0, bias=False, rng=rng, dtype=dtype)
        self.bn1 = BatchNorm2d(mid, dtype=dtype)
        self.conv2 = Conv2d(mid, mid, 3, stride, 1, bias=False, rng=rng, dtype=dtype)
        self.bn2 = BatchNorm2d(mid, dtype=dtype)
        self.conv3 = Conv2d(mid, cout, 1, 1, 0, bias=False, rng=rng, dtype=dtype)
        self.bn3 = BatchNorm2d(cout, dtype=dtype)
        self.shortcut = Shortcut(cin, cout, stride, rng=rng, dtype=dtype) if (stride != 1 or cin != cout) else None

    def forward(self, x: Tensor) -> Tensor:
        y = ops.relu(self.bn1(self.conv1(x)))
        y = ops.relu(self.bn2(self.conv2(y)))
        y = self.bn3(self.conv3(y))
        skip = self.shortcut(x) if self.shortcut is not None else x
        return ops.relu(ops.add(y, skip))

    @property
    def last_bn(self) -> BatchNorm2d:
        return self.bn3


class Stem(Module):
    """7x7/2 conv + BN + ReLU + 3x3/2 max-pool: the /4 entry resolution."""

    def __init__(self, cin, cout, *, rng, dtype=np.float32):
        super().__init__()
        self.conv = Conv2d(cin, cout, 7, 2, 3, bias=False, rng=rng, dtype=dtype)
        self.bn = BatchNorm2d(cout, dtype=dtype)

    def forward(self, x: Tensor) -> Tensor:
        return ops.max_pool2d(ops.relu(self.bn(self.conv(x))), 3, 2, 1)


class ResidualStage(Module):
    def __init__(self, cin, cout, stride, blocks, kind="basic", *, rng, dtype=np.float32):
        super().__init__()
        block = BasicBlock if kind == "basic" else BottleneckBlock
        self.block = ModuleList(
            block(cin if k == 0 else cout, cout, stride if k == 0 else 1, rng=rng, dtype=dtype)
            for k in range(blocks)
        )

    def forward(self, x: Tensor) -> Tensor:
        for b in self.block:
            x = b(x)
        return x


class CnnBranch(Module):
    """Local-feature encoder returning maps at /4, /8, /16 (and /32) with widths C', 2C', 4C' (8C')."""

    def __init__(self, cfg: ModelConfig, *, rng, dtype=np.float32):
        super().__init__()
        widths = cfg.cnn_widths()
        self.stem = Stem(cfg.in_channels, widths[0], rng=rng, dtype=dtype)
        stages = []
        cin = widths[0]
        for i, (w, blocks) in enumerate(zip(widths, cfg.stage_blocks())):
            stages.append(ResidualStage(cin, w, 1 if i == 0 else 2, blocks, cfg.cnn_block, rng=rng, dtype=dtype))
            cin = w
        self.stage = ModuleList(stages, start=1)

    def forward(self, x: Tensor) -> list:
        x = self.stem(x)
        feats = []
        for stage in self.stage:
            x = stage(x)
            feats.append(x)
        return feats

