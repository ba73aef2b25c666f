"""Full network: parallel encoder branches, per-stage fusion, skip-connected decoder."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import ops
from .cnn import CnnBranch
from .config import ConfigError, ModelConfig
from .fusion import StageFusion
from .nn import Conv2d, ConvBNReLU, ConvTranspose2d, Module, ModuleList
from .tensor import Tensor, no_grad
from .vit import VitBranch


@dataclass
class StageFeatures:
    """Per-stage branch outputs; ``vit`` and ``attention`` hold None for unfused stages."""

    vit: list = field(default_factory=list)
    cnn: list = field(default_factory=list)
    merged: list = field(default_factory=list)
    fused: list = field(default_factory=list)
    attention: list = field(default_factory=list)


class DecoderBlock(Module):
    """x2 transposed-conv upsample, optional skip concat, two 3x3 conv+BN+ReLU."""

    def __init__(self, cin, skip_width, out_width, *, rng, dtype=np.float32):
        super().__init__()
        self.up = ConvTranspose2d(cin, out_width, 2, 2, rng=rng, dtype=dtype)
        self.conv1 = ConvBNReLU(out_width + skip_width, out_width, rng=rng, dtype=dtype)
        self.conv2 = ConvBNReLU(out_width, out_width, rng=rng, dtype=dtype)
        self.skip_width = skip_width

    def forward(self, x: Tensor, skip: Tensor | None = None) -> Tensor:
        y = self.up(x)
        if skip is not None:
            if skip.shape[1] != self.skip_width:
                raise ConfigError(f"skip width {skip.shape[1]} != expected {self.skip_width}")
            y = ops.concat([y, skip], axis=1)
        elif self.skip_width:
            raise ConfigError("decoder block built for a skip input but none given")
        return self.conv2(self.conv1(y))


class SegmentationHead(Module):
    """Final x4: two x2 transposed convs with conv+BN+ReLU between, then 1x1 conv to logits."""

    def __init__(self, cin, width, num_classes, *, rng, dtype=np.float32):
        super().__init__()
        self.up1 = ConvTranspose2d(cin, width, 2, 2, rng=rng, dtype=dtype)
        self.conv = ConvBNReLU(width, width, rng=rng, dtype=dtype)
        self.up2 = ConvTranspose2d(width, width, 2, 2, rng=rng, dtype=dtype)
        self.classifier = Conv2d(width, num_classes, 1, bias=True, rng=rng, dtype=dtype)

    def forward(self, x: Tensor) -> Tensor:
        return self.classifier(self.up2(self.conv(self.up1(x))))


class Decoder(Module):
    def __init__(self, bottleneck_width, skip_widths, widths, num_classes, *, rng, dtype=np.float32):
        super().__init__()
        blocks = []
        cin = bottleneck_width
        for skip_w, w in zip(skip_widths, widths[:-1]):
            blocks.append(DecoderBlock(cin, skip_w, w, rng=rng, dtype=dtype))
            cin = w
        self.block = ModuleList(blocks, start=1)
        self.head = SegmentationHead(cin, widths[-1], num_classes, rng=rng, dtype=dtype)

    def forward(self, bottleneck: Tensor, skips: list) -> Tensor:
        """``skips`` are ordered deepest first."""
        x = bottleneck
        for block, skip in zip(self.block, skips):
            x = block(x, skip)
        return self.head(x)


class ParaTransCNN(Module):
    def __init__(self, cfg: ModelConfig, dtype=np.float32):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        rng = np.random.default_rng(cfg.seed)
        self.vit = VitBranch(cfg, rng=rng, dtype=dtype)
        self.cnn = CnnBranch(cfg, rng=rng, dtype=dtype)
        cnn_w = cfg.cnn_widths()
        vit_w = cfg.vit_widths()
        n = cfg.num_stages
        # stages that receive a Transformer feature
        self.fused_stages = (n,) if cfg.no_pyramid else tuple(range(1, n + 1))
        first = self.fused_stages[0]
        self.fuse = ModuleList(
            (StageFusion(cnn_w[i - 1], vit_w[i - 1], cfg.reduction_ratio, not cfg.no_channel_attention,
                         rng=rng, dtype=dtype) for i in self.fused_stages),
            start=first,
        )
        widths = [cnn_w[i] + (vit_w[i] if i + 1 in self.fused_stages else 0) for i in range(n)]
        self.stage_widths = tuple(widths)
        self.decoder = Decoder(widths[-1], widths[-2::-1], cfg.decoder_plan(), cfg.num_classes, rng=rng, dtype=dtype)
        self.assign_names()

    def check_input(self, x: Tensor) -> None:
        cfg = self.cfg
        if x.ndim != 4 or x.shape[1] != cfg.in_channels or x.shape[2:] != (cfg.input_size, cfg.input_size):
            raise ConfigError(
                f"expected input B x {cfg.in_channels} x {cfg.input_size} x {cfg.input_size}, got {x.shape}")

    def fuse_features(self, vit_feats: list, cnn_feats: list) -> StageFeatures:
        feats = StageFeatures(cnn=list(cnn_feats))
        vit_by_stage = dict(zip(self.fused_stages, vit_feats))
        fusers = dict(zip(self.fused_stages, self.fuse))
        for i, f_cnn in enumerate(cnn_feats, start=1):
            f_vit = vit_by_stage.get(i)
            feats.vit.append(f_vit)
            if f_vit is None:
                feats.merged.append(f_cnn)
                feats.fused.append(f_cnn)
                feats.attention.append(None)
                continue
            fused, f_am, f_m = fusers[i](f_cnn, f_vit)
            feats.merged.append(f_m)
            feats.fused.append(fused)
            feats.attention.append(f_am)
        return feats

    def encode(self, x: Tensor) -> StageFeatures:
        self.check_input(x)
        return self.fuse_features(self.vit(x), self.cnn(x))

    def decode(self, feats: StageFeatures) -> Tensor:
        """Bottleneck is the deepest fused map; shallower fused maps are the skips."""
        return self.decoder(feats.fused[-1], feats.fused[-2::-1])

    def forward(self, x: Tensor, return_features: bool = False):
        feats = self.encode(x)
        logits = self.decode(feats)
        return (logits, feats) if return_features else logits

    def predict(self, images: np.ndarray) -> np.ndarray:
        """Eval-mode argmax masks for a B x C x H x W float array."""
        was_training = self.training
        self.eval()
        try:
            with no_grad():
                logits = self.forward(Tensor(np.asarray(images, dtype=self.dtype)))
        finally:
            self.train(was_training)
        return logits.data.argmax(axis=1)

    @property
    def dtype(self):
        return self.vit.stage[0].embed.proj.weight.dtype


def build_model(cfg: ModelConfig, dtype=np.float32) -> ParaTransCNN:
    return ParaTransCNN(cfg, dtype=dtype)


def count_parameters(cfg_or_model) -> int:
    model = cfg_or_model if isinstance(cfg_or_model, Module) else ParaTransCNN(cfg_or_model)
    return int(sum(p.size for p in model.parameters()))


def count_flops(cfg_or_model) -> int:
    """FLOPs (2 x multiply-accumulates of convs, transposed convs and matmuls) for one sample."""
    model = cfg_or_model if isinstance(cfg_or_model, Module) else ParaTransCNN(cfg_or_model)
    cfg = model.cfg
    x = Tensor(np.zeros((1, cfg.in_channels, cfg.input_size, cfg.input_size), dtype=model.dtype))
    was_training = model.training
    model.eval()
    try:
        with no_grad(), ops.count_flops() as counter:
            model(x)
    finally:
        model.train(was_training)
    return counter[0]
