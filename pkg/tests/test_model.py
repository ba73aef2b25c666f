import math

import numpy as np
import pytest

from paratranscnn import ops
from paratranscnn.config import ConfigError, ModelConfig
from paratranscnn.losses import cross_entropy
from paratranscnn.model import DecoderBlock, ParaTransCNN, count_flops, count_parameters
from paratranscnn.tensor import Tensor, get_tape, no_grad

from conftest import module_gradcheck

F64 = np.float64


def _x(cfg, b=1, seed=0, dtype=np.float32):
    return Tensor(np.random.default_rng(seed).uniform(0, 1, (b, 3, cfg.input_size, cfg.input_size)).astype(dtype))


def test_desk_logits_and_stage_shapes():
    cfg = ModelConfig.desk()
    model = ParaTransCNN(cfg)
    logits, feats = model(_x(cfg, b=2), return_features=True)
    assert logits.shape == (2, 4, 64, 64)
    assert [f.shape[1:] for f in feats.vit] == [(32, 16, 16), (64, 8, 8), (128, 4, 4)]
    assert [f.shape[1:] for f in feats.cnn] == [(16, 16, 16), (32, 8, 8), (64, 4, 4)]
    assert [f.shape[1] for f in feats.fused] == [48, 96, 192] == list(model.stage_widths)
    assert all(a.shape[2:] == (1, 1) for a in feats.attention)


def test_medium_224_logits():
    cfg = ModelConfig()
    with no_grad():
        logits = ParaTransCNN(cfg).eval()(_x(cfg))
    assert logits.shape == (1, 9, 224, 224)


@pytest.mark.parametrize("flag", ["patch_overlap", "four_stages", "no_pyramid", "no_channel_attention"])
@pytest.mark.parametrize("size", [64, 96])
def test_ablations_keep_full_resolution(flag, size):
    if flag == "four_stages" and size % 32:
        size = 128
    cfg = ModelConfig.desk(input_size=size, **{flag: True})
    with no_grad():
        logits, feats = ParaTransCNN(cfg).eval()(_x(cfg), return_features=True)
    assert logits.shape == (1, 4, size, size)
    if flag == "four_stages":
        assert feats.fused[-1].shape[1:] == (8 * 32 + 8 * 16, size // 32, size // 32)
    if flag == "no_pyramid":
        assert feats.vit[:2] == [None, None] and feats.vit[2].shape[1:] == (128, size // 16, size // 16)
        assert [f.shape[1] for f in feats.fused] == [16, 32, 64 + 128]


def test_wrong_input_rejected():
    cfg = ModelConfig.desk()
    with pytest.raises(ConfigError):
        ParaTransCNN(cfg)(Tensor(np.zeros((1, 3, 32, 32), dtype=np.float32)))


def test_zero_classifier_gives_ln_k_cross_entropy():
    cfg = ModelConfig.desk()
    model = ParaTransCNN(cfg)
    model.decoder.head.classifier.weight.data[...] = 0
    model.decoder.head.classifier.bias.data[...] = 0
    logits = model(_x(cfg))
    assert not logits.data.any()
    labels = np.random.default_rng(0).integers(0, 4, (1, 64, 64))
    assert cross_entropy(logits, labels).item() == pytest.approx(math.log(4), rel=1e-6)


def test_decoder_block_shape_oracle():
    cfg = ModelConfig()
    # skip width is whatever the fused stage-2 feature is: 2C + 2C'
    skip_w = 2 * cfg.token_dim + 2 * cfg.cnn_base_width
    assert skip_w == cfg.vit_widths()[1] + cfg.cnn_widths()[1] == 768
    block = DecoderBlock(256, skip_w, 256, rng=np.random.default_rng(0))
    y = block(Tensor(np.zeros((1, 256, 14, 14), dtype=np.float32)), Tensor(np.zeros((1, skip_w, 28, 28), dtype=np.float32)))
    assert y.shape == (1, 256, 28, 28)


def test_decoder_block_without_skip_doubles(rng):
    block = DecoderBlock(6, 0, 4, rng=rng)
    assert block(Tensor(np.zeros((2, 6, 5, 3), dtype=np.float32))).shape == (2, 4, 10, 6)
    with pytest.raises(ConfigError):
        DecoderBlock(6, 2, 4, rng=rng)(Tensor(np.zeros((2, 6, 5, 3), dtype=np.float32)))


def test_decoder_block_gradients(rng):
    block = DecoderBlock(4, 2, 3, rng=rng, dtype=F64)
    skip = rng.standard_normal((2, 2, 6, 6))
    module_gradcheck(block, rng.standard_normal((2, 4, 3, 3)), call=lambda m, t: m(t, Tensor(skip)))


def test_decoder_is_a_pure_chain(rng):
    block = DecoderBlock(4, 2, 3, rng=rng)
    x = Tensor(np.ones((1, 4, 3, 3), dtype=np.float32), requires_grad=True)
    block(x, Tensor(np.ones((1, 2, 6, 6), dtype=np.float32)))
    nodes = get_tape().nodes
    assert [n.op for n in nodes] == ["conv_transpose2d", "concat", "conv2d", "batch_norm2d", "relu", "conv2d",
                                     "batch_norm2d", "relu"]
    for prev, node in zip(nodes, nodes[1:]):
        produced = [t for t in node.inputs if t.node_id is not None and not t.is_leaf]
        assert [t.node_id for t in produced] == [prev.out_id]


def test_no_channel_attention_equals_unit_attention():
    cfg = ModelConfig.desk()
    full = ParaTransCNN(cfg, dtype=F64)
    bare = ParaTransCNN(ModelConfig.desk(no_channel_attention=True), dtype=F64)
    bare.load_state_dict({k: v for k, v in full.state_dict().items() if ".ca." not in k})
    for fuser in full.fuse:
        fuser.ca.attention_map = lambda f_m: Tensor(np.ones(f_m.shape[:2] + (1, 1)))
    x = _x(cfg, b=2, dtype=F64)
    np.testing.assert_array_equal(full(x).data, bare(x).data)


def test_eval_mode_is_batch_size_invariant():
    cfg = ModelConfig.desk()
    model = ParaTransCNN(cfg)
    model(_x(cfg, b=4))  # move BN running stats off their init
    model.eval()
    x = _x(cfg, b=3, seed=5)
    with no_grad():
        together = model(x).data
        alone = np.concatenate([model(Tensor(x.data[i:i + 1])).data for i in range(3)])
    # every GEMM runs per sample, so float32 results agree bit for bit
    np.testing.assert_array_equal(together, alone)


def test_parameter_names_unique_and_stable():
    a = [n for n, _ in ParaTransCNN(ModelConfig.desk()).named_parameters()]
    b = [n for n, _ in ParaTransCNN(ModelConfig.desk(seed=3)).named_parameters()]
    assert a == b and len(set(a)) == len(a)
    assert "vit.stage1.layer0.attn.wq" in a and "cnn.stage2.block0.conv1.weight" in a
    assert any(n.startswith("fuse3.ca.fc1") for n in a) and any(n.startswith("decoder.head.") for n in a)
    model = ParaTransCNN(ModelConfig.desk())
    assert all(p.name == n for n, p in model.named_parameters())


def test_same_seed_same_weights():
    a, b = ParaTransCNN(ModelConfig.minimal()), ParaTransCNN(ModelConfig.minimal())
    for p, q in zip(a.parameters(), b.parameters()):
        np.testing.assert_array_equal(p.data, q.data)


def test_counts():
    cfg = ModelConfig.minimal()
    model = ParaTransCNN(cfg)
    assert count_parameters(model) == sum(p.size for _, p in model.named_parameters()) == count_parameters(cfg)
    assert count_flops(cfg) == count_flops(model) > 0
    assert count_parameters(ModelConfig.minimal(cnn_base_width=16)) > count_parameters(cfg)


def test_predict_returns_class_ids():
    cfg = ModelConfig.desk()
    model = ParaTransCNN(cfg)
    masks = model.predict(_x(cfg, b=2).data)
    assert masks.shape == (2, 64, 64) and masks.max() < 4
    assert model.training
