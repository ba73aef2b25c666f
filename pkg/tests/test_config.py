import dataclasses
import json

import pytest

from paratranscnn.config import ConfigError, ModelConfig, TrainConfig, load_config, save_config


def test_defaults_are_medium():
    cfg = ModelConfig()
    assert cfg.token_dim == 320 and cfg.layers_per_stage == (3, 3, 3)
    assert cfg.vit_widths() == (320, 640, 1280)
    assert cfg.cnn_widths() == (64, 128, 256)
    assert [cfg.heads_for(d) for d in cfg.vit_widths()] == [5, 10, 20]


def test_variant_grid_is_expressible():
    for name, c in (("small", 64), ("base", 192), ("medium", 320), ("large", 512)):
        for level, layers in ((1, (2, 3, 3)), (2, (3, 3, 3)), (3, (3, 3, 4)), (4, (3, 6, 3))):
            cfg = ModelConfig.variant(name, level)
            assert cfg.token_dim == c and cfg.layers_per_stage == layers


def test_four_stages_extends_widths_and_decoder():
    cfg = ModelConfig(four_stages=True)
    assert cfg.num_stages == 4 and cfg.vit_widths()[-1] == 8 * 320 and cfg.cnn_widths()[-1] == 8 * 64
    assert cfg.decoder_plan() == (512, 256, 128, 64)
    assert cfg.stage_layers() == (3, 3, 3, 3)


@pytest.mark.parametrize("kw", [
    dict(input_size=100),
    dict(four_stages=True, input_size=48),
    dict(layers_per_stage=(1, 0, 1)),
    dict(no_pyramid=True, four_stages=True),
    dict(no_pyramid=True, patch_overlap=True),
    dict(token_dim=96, num_heads=5),
    dict(num_classes=1),
    dict(cnn_block="dense"),
    dict(decoder_widths=(8, 8)),
])
def test_invalid_model_configs(kw):
    with pytest.raises(ConfigError):
        ModelConfig(**kw)


@pytest.mark.parametrize("kw", [dict(base_lr=0), dict(epochs=0), dict(poly_power=0), dict(batch_size=0)])
def test_invalid_train_configs(kw):
    with pytest.raises(ConfigError):
        TrainConfig(**kw)


def test_json_round_trip(tmp_path):
    m, t = ModelConfig.desk(no_channel_attention=True), TrainConfig(epochs=3)
    save_config(tmp_path / "c.json", m, t)
    raw = json.loads((tmp_path / "c.json").read_text(encoding="utf-8"))
    assert raw["model"]["layers_per_stage"] == [1, 1, 1]
    m2, t2 = load_config(tmp_path / "c.json")
    assert m2 == m and t2 == t


def test_unknown_keys_rejected(tmp_path):
    (tmp_path / "c.json").write_text('{"model": {"tokendim": 3}}', encoding="utf-8")
    with pytest.raises(ConfigError, match="tokendim"):
        load_config(tmp_path / "c.json")


def test_replace_revalidates():
    with pytest.raises(ConfigError):
        dataclasses.replace(ModelConfig.desk(), input_size=70)
