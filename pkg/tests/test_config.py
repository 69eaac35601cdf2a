import pytest
from hypothesis import given, settings, strategies as st

from fbchain.config import RunConfig, config_hash, default_config_text, dump_config, parse_config
from fbchain.errors import ConfigError
from fbchain.network import ROW_NAMES, ablation_config, make_config
from fbchain.training import AugmentConfig, TrainConfig

MINIMAL = """
[encoder]
num_levels = 2
depth_per_level = 2, 2
channels_per_level = 8, 16
connection_mode = dense

[model]
gpa_mode = full
fha_enabled = true
input_size = 16, 16

[train]
learning_rate = 1e-3
epochs = 2
batch_size = 4
"""


def test_minimal_parses_with_defaults():
    cfg = parse_config(MINIMAL)
    assert cfg.model.encoder.channels_per_level == [8, 16]
    assert cfg.model.decoder_channels == [8]
    assert cfg.model.encoder.feedback_enabled is True
    assert cfg.train.loss == "class_balanced_bce" and cfg.train.augment == AugmentConfig()


def test_round_trip_fixed_point():
    cfg = parse_config(MINIMAL)
    text = dump_config(cfg)
    again = parse_config(text)
    assert again == cfg
    assert dump_config(again) == text


@settings(max_examples=30, deadline=None)
@given(st.sampled_from(ROW_NAMES), st.floats(1e-6, 1.0), st.integers(1, 500), st.integers(1, 64),
       st.booleans(), st.floats(0, 1), st.one_of(st.none(), st.integers(1, 50)))
def test_round_trip_property(row, lr, epochs, bs, shuffle, p_blur, patience):
    cfg = RunConfig(ablation_config(row, make_config()),
                    TrainConfig(learning_rate=lr, epochs=epochs, batch_size=bs, early_stop_patience=patience,
                                augment=AugmentConfig(channel_shuffle=shuffle, p_blur=p_blur)))
    text = dump_config(cfg)
    assert parse_config(text) == cfg
    assert dump_config(parse_config(text)) == text


def test_missing_required_key_named():
    text = MINIMAL.replace("epochs = 2\n", "")
    with pytest.raises(ConfigError, match=r"\[train\] epochs"):
        parse_config(text)


def test_bad_value_names_key():
    with pytest.raises(ConfigError, match="batch_size"):
        parse_config(MINIMAL.replace("batch_size = 4", "batch_size = four"))


def test_syntax_error_has_line():
    with pytest.raises(ConfigError, match="line"):
        parse_config(MINIMAL + "\nthis line has no separator\n")


def test_unknown_key_and_section():
    with pytest.raises(ConfigError, match="unknown key"):
        parse_config(MINIMAL + "momentum = 0.9\n")
    with pytest.raises(ConfigError, match="unknown section"):
        parse_config(MINIMAL + "[optim]\nx = 1\n")


def test_semantic_validation_surfaces():
    with pytest.raises(ConfigError, match="divisible"):
        parse_config(MINIMAL.replace("input_size = 16, 16", "input_size = 15, 15"))


def test_hash_stable_under_key_order():
    a = {"x": 1, "y": {"b": 2, "a": [1, 2]}}
    b = {"y": {"a": [1, 2], "b": 2}, "x": 1}
    assert config_hash(a) == config_hash(b)
    assert config_hash(a) != config_hash({"x": 2, "y": {"b": 2, "a": [1, 2]}})


def test_row_hashes_differ():
    hashes = {config_hash(ablation_config(r).to_dict()) for r in ROW_NAMES}
    assert len(hashes) == len(ROW_NAMES)


def test_default_config_text_overrides():
    cfg = parse_config(default_config_text(train__epochs=3, model__gpa_mode="off"))
    assert cfg.train.epochs == 3 and cfg.model.gpa_mode == "off"
