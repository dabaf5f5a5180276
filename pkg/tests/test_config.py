import pytest

from facemae.config import ConfigError, PipelineConfig, dump_config, parse_config


def test_defaults_and_overrides():
    cfg = parse_config("# pinned run\nmask_ratio = 0.5   # half\n\nloss=mse\nepochs = 3\n")
    assert cfg.mask_ratio == 0.5 and cfg.loss == "mse" and cfg.epochs == 3
    assert cfg.k == PipelineConfig().k


def test_unknown_key_named():
    with pytest.raises(ConfigError, match="'mask_ration'"):
        parse_config("mask_ration = 0.5\n")


def test_bad_value_and_missing_equals():
    with pytest.raises(ConfigError, match="epochs"):
        parse_config("epochs = many\n")
    with pytest.raises(ConfigError, match="line 2"):
        parse_config("k = 2\njust words\n")


def test_dump_roundtrip():
    cfg = PipelineConfig().replace(beta=0.5, curve="5,10")
    assert parse_config(dump_config(cfg)) == cfg


def test_list_helpers():
    assert PipelineConfig.int_list("10, 20,50") == [10, 20, 50]
    assert PipelineConfig.float_list("0.3,0.9") == [0.3, 0.9]
    assert PipelineConfig.int_list("") == []
