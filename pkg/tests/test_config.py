import pytest

from cylocc.config import ConfigError, PipelineConfig, build_config, config_to_text, load_config, parse_config_text


def test_defaults_are_toy_config():
    cfg = PipelineConfig()
    assert cfg.cart.shape == (40, 40, 8)
    assert cfg.cyl.shape == (24, 32, 8)
    assert (cfg.depth_bins, cfg.depth_interval, cfg.group_count) == (12, 1.0, 8)
    assert (cfg.channels, cfg.geo_channels, cfg.sem_channels, cfg.num_classes) == (16, 8, 16, 4)
    assert (cfg.lam, cfg.lr, cfg.momentum, cfg.steps, cfg.seed) == (3.0, 0.05, 0.9, 200, 0)


def test_parse_comments_and_types():
    vals = parse_config_text("# comment\nfusion.M = 4   # trailing\n\ntrain.lr=0.1\n")
    assert vals == {"fusion.M": 4, "train.lr": 0.1}


def test_unknown_key_names_line():
    with pytest.raises(ConfigError, match=r"c.cfg:2: unknown config key 'fusion.N'"):
        parse_config_text("fusion.M = 4\nfusion.N = 2\n", "c.cfg")


def test_bad_value_names_line():
    with pytest.raises(ConfigError, match=r"c.cfg:1: depth.K expects int"):
        parse_config_text("depth.K = 1.5\n", "c.cfg")
    with pytest.raises(ConfigError, match="key=value"):
        parse_config_text("depth.K\n", "c.cfg")


def test_precedence(tmp_path):
    path = tmp_path / "c.cfg"
    path.write_text("train.lr = 0.2\nfusion.M = 4\n")
    cfg = load_config(path, {"train.lr": "0.3"})
    assert cfg.lr == 0.3 and cfg.group_count == 4 and cfg.momentum == 0.9


def test_divisibility_errors():
    with pytest.raises(ConfigError, match="cyl.A=36 not divisible by fusion.M=8"):
        build_config({"cyl.A": 36})
    with pytest.raises(ConfigError, match="cart.nz"):
        build_config({"cart.nz": 4, "fusion.M": 1})
    with pytest.raises(ConfigError, match="positive"):
        build_config({"depth.K": 0})


def test_nested_overrides():
    cfg = build_config({"cyl.r_max": 12.0, "cart.nx": 16, "cart.ny": 16})
    assert cfg.cyl.r_max == 12.0 and cfg.cart.shape == (16, 16, 8)


def test_text_roundtrip():
    cfg = build_config({"fusion.M": 2, "train.lr": 0.125, "cyl.A": 16})
    assert load_config(None, parse_config_text(config_to_text(cfg))) == cfg
