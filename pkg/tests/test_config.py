import pytest

from rsdso.config import Config, ConfigError, dump_config, load_config, parse_config_text


def test_defaults_valid():
    cfg = Config()
    assert cfg.window_size == 7 and cfg.num_active_points == 800
    assert cfg.outlier_threshold == pytest.approx(cfg.outlier_factor * 81.0)


def test_parse_overrides_and_comments():
    cfg = parse_config_text("# comment\nwindow_size = 5\nfej = false  # trailing\nrs_method = fixed_point\n")
    assert cfg.window_size == 5 and cfg.fej is False and cfg.rs_method == "fixed_point"


def test_round_trip(tmp_path):
    cfg = Config(lambda_vel=3.5, pattern_timing="per_pixel")
    path = tmp_path / "c.cfg"
    path.write_text(dump_config(cfg))
    assert load_config(path) == cfg


@pytest.mark.parametrize("text", [
    "nonsense\n", "unknown_key = 1\n", "window_size = x\n", "fej = maybe\n",
    "affine_mode = sometimes\n", "window_size = 1\n", "pattern_timing = odd\n",
])
def test_invalid_config(text):
    with pytest.raises(ConfigError):
        parse_config_text(text)
