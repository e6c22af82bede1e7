import pytest

from pdfnet.config import RunConfig, env_values, parse_text, parse_value, resolve
from pdfnet.errors import ConfigError


def test_defaults_follow_training_recipe():
    cfg = RunConfig()
    assert cfg.learning_rate == 1e-5 and cfg.batch_size == 1 and cfg.epochs == 100
    assert cfg.patch_grid == 8
    assert (cfg.lambda1, cfg.lambda2, cfg.tau) == (0.5, 0.1, 0.1)


def test_round_trip_is_identity():
    cfg = RunConfig(resolution=(512, 768), backbone_channels=(8, 16, 32, 64), learning_rate=3.5e-4,
                    use_inte=False, data_root="/tmp/x y", seed=17, lambda2=0.0)
    again = RunConfig.loads(cfg.dumps())
    assert again == cfg
    assert again.dumps() == cfg.dumps()


def test_float_repr_survives(tmp_path):
    cfg = RunConfig(learning_rate=0.1 + 0.2)
    path = tmp_path / "c.txt"
    cfg.save(path)
    assert RunConfig.load(path).learning_rate == 0.1 + 0.2


def test_parse_text_comments_and_blanks():
    assert parse_text("# note\n\n a = 1 \nb=x = y\n") == {"a": "1", "b": "x = y"}


@pytest.mark.parametrize("text", ["novalue\n", "a = 1\na = 2\n"])
def test_parse_text_rejects(text):
    with pytest.raises(ConfigError):
        parse_text(text)


def test_unknown_key_rejected():
    with pytest.raises(ConfigError):
        RunConfig.loads("learning_rat = 1e-3\n")


@pytest.mark.parametrize("raw,expected", [("true", True), ("0", False), ("Yes", True), ("off", False)])
def test_bool_parsing(raw, expected):
    assert parse_value("use_inte", raw, bool) is expected


def test_bad_values_rejected():
    with pytest.raises(ConfigError):
        parse_value("use_inte", "maybe", bool)
    with pytest.raises(ConfigError):
        RunConfig.loads("epochs = ten\n")


def test_resolution_accepts_x_separator():
    assert RunConfig.loads("resolution = 512x256\n").resolution == (512, 256)


@pytest.mark.parametrize("kwargs", [
    dict(patch_grid=3), dict(epochs=0), dict(learning_rate=0.0), dict(lambda1=-1.0),
    dict(resolution=(0, 256)), dict(max_steps=-1), dict(backbone_channels=(64, 32, 128, 256)),
])
def test_invalid_configs(kwargs):
    with pytest.raises(ConfigError):
        RunConfig(**kwargs)


def test_precedence(tmp_path):
    path = tmp_path / "c.txt"
    path.write_text("seed = 1\nepochs = 5\nbatch_size = 2\n")
    env = {"PDFNET_SEED": "2", "PDFNET_EPOCHS": "6", "PDFNET_CONFIG": "ignored", "HOME": "/root"}
    cfg = resolve(path, {"seed": "3", "learning_rate": None}, env)
    assert (cfg.seed, cfg.epochs, cfg.batch_size, cfg.learning_rate) == (3, 6, 2, 1e-5)


def test_unknown_env_override_rejected():
    with pytest.raises(ConfigError):
        env_values({"PDFNET_SEEED": "1"})


def test_missing_config_file(tmp_path):
    with pytest.raises(ConfigError):
        resolve(tmp_path / "none.txt")


def test_location_excluded_from_echo():
    a = RunConfig(out_dir="a", resume="r.pt").to_dict(include_location=False)
    b = RunConfig(out_dir="b").to_dict(include_location=False)
    assert a == b and "out_dir" not in a


def test_derived_configs():
    cfg = RunConfig(use_silog=False, tau=0.2, token_limit=16)
    assert not cfg.trains_depth and RunConfig(lambda2=0.0).trains_depth is False
    assert cfg.model_config().tau == 0.2 and cfg.model_config().token_limit == 16
    assert cfg.loss_config().use_silog is False
