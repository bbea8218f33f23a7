import pytest

from pafs.config import DEFAULTS, RunConfig, load_config, parse_overrides, parse_text
from pafs.errors import ConfigError


def test_defaults_validate():
    cfg = RunConfig().validate()
    assert cfg["loss.lambda"] == 0.3 and cfg["episode.n_way"] == 5 and cfg["episode.k_shot"] == 5
    assert cfg.segment_frames() == 501
    assert cfg.model().conv_output_shape() == (4, 31)


def test_unknown_key_rejected():
    with pytest.raises(ConfigError, match="loss.lamda"):
        parse_text("loss.lamda = 0.3")
    with pytest.raises(ConfigError):
        RunConfig({"nope": 1})


def test_parse_types():
    vals = parse_text("""
        # comment
        seed = 7
        loss.lambda = 0.5   # trailing
        fs.squared = false
        train.milestones = 10, 20
        loss.kind = fs+cpl
    """)
    assert vals == {"seed": 7, "loss.lambda": 0.5, "fs.squared": False, "train.milestones": [10, 20],
                    "loss.kind": "fs+cpl"}
    with pytest.raises(ConfigError, match="seed"):
        parse_text("seed = seven")
    with pytest.raises(ConfigError):
        parse_text("just words")


def test_text_roundtrip():
    cfg = RunConfig({"seed": 3, "apl.alpha_deg": 30.0, "eval.seeds": [0, 1, 2]})
    assert RunConfig(parse_text(cfg.to_text())) == cfg


@pytest.mark.parametrize("key,value", [
    ("train.gamma", "0"), ("train.gamma", "1.5"), ("apl.alpha_deg", "90"), ("cpl.temperature", "0"),
    ("loss.kind", "fs+xyz"), ("apl.anchor_mode", "queries"), ("eval.shots", "0,5"),
    ("aug.time_mask_max", "600"), ("audio.win_length", "1024"), ("train.lr", "-1"),
])
def test_validation_names_offending_key(key, value):
    with pytest.raises(ConfigError, match=key.split(".")[-1] if key != "aug.time_mask_max" else "mask"):
        load_config(overrides=parse_overrides([f"{key}={value}"]), env={})


def test_precedence(tmp_path):
    p = tmp_path / "run.cfg"
    p.write_text("seed = 1\nloss.lambda = 0.2\n")
    assert load_config(p, env={})["seed"] == 1
    assert load_config(p, env={"PAFS_SEED": "5"})["seed"] == 5
    cfg = load_config(p, {"seed": 9}, env={"PAFS_SEED": "5"})
    assert cfg["seed"] == 9 and cfg["loss.lambda"] == 0.2
    base = load_config(None, env={}, base={"loss.lambda": 0.7})
    assert base["loss.lambda"] == 0.7


def test_missing_config_file(tmp_path):
    with pytest.raises(ConfigError):
        load_config(tmp_path / "absent.cfg", env={})


def test_unprojected_queries_need_matching_dims():
    with pytest.raises(ConfigError):
        load_config(overrides={"contrastive.project_queries": False}, env={})
    cfg = load_config(overrides={"contrastive.project_queries": False, "model.proj_dim": 256}, env={})
    assert not cfg.model().project_queries


def test_every_default_parses_from_its_text():
    from pafs.config import format_value, parse_value
    for key, value in DEFAULTS.items():
        assert parse_value(key, format_value(value)) == value
