import pytest
from pydantic import ValidationError

from src.config import (
    BACKBONE_POOL_AFTER,
    ModelConfig,
    RunConfig,
    build_run_config,
    dump_run_config,
    load_run_config,
    log_dir_name,
    model_config_with_preset,
    parse_config_text,
    worker_count,
)
from src.errors import ConfigError

SAMPLE = """
# toy run
seed = 3
model.mask_preset = "112"
model.rpn.batch_size = 64
model.train.iterations = 20
eval.priority = ["grasp", "pound", "w-grasp", "contain"]
paths.data = data/train
"""


def test_parse_nests_dotted_keys():
    tree = parse_config_text(SAMPLE)
    assert tree["seed"] == 3
    assert tree["model"]["rpn"] == {"batch_size": 64}
    assert tree["paths"]["data"] == "data/train"
    assert tree["eval"]["priority"][-1] == "contain"


def test_build_validates_values():
    config = build_run_config(parse_config_text(SAMPLE))
    assert config.model.mask_size == 112
    assert config.model.train.iterations == 20
    assert config.seed == 3


@pytest.mark.parametrize(
    "text,match",
    [
        ("seed 3", "expected 'key = value'"),
        ("seed = 1\nseed = 2", "duplicate key"),
        ("model..rpn = 1", "malformed key"),
        ("model = 1\nmodel.seed = 2", "conflicts"),
    ],
)
def test_parse_errors_name_the_line(text, match):
    with pytest.raises(ConfigError, match=match):
        parse_config_text(text, "run.cfg")


def test_unknown_key_rejected():
    with pytest.raises(ConfigError, match="model.rpn.batch"):
        build_run_config({"model": {"rpn": {"batch": 3}}}, "run.cfg")


def test_out_of_range_values_rejected():
    with pytest.raises(ConfigError, match="score_gate"):
        build_run_config({"model": {"infer": {"score_gate": 1.5}}})
    with pytest.raises(ConfigError):
        build_run_config({"scene": {"objects_per_scene": [3, 1]}})


def test_load_defaults_and_missing_file(tmp_path):
    assert load_run_config(None) == RunConfig()
    with pytest.raises(FileNotFoundError):
        load_run_config(tmp_path / "absent.cfg")


def test_dump_round_trip(tmp_path):
    config = build_run_config(parse_config_text(SAMPLE))
    path = tmp_path / "dumped.cfg"
    path.write_text(dump_run_config(config))
    assert load_run_config(path) == config


def test_mask_presets():
    assert ModelConfig(mask_preset="28").mask_sizes() == [7, 28]
    assert ModelConfig(mask_preset="56").mask_sizes() == [7, 28, 56]
    six = ModelConfig(mask_preset="14_6conv")
    assert six.mask_convs_per_stage == 6
    assert six.mask_label == "mask14_6conv"
    with pytest.raises(ValidationError):
        ModelConfig(mask_preset="99")


def test_preset_swap_keeps_other_fields(tiny_config):
    swapped = model_config_with_preset(tiny_config, "112")
    assert swapped.mask_size == 112
    assert swapped.fc_width == tiny_config.fc_width
    with pytest.raises(ConfigError):
        model_config_with_preset(tiny_config, "7")


def test_explicit_mask_head_overrides_preset():
    config = ModelConfig(mask_head=[{"stride": 2, "kernel_size": 4, "padding": 1}] * 2)
    assert config.mask_sizes() == [7, 14, 28]


def test_broken_mask_chain_rejected():
    with pytest.raises(ValidationError):
        ModelConfig(roialign_output=(1, 1), mask_head=[{"stride": 1, "kernel_size": 1, "padding": 2}])


def test_feature_stride_follows_backbone_pools():
    config = ModelConfig()
    assert config.feature_stride == 2 ** len(BACKBONE_POOL_AFTER) == 4
    assert config.anchors.stride == config.feature_stride


def test_anchor_stride_must_match_backbone():
    with pytest.raises(ValidationError, match="backbone stride 4"):
        ModelConfig(anchors={"stride": 8.0})


def test_worker_count_from_environment(monkeypatch):
    monkeypatch.setenv("AFFKIT_THREADS", "3")
    assert worker_count() == 3
    monkeypatch.setenv("AFFKIT_THREADS", "0")
    assert 1 <= worker_count() <= 8
    monkeypatch.setenv("AFFKIT_THREADS", "many")
    with pytest.raises(ConfigError):
        worker_count()
    monkeypatch.setenv("AFFKIT_THREADS", "-1")
    with pytest.raises(ConfigError):
        worker_count()


def test_log_dir_name(monkeypatch):
    monkeypatch.delenv("AFFKIT_LOG_DIR", raising=False)
    assert log_dir_name() == "log"
    monkeypatch.setenv("AFFKIT_LOG_DIR", "runs")
    assert log_dir_name() == "runs"
