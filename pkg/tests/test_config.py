import pytest

from collabmi.config import (
    OUTPUT_ENV,
    ExperimentConfig,
    emit_config,
    from_dict,
    load_config,
    parse_config,
    parse_override,
)
from collabmi.errors import ConfigError


def test_empty_document_is_the_default():
    cfg = parse_config("")
    assert cfg == ExperimentConfig()
    assert cfg.loss.alpha == 0.2 and cfg.loss.lam == 0.1
    assert cfg.loss.beta_g == cfg.loss.beta_l == 0.5
    assert (cfg.loss.lr_pipeline, cfg.loss.lr_cmimnet) == (1e-3, 1e-4)
    assert cfg.scene.agent_count == (3, 3)
    assert (cfg.data.n_train, cfg.data.n_test, cfg.train.epochs) == (200, 50, 30)


def test_round_trip_through_yaml():
    cfg = from_dict({"loss": {"alpha": 0.35}, "seeds": [1, 2], "eval": {"noise_stds": [0, 0.1]}})
    assert parse_config(emit_config(cfg)) == cfg
    assert cfg.eval.noise_stds == (0.0, 0.1)


@pytest.mark.parametrize(
    "doc, path",
    [
        ({"loss": {"alpha": 1.5}}, "loss.alpha"),
        ({"loss": {"alhpa": 0.1}}, "loss.alhpa"),
        ({"bogus": 1}, "bogus"),
        ({"train": {"epochs": "ten"}}, "train.epochs"),
        ({"train": {"epochs": 2.5}}, "train.epochs"),
        ({"data": {"occlusion_only": 1}}, "data.occlusion_only"),
        ({"seeds": []}, "seeds"),
        ({"scene": {"agent_count": [3]}}, "scene.agent_count"),
        ({"eval": {"modes": ["none", "mid"]}}, "eval.modes[1]"),
        ({"eval": {"ego": 5}}, "eval.ego"),
        ({"network": {"compress_denominator": 3}}, "network.compress_denominator"),
        ({"data": {"n_train": 3}}, "data.n_train"),
        ({"loss": []}, "loss"),
    ],
)
def test_invalid_documents_name_the_key(doc, path):
    with pytest.raises(ConfigError) as info:
        from_dict(doc)
    assert info.value.path == path


def test_malformed_yaml():
    with pytest.raises(ConfigError):
        parse_config("loss: [unclosed")


def test_precedence_file_env_override(tmp_path):
    f = tmp_path / "exp.yaml"
    f.write_text("output_dir: from_file\nloss:\n  alpha: 0.3\n")
    assert load_config(f, environ={}).output_dir == "from_file"
    assert load_config(f, environ={OUTPUT_ENV: "from_env"}).output_dir == "from_env"
    cfg = load_config(f, ["output_dir=from_cli", "loss.alpha=0.4"], environ={OUTPUT_ENV: "from_env"})
    assert cfg.output_dir == "from_cli" and cfg.loss.alpha == 0.4
    assert load_config(f, environ={}).loss.alpha == 0.3


def test_missing_file_and_bad_overrides(tmp_path):
    with pytest.raises(ConfigError):
        load_config(tmp_path / "nope.yaml", environ={})
    with pytest.raises(ConfigError):
        load_config(None, ["loss.alpha"], environ={})
    with pytest.raises(ConfigError):
        load_config(None, ["loss.alpha.x=1"], environ={"X": "y"})


def test_override_values_are_typed():
    assert parse_override("seeds=[0, 1]") == ("seeds", [0, 1])
    assert parse_override("loss.alpha=0") == ("loss.alpha", 0)
    assert load_config(None, ["loss.alpha=0"], environ={}).loss.alpha == 0.0


def test_collab_modes():
    cfg = ExperimentConfig()
    labels = [m.label for m in cfg.collab_modes()]
    assert labels == ["none", "late", "early", "intermediate", "intermediate-alpha0"]
    noisy = cfg.collab_modes(noise=True)
    assert [(m.label, m.noise_std) for m in noisy if m.kind == "intermediate"] == [
        (label, s) for label in ("intermediate", "intermediate-alpha0") for s in (0.0, 0.2, 0.4)
    ]
    assert cfg.train_config(alpha=0.0).loss.alpha == 0.0
