import json

import pytest

from cri.config import Config, apply_env, dumps, from_dict, load_config, output_dir, save_config
from cri.errors import ConfigError


def test_empty_file_gives_defaults(tmp_path):
    p = tmp_path / "c.json"
    p.write_text("")
    cfg = load_config(p)
    assert cfg == Config()
    assert load_config(None) == Config()
    w = cfg.weights
    assert (w.lambda1, w.lambda2, w.lambda_l2, w.lambda_r, w.lambda_l2_r) == (1.0, 0.1, 1.0, 0.1, 1.0)
    s = cfg.schedule
    assert (s.stage1_iters, s.stage2_iters, s.stage1_lr, s.stage2_lr) == (300, 100, 0.01, 0.001)
    assert (cfg.cluster.M, cfg.cluster.N) == (10000, 10)
    assert cfg.task.latent_space == "w+" and cfg.task.degrade_centers is False


def test_negative_lambda_names_the_key():
    with pytest.raises(ConfigError, match="weights.lambda2"):
        from_dict({"weights": {"lambda2": -1.0}})


@pytest.mark.parametrize("bad, name", [
    ({"weights": {"lamda2": 1.0}}, "weights.lamda2"),
    ({"wieghts": {}}, "wieghts"),
    ({"cluster": {"N": "ten"}}, "cluster.N"),
    ({"cluster": {"M": 5, "N": 10}}, "cluster"),
    ({"task": {"task": "deblur"}}, "task.task"),
    ({"task": {"task": "sr", "scale": 3}}, "task.scale"),
    ({"schedule": {"stage1_lr": 0}}, "schedule.stage1_lr"),
])
def test_invalid_values_rejected(bad, name):
    with pytest.raises(ConfigError, match=name.replace(".", r"\.")):
        from_dict(bad)


def test_round_trip(tmp_path):
    cfg = from_dict({"weights": {"lambda2": 0.5}, "cluster": {"N": 4}, "task": {"task": "sr", "scale": 4}})
    path = save_config(cfg, tmp_path / "cfg.json")
    assert load_config(path) == cfg
    assert json.loads(dumps(cfg)) == cfg.to_dict()


def test_invalid_json(tmp_path):
    p = tmp_path / "c.json"
    p.write_text("{not json")
    with pytest.raises(ConfigError):
        load_config(p)


def test_env_overrides():
    cfg = apply_env(Config(), {"CRI_SEED": "42"})
    assert cfg.task.seed == 42
    assert apply_env(Config(), {}) == Config()
    with pytest.raises(ConfigError):
        apply_env(Config(), {"CRI_SEED": "x"})
    assert str(output_dir(None, {"CRI_OUTPUT_DIR": "/tmp/o"})) == "/tmp/o"
    assert str(output_dir("here", {"CRI_OUTPUT_DIR": "/tmp/o"})) == "here"
    assert str(output_dir(None, {})) == "cri_out"
