import json

import pytest

from lanm.config import ConfigError, ExperimentConfig, resolve


def test_defaults_valid_and_roundtrip():
    cfg = ExperimentConfig()
    d = cfg.to_dict()
    assert ExperimentConfig.from_dict(d).to_dict() == d
    assert d["seeds"] == [0] and d["eval"]["tau"] == 0.1
    assert d["train"]["lr"] == 1e-3 and d["model"]["obs_var"] == 0.01


def test_load_file(tmp_path):
    f = tmp_path / "c.json"
    f.write_text(json.dumps({"scm": {"ell": 3, "violation_nodes": [2]}, "noise": {"M": 10}, "seeds": [1, 2]}))
    cfg = resolve(f)
    assert cfg.scm.ell == 3 and cfg.noise.M == 10 and cfg.seeds == [1, 2]
    g = cfg.gen_config(5)
    assert g.seed == 5 and g.violation_nodes == [2] and g.M == 10
    assert resolve(None).to_dict() == ExperimentConfig().to_dict()


@pytest.mark.parametrize(
    "raw, msg",
    [
        ({"scm": {"elll": 3}}, "unknown key"),
        ({"bogus": {}}, "unknown top-level"),
        ({"scm": {"ell": "3"}}, "scm.ell"),
        ({"scm": {"ell": True}}, "scm.ell"),
        ({"scm": {"ell": 0}}, "at least 1"),
        ({"scm": {"ell": 3, "violation_nodes": [1]}}, "violation_nodes"),
        ({"scm": {"ell": 2, "pnl": ["identity"]}}, "2 tags"),
        ({"scm": {"ell": 1, "pnl": ["square"]}}, "unknown tag"),
        ({"scm": {"equations": ["root"]}}, "together"),
        ({"noise": {"M": 0}}, "positive"),
        ({"noise": {"beta_range": [0.0, 1.0]}}, "positive"),
        ({"noise": {"alpha_range": [2.0, 1.0]}}, "ordered pair"),
        ({"mixing": {"D": 2}}, "at least scm.ell"),
        ({"mixing": {"identity": True, "D": 6}}, "identity mixing"),
        ({"model": {"obs_var": 0.0}}, "obs_var"),
        ({"train": {"lr": 0}}, "lr > 0"),
        ({"train": {"beta1": 1.0}}, "betas"),
        ({"eval": {"tau": 0}}, "tau"),
        ({"data": {"source": "csv"}}, "data.source"),
        ({"data": {"source": "fmri"}}, "data.path"),
        ({"seeds": []}, "non-empty"),
        ({"seeds": [-1]}, "non-negative"),
        ({"scm": []}, "expected an object"),
    ],
)
def test_invalid_configs(raw, msg):
    with pytest.raises(ConfigError, match=msg):
        ExperimentConfig.from_dict(raw)


def test_invalid_json(tmp_path):
    f = tmp_path / "c.json"
    f.write_text("{not json")
    with pytest.raises(ConfigError, match="invalid JSON"):
        ExperimentConfig.load(f)
    with pytest.raises(ConfigError):
        ExperimentConfig.from_dict([1, 2])


def test_with_seed_and_derived_configs():
    cfg = ExperimentConfig.from_dict({"model": {"hidden": 16}, "train": {"epochs": 3}, "eval": {"affine_r": 0.7}})
    one = cfg.with_seed(4)
    assert one.seeds == [4] and cfg.seeds == [0]
    mc = cfg.model_config(ell=2, u_dim=5, x_dim=3)
    assert (mc.hidden, mc.u_dim, mc.x_dim) == (16, 5, 3)
    assert cfg.train_config(9).seed == 9 and cfg.train_config(9).epochs == 3
    assert cfg.thresholds().affine_r == 0.7


def test_float_fields_accept_ints():
    cfg = ExperimentConfig.from_dict({"train": {"lr": 1}, "noise": {"alpha_range": [-1, 1]}})
    assert cfg.train.lr == 1
