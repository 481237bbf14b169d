import json

import pytest
from hypothesis import given, strategies as st

from mvagg.config import SEED_ENV, ConfigError, ExperimentConfig, apply_overrides, load_config


def test_defaults_round_trip():
    cfg = ExperimentConfig()
    assert ExperimentConfig.loads(cfg.dumps()) == cfg
    obj = json.loads(cfg.dumps())
    assert set(obj) == {"scene", "model", "metric", "epochs", "lr", "momentum", "clip_norm", "seed", "output_dir"}
    assert obj["model"]["gates"] == "both" and obj["scene"]["n_cameras"] == 4


@given(
    d=st.integers(1, 8), seed=st.integers(0, 2**31 - 1), lr=st.floats(1e-5, 1.0),
    gates=st.sampled_from(["both", "channel", "spatial", "none"]), t=st.one_of(st.none(), st.floats(0.5, 30)),
)
def test_round_trip_property(d, seed, lr, gates, t):
    cfg = apply_overrides(ExperimentConfig(), [f"model.D={d}", f"seed={seed}", f"lr={lr!r}", f"model.gates={gates}", f"metric.t={json.dumps(t)}"])
    assert ExperimentConfig.loads(cfg.dumps()) == cfg


def test_overrides():
    cfg = apply_overrides(ExperimentConfig(), ["model.D=6", "epochs=3", "model.gates=none", "output_dir=runs/x", "model.K=null"])
    assert cfg.model.D == 6 and cfg.epochs == 3 and cfg.model.gates == "none" and cfg.output_dir == "runs/x"
    assert cfg.model.K is None


@pytest.mark.parametrize("bad", ["nokey", "model.bogus=1", "bogus.D=1", "model.gates=sideways", "model.K=1000", "scene=3", "epochs=[1"])
def test_bad_overrides(bad):
    with pytest.raises(ConfigError):
        load_config(overrides=[bad], env={})


def test_unknown_keys_in_file(tmp_path):
    obj = ExperimentConfig().to_json()
    obj["scene"]["bogus"] = 1
    (tmp_path / "c.json").write_text(json.dumps(obj))
    with pytest.raises(ConfigError):
        load_config(tmp_path / "c.json", env={})
    with pytest.raises(ConfigError):
        load_config(tmp_path / "missing.json", env={})


def test_file_then_overrides_then_env(tmp_path):
    (tmp_path / "c.json").write_text(apply_overrides(ExperimentConfig(), ["seed=5", "epochs=2"]).dumps())
    cfg = load_config(tmp_path / "c.json", ["epochs=4"], env={})
    assert (cfg.seed, cfg.epochs) == (5, 4)
    cfg = load_config(tmp_path / "c.json", ["seed=6"], env={SEED_ENV: "9"})
    assert cfg.seed == 9 and cfg.train.seed == 9
    with pytest.raises(ConfigError):
        load_config(env={SEED_ENV: "x"})


def test_train_view():
    cfg = apply_overrides(ExperimentConfig(), ["epochs=3", "lr=0.5", "momentum=0.0", "clip_norm=1.0", "seed=2"])
    t = cfg.train
    assert (t.epochs, t.lr, t.momentum, t.clip_norm, t.seed) == (3, 0.5, 0.0, 1.0, 2)
