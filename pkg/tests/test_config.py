import pytest

from iat.config import SCHEMA, ConfigError, RunConfig


def test_defaults_parse_and_round_trip():
    cfg = RunConfig()
    assert cfg["objective.lambda"] == 3.5 and cfg["objective.gamma"] == 0.9
    assert cfg["inverse.epsilon"] is None
    again = RunConfig.parse(cfg.to_text())
    assert again.values == cfg.values


def test_comments_and_whitespace():
    cfg = RunConfig.parse("# header\n\ntrain.epochs = 3   # short run\n  model.hidden=8,4\n")
    assert cfg["train.epochs"] == 3 and cfg["model.hidden"] == (8, 4)


@pytest.mark.parametrize("text", ["train.nope = 1", "epochs = 3", "a.b.c = 1", "train.epochs", "train.epochs = x",
                                  "objective.kind = mart", "train.schedule = step"])
def test_bad_lines_rejected(text):
    with pytest.raises(ConfigError):
        RunConfig.parse(text)


def test_override_order_and_env(tmp_path):
    path = tmp_path / "run.cfg"
    path.write_text("train.seed = 1\nobjective.lambda = 1.0\n")
    cfg = RunConfig.load(path, ["objective.lambda=2.0"], env={})
    assert cfg["objective.lambda"] == 2.0 and cfg["train.seed"] == 1
    assert RunConfig.load(path, [], env={"IAT_SEED": "9"})["train.seed"] == 9
    with pytest.raises(ConfigError):
        RunConfig.load(tmp_path / "missing.cfg", [], env={})


def test_builders():
    cfg = RunConfig.parse("data.n = 40\ndata.test_n = 20\nattack.epsilon = 0.2\nobjective.kind = iat\n")
    train, test = cfg.datasets()
    assert len(train) == 40 and len(test) == 20
    spec = cfg.network(train)
    assert spec.hidden == (64, 64) and spec.num_classes == 2
    tc = cfg.train_config()
    assert tc.inverse.epsilon == pytest.approx(0.1) and tc.inverse.step_size == pytest.approx(0.05)
    assert tc.attack.step_size == pytest.approx(0.05) and tc.objective == "iat"
    assert cfg.eval_attack().steps == 20


def test_blobs_and_idx_requirements():
    train, _ = RunConfig.parse("data.kind = blobs\ndata.n = 30\n").datasets()
    assert train.num_classes == 3
    with pytest.raises(ConfigError):
        RunConfig.parse("data.kind = idx\n").datasets()


def test_schema_keys_have_one_dot():
    assert all(k.count(".") == 1 for k in SCHEMA)
