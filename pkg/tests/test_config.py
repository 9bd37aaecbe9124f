import pytest
from hypothesis import given, settings, strategies as st

from lift.config import (LiftConfig, RunLock, RunLockError, RunManifest, coerce, dump_config, env_overrides,
                         load_config, parse_config_text)


def test_defaults_are_reference_recipe():
    cfg = LiftConfig()
    assert (cfg.seed, cfg.budget, cfg.gamma) == (17, 2048, 2.0)
    assert (cfg.lambda_ce, cfg.lambda_out, cfg.lambda_cls, cfg.lambda_hist) == (1.0, 1.0, 0.5, 0.25)
    assert cfg.epochs is None and cfg.stage_overrides == ()


def test_overrides_and_stage_keys():
    cfg = LiftConfig().with_overrides({"epochs": "3", "history_labels": "off", "stage2.lr": "1e-3",
                                       "stage1.betas": "0.8,0.9"})
    assert cfg.epochs == 3 and cfg.history_labels is False
    assert cfg.stage_values(2) == {"lr": 1e-3}
    assert cfg.stage_values(1) == {"betas": (0.8, 0.9)}
    assert cfg.stage_values(3) == {}
    again = cfg.with_overrides({"stage2.lr": "2e-3"})
    assert again.stage_values(2) == {"lr": 2e-3} and again.stage_values(1) == {"betas": (0.8, 0.9)}


def test_bad_values_rejected():
    with pytest.raises(KeyError):
        LiftConfig().with_overrides({"no_such_key": 1})
    with pytest.raises(KeyError):
        LiftConfig().with_overrides({"stage1.colour": "red"})
    with pytest.raises(ValueError):
        coerce("history_labels", "maybe")
    with pytest.raises(ValueError):
        coerce("epochs", "two")
    assert coerce("max_vocab", "none") is None
    with pytest.raises(ValueError):
        parse_config_text("seed 3\n")


def test_env_overrides():
    env = {"LIFT_EPOCHS": "1", "LIFT_STAGE2_LR": "0.01", "LIFT_UNKNOWN": "x", "HOME": "/root"}
    assert env_overrides(env) == {"epochs": "1", "stage2.lr": "0.01"}
    cfg = load_config(overrides={"seed": 5}, environ=env)
    assert cfg.epochs == 1 and cfg.stage_values(2) == {"lr": 0.01} and cfg.seed == 5


def test_precedence(tmp_path):
    p = tmp_path / "c.txt"
    p.write_text("# comment\nseed = 3\nepochs = 2  # trailing\n")
    cfg = load_config(p, overrides={"epochs": 4}, environ={"LIFT_SEED": "9"})
    assert cfg.seed == 9 and cfg.epochs == 4


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10**6), st.one_of(st.none(), st.integers(1, 9)), st.booleans(),
       st.floats(1e-6, 1.0, allow_nan=False), st.sampled_from(["cosine", "constant"]))
def test_dump_parse_round_trip(seed, epochs, flag, lr, sched):
    cfg = LiftConfig().with_overrides({"seed": seed, "epochs": epochs, "mask_history": flag,
                                       "stage3.lr": repr(lr), "stage3.lr_schedule": sched})
    back = LiftConfig().with_overrides(parse_config_text(dump_config(cfg)))
    assert back == cfg and back.hash() == cfg.hash()


def test_run_lock(tmp_path):
    with RunLock(tmp_path / "r"):
        assert (tmp_path / "r" / ".lock").is_file()
        with pytest.raises(RunLockError):
            RunLock(tmp_path / "r").__enter__()
    assert not (tmp_path / "r" / ".lock").exists()


def test_manifest_round_trip(tmp_path):
    f = tmp_path / "a.txt"
    f.write_text("x")
    m = RunManifest("r1", LiftConfig().to_dict(), 17)
    m.add_artifact(tmp_path, f)
    m.save(tmp_path)
    back = RunManifest.load(tmp_path)
    assert back == m and "created" not in back.comparable()
    assert list(back.artifacts) == ["a.txt"]
