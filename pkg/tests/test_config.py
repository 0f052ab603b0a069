import dataclasses

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from coarse2fine import config as C


def test_defaults_match_desk_schedule():
    cfg = C.Config()
    s = cfg.schedule
    assert (s.epochs_a, s.epochs_b, s.epochs_c) == (150, 10, 150)
    assert (s.lr_a, s.lr_b, s.lr_c) == (1e-4, 1e-4, 1e-5)
    assert s.batch_size == 8 and s.clip_norm == 10.0
    assert C.image_size(cfg) == 64
    w = cfg.weights
    assert (w.kp1, w.silh1, w.kp2, w.silh2, w.lap) == (1.0, 5.0, 1.0, 5.0, 10.0)
    assert (w.shape, w.pose, w.limit) == (1e-3, 1e-3, 1e-2)
    assert (w.tversky_alpha, w.tversky_beta) == (0.7, 0.3)
    assert cfg.network.encoder.widths == (16, 32, 64, 128)


def test_full_scale_preset():
    cfg = C.full_scale_preset()
    assert C.image_size(cfg) == 224
    assert (cfg.schedule.epochs_a, cfg.schedule.epochs_b, cfg.schedule.epochs_c) == (200, 10, 200)


def test_dump_parse_roundtrip_default():
    cfg = C.Config()
    assert C.parse_text(C.dump_config(cfg)) == cfg


def test_dump_parse_roundtrip_modified():
    cfg = C.apply_overrides(C.Config(), [
        ("seed", "5"), ("schedule.limit_always", "true"), ("network.encoder.widths", "8, 16"),
        ("eval.part_map", "legs:3,4; face:1"), ("weights.silh1", "2.5"),
    ])
    back = C.parse_text(C.dump_config(cfg))
    assert back == cfg
    assert back.network.encoder.widths == (8, 16)
    assert back.eval.part_map == {"legs": (3, 4), "face": (1,)}


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 2**31), lr=st.floats(1e-8, 1.0), epochs=st.integers(0, 500))
def test_roundtrip_property(seed, lr, epochs):
    cfg = C.apply_overrides(C.Config(), [("seed", str(seed)), ("schedule.lr_c", repr(lr)),
                                         ("schedule.epochs_a", str(epochs))])
    assert C.parse_text(C.dump_config(cfg)) == cfg


def test_comments_and_blank_lines():
    cfg = C.parse_text("# header\n\nseed = 4  # trailing\n   \nschedule.epochs_b=2\n")
    assert cfg.seed == 4 and cfg.schedule.epochs_b == 2


@pytest.mark.parametrize("text, fragment", [
    ("seed 4", "line 1"),
    ("nope = 1", "unknown config key"),
    ("schedule.nope = 1", "unknown config key"),
    ("schedule = 1", "section"),
    ("seed = four", "cannot parse"),
    ("schedule.limit_always = maybe", "cannot parse"),
    ("schedule.batch_size = 0", "batch_size"),
    ("schedule.epochs_a = -1", "epoch"),
])
def test_parse_errors(text, fragment):
    with pytest.raises(C.ConfigParseError, match=fragment):
        C.parse_text(text)


def test_error_reports_line_number():
    with pytest.raises(C.ConfigParseError, match="line 3"):
        C.parse_text("seed = 1\n\nseed = x\n")


def test_overrides_win_over_file(tmp_path):
    path = tmp_path / "run.cfg"
    path.write_text("seed = 3\nschedule.epochs_a = 7\n")
    cfg = C.apply_overrides(C.load_config(str(path)), [("seed", "9")])
    assert cfg.seed == 9 and cfg.schedule.epochs_a == 7


def test_env_var(tmp_path, monkeypatch):
    path = tmp_path / "env.cfg"
    path.write_text("seed = 11\n")
    monkeypatch.setenv(C.ENV_VAR, str(path))
    assert C.load_config().seed == 11
    # an explicit path beats the environment
    other = tmp_path / "other.cfg"
    other.write_text("seed = 12\n")
    assert C.load_config(str(other)).seed == 12


def test_no_file_gives_defaults(monkeypatch):
    monkeypatch.delenv(C.ENV_VAR, raising=False)
    assert C.load_config() == C.Config()


def test_missing_file(tmp_path):
    with pytest.raises(FileNotFoundError):
        C.load_config(str(tmp_path / "absent.cfg"))


def test_configs_are_frozen():
    cfg = C.Config()
    with pytest.raises(dataclasses.FrozenInstanceError):
        cfg.seed = 3


def test_flatten_covers_every_leaf():
    keys = [k for k, _ in C.flatten(C.Config())]
    assert len(keys) == len(set(keys))
    assert "schedule.sharpness" in keys and "eval.tto_lr" in keys and "data.camera.image_size" in keys
