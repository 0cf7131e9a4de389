import pytest
from hypothesis import given, strategies as st

from swinchex.config import ConfigError, RunConfig, desk_run_config
from swinchex.model import ModelConfig


def test_defaults_roundtrip():
    cfg = RunConfig()
    assert RunConfig.from_text(cfg.to_text()) == cfg


@given(
    st.integers(0, 2**31), st.floats(0.05, 0.95), st.floats(1e-6, 1.0), st.integers(1, 64),
    st.sampled_from(["headless", "mlp1", "mlp2", "mlp3"]), st.booleans(), st.sampled_from(["relu", "gelu"]),
)
def test_text_roundtrip(seed, frac, lr, batch, variant, qkv, act):
    cfg = RunConfig().with_overrides([
        f"split.seed={seed}", f"split.train_frac={frac!r}", f"train.lr={lr!r}", f"train.batch_size={batch}",
        f"model.head_variant={variant}", f"model.qkv_bias={qkv}", f"model.head_activation={act}",
    ])
    back = RunConfig.from_text(cfg.to_text())
    assert back == cfg
    assert back.split.train_frac == frac and back.train.lr == lr


def test_partial_file_uses_defaults():
    cfg = RunConfig.from_text("[train]\nepochs = 3\n[model]\ndepths = 2, 2\nnum_heads = 2, 4\n")
    assert cfg.train.epochs == 3 and cfg.train.lr == 3e-5
    assert cfg.model.depths == (2, 2) and cfg.model.head_widths == (384, 48, 48)


def test_unknown_section_and_key():
    with pytest.raises(ConfigError, match=r"unknown section \[optim\]"):
        RunConfig.from_text("[optim]\nlr = 1\n")
    with pytest.raises(ConfigError, match=r"x.ini: \[train\] lrate: unknown key"):
        RunConfig.from_text("[train]\nlrate = 1\n", "x.ini")
    with pytest.raises(ConfigError, match=r"\[train\] epochs"):
        RunConfig.from_text("[train]\nepochs = many\n")


def test_overrides():
    cfg = RunConfig().with_overrides(["train.lr=0.5", "model.head_variant=mlp1"])
    assert cfg.train.lr == 0.5 and cfg.model.head_widths == (48,)
    cfg = cfg.with_overrides(["model.head_widths=7"])
    assert cfg.model.head_widths == (7,)
    for bad in ["train.lr", "lr=1", "nope.lr=1"]:
        with pytest.raises(ConfigError):
            RunConfig().with_overrides([bad])


@pytest.mark.parametrize("override,where", [
    ("train.lr=0", "[train] lr"),
    ("train.lr=-1", "[train] lr"),
    ("train.batch_size=0", "[train] batch_size"),
    ("train.epochs=-1", "[train] epochs"),
    ("train.optimizer=rmsprop", "[train] optimizer"),
    ("split.train_frac=1.0", "[split] train_frac"),
    ("model.window_size=0", "[model] window_size"),
    ("model.num_heads=5, 12, 24, 48", "[model]"),
])
def test_validation_messages(override, where):
    cfg = RunConfig().with_overrides([override])
    with pytest.raises(ConfigError, match=where.replace("[", r"\[").replace("]", r"\]")):
        cfg.validate(need_data=False)


def test_missing_data_paths(tmp_path):
    cfg = RunConfig.from_text("[data]\nlabels = nope.csv\nimages = imgs\n", "r.ini")
    with pytest.raises(ConfigError, match=r"r.ini: \[data\] labels"):
        cfg.validate()
    cfg.validate(need_data=False)


def test_load_resolves_relative_paths(tmp_path):
    (tmp_path / "sub").mkdir()
    p = tmp_path / "sub" / "run.ini"
    p.write_text("[data]\nlabels = l.csv\nimages = /abs/imgs\n[output]\ndir = out\n")
    cfg = RunConfig.load(p)
    assert cfg.data.labels == str(tmp_path / "sub" / "l.csv")
    assert cfg.data.images == "/abs/imgs"
    assert cfg.manifest_path == tmp_path / "sub" / "out" / "split.txt"
    assert cfg.source == str(p)
    with pytest.raises(ConfigError, match="cannot read"):
        RunConfig.load(tmp_path / "missing.ini")


def test_desk_defaults():
    cfg = desk_run_config()
    assert cfg.model == ModelConfig.desk(init_std=0.1)
    assert cfg.train.lr == 3e-4 and cfg.train.epochs == 30
