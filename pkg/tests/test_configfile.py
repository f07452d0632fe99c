from pathlib import Path

import pytest
from hypothesis import given, strategies as st

from promptnorm.configfile import SCHEMA, ConfigError, defaults, load_config, parse_config
from promptnorm.harness import DEFAULT_FACTORS, DEFAULT_VARIANCES

CONFIGS = Path(__file__).resolve().parents[1] / "configs"


def test_empty_document_gives_defaults():
    s = parse_config("")
    assert s.train.epochs == 200 and s.train.mode == "ce"
    assert s.train.pan.tau == 0.5 and s.train.pan.n == 1
    assert s.train.schedule.k == 0.2 and not s.train.schedule.enabled
    assert s.sweep_grids[0].parameters == DEFAULT_VARIANCES
    assert s.sweep_grids[1].parameters == DEFAULT_FACTORS
    assert s.sweep_seeds == (0, 1, 2, 3, 4)
    assert s.workers == 1


def test_every_key_has_default():
    d = defaults()
    assert set(d) == set(SCHEMA)
    for sec, keys in SCHEMA.items():
        assert set(d[sec]) == set(keys)


def test_values_parsed():
    s = parse_config("[train]\nmode = both\nbeta = 0.3\nomega_schedule = yes\n"
                     "[pun]\nomega = 10\nnorm = inf\n[sweep]\narms = rescale\nfactors = 0.5, 2\n")
    assert s.train.mode == "both" and s.train.beta.beta == 0.3
    assert s.train.schedule.enabled
    assert s.train.pun.omega == 10.0 and s.train.pun.p == "inf"
    assert len(s.sweep_grids) == 1 and s.sweep_grids[0].parameters == (0.5, 2.0)


def test_unknown_key_names_line():
    text = "[model]\nlength = 16\n\n[train]\nlr = 0.1\nlearning_rate = 3\n"
    with pytest.raises(ConfigError) as err:
        parse_config(text, "run.cfg")
    e = err.value
    assert (e.line, e.section, e.key) == (6, "train", "learning_rate")
    assert str(e).startswith("run.cfg:6: [train] learning_rate: unknown key")


def test_unknown_section():
    with pytest.raises(ConfigError) as err:
        parse_config("[optim]\nlr = 1\n", "x.cfg")
    assert err.value.section == "optim" and err.value.line == 1


@pytest.mark.parametrize("section,key,value", [
    ("train", "lr", "-0.1"),
    ("train", "epochs", "0"),
    ("train", "batch_size", "two"),
    ("train", "beta", "1.5"),
    ("train", "momentum", "1"),
    ("pan", "tau", "1"),
    ("pan", "tau", "0"),
    ("pan", "n", "0"),
    ("pun", "omega", "nan"),
    ("pun", "norm", "three"),
    ("model", "classes", "1"),
    ("model", "temperature", "0"),
    ("sweep", "variances", "0.1, -1"),
    ("sweep", "seeds", ""),
    ("io", "workers", "0"),
])
def test_range_errors_carry_location(section, key, value):
    text = f"# header\n[{section}]\n{key} = {value}\n"
    with pytest.raises(ConfigError) as err:
        parse_config(text, "bad.cfg")
    e = err.value
    assert (e.section, e.key, e.line) == (section, key, 3)
    assert e.reason


def test_cross_check_pan_n():
    with pytest.raises(ConfigError) as err:
        parse_config("[model]\nlength = 4\n[pan]\nn = 5\n")
    assert (err.value.section, err.value.key, err.value.line) == ("pan", "n", 4)


def test_duplicate_key():
    with pytest.raises(ConfigError) as err:
        parse_config("[train]\nlr = 1\nlr = 2\n")
    assert err.value.line == 3


def test_key_outside_section():
    with pytest.raises(ConfigError):
        parse_config("lr = 1\n")


def test_overrides():
    s = parse_config("[train]\nlr = 0.5\n", overrides=["train.lr=0.25", "io.workers=3"])
    assert s.train.lr == 0.25 and s.workers == 3
    with pytest.raises(ConfigError) as err:
        parse_config("", overrides=["train.bogus=1"])
    assert err.value.key == "bogus"
    with pytest.raises(ConfigError):
        parse_config("", overrides=["lr=1"])


def test_missing_file():
    with pytest.raises(ConfigError, match="not found"):
        load_config("/nonexistent/x.cfg")


@pytest.mark.parametrize("name,mode,omega", [
    ("pun_default.cfg", "pun", 1.0),
    ("pun_strong.cfg", "pun", 10.0),
    ("pun_food_pets.cfg", "pun", 50.0),
])
def test_shipped_pun_configs(name, mode, omega):
    s = load_config(CONFIGS / name)
    assert s.train.mode == mode and s.train.pun.omega == omega


def test_shipped_pan_and_default_configs():
    pan = load_config(CONFIGS / "pan_default.cfg").train
    assert pan.mode == "pan" and pan.pan.tau == 0.5 and pan.pan.n == 1 and pan.pan.omega == 1.0
    assert load_config(CONFIGS / "default.cfg").train.mode == "ce"


@given(st.text(alphabet="[]=:#;\n abcdeilmnoprstuwx0123456789.,-_", max_size=120))
def test_parse_is_total(text):
    # every document either parses or fails with a located ConfigError
    try:
        parse_config(text)
    except ConfigError as e:
        assert e.reason and e.section


@given(st.sampled_from(sorted((s, k) for s in SCHEMA for k in SCHEMA[s])),
       st.text(alphabet="abc-0123456789.,e", max_size=8))
def test_any_bad_value_is_reported_with_key(sk, raw):
    section, key = sk
    try:
        parse_config(f"[{section}]\n{key} = {raw}\n")
    except ConfigError as e:
        assert e.section == section
        assert e.key == key
