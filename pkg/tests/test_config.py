import pytest

from ashc.config import ConfigError, cuk_from_config, default_config_text, load_config, parse_config
from ashc.cuk import DEFAULT_M


def test_bundled_defaults():
    cfg = load_config()
    assert cfg.number("certificate.lambda") == 2.0
    assert cfg.get("certificate.M") == [list(r) for r in DEFAULT_M]
    assert cfg.vector("hierarchical.targets") == [-19.11, -80.90, -44.27, -4.31, -12.48, -32.91]
    assert cfg.number("hierarchical.t_end") == 30.0 and cfg.number("mrelation.t_end") == 15.0
    assert cfg.integer("output.decimation") == 10
    assert "#" in default_config_text()


def test_override_merges_and_changes_digest(tmp_path):
    base = load_config()
    path = tmp_path / "c.toml"
    path.write_text("[certificate]\nlambda = 10.0  # comment\n")
    cfg = load_config(path)
    assert cfg.number("certificate.lambda") == 10.0
    assert cfg.number("bound.c0") == 0.52
    assert cfg.digest != base.digest
    assert load_config(path).digest == cfg.digest


def test_dotted_keys_allowed():
    cfg = parse_config('faults.m_root = "other"\n')
    assert cfg.get("faults.m_root") == "other"


@pytest.mark.parametrize("text", [
    "not toml [[[",
    "[nosuch]\nx = 1\n",
    "[plant]\nR_x = 1.0\n",
    "plant = 3\n",
])
def test_malformed(text):
    with pytest.raises(ConfigError):
        parse_config(text)


def test_type_errors():
    cfg = parse_config('[certificate]\nlambda = "two"\n')
    with pytest.raises(ConfigError):
        cfg.number("certificate.lambda")
    cfg = parse_config("[verify]\nsamples = 1.5\n")
    with pytest.raises(ConfigError):
        cfg.integer("verify.samples")
    cfg = parse_config('[abstraction]\ndelta = "cubic"\n')
    with pytest.raises(ConfigError):
        cuk_from_config(cfg)
    cfg = parse_config("[certificate]\nM = [[1.0]]\n")
    with pytest.raises(ConfigError):
        cuk_from_config(cfg)
    cfg = parse_config("[plant]\nL1 = -1.0\n")
    with pytest.raises(ConfigError):
        cuk_from_config(cfg)
    with pytest.raises(ConfigError):
        load_config("/nonexistent/path.toml")
    with pytest.raises(ConfigError):
        load_config().get("plant.nothing")


def test_cuk_from_config_builds_faulted_models():
    cfg = parse_config("[faults]\np4_offset = 0.5\n")
    cuk = cuk_from_config(cfg)
    assert cuk.p4_offset == 0.5
    assert cuk_from_config(load_config(), "unit").delta_variant == "unit"
