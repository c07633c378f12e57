from pathlib import Path

import pytest

from cuspflow.config import ConfigError, default_config_text, load_config, output_directory


def write(tmp_path, text):
    p = tmp_path / "c.toml"
    p.write_text(text)
    return p


def test_default_parses():
    cfg = load_config()
    assert cfg.surface.sigma == (2.0,) and cfg.surface.mu == 2.0
    assert cfg.discretization.n_core == 128 and cfg.discretization.n_s == 256
    assert cfg.flow.rho == -1.0 and cfg.flow.rho_mode == "explicit"
    assert len(cfg.initial.bumps) == 1
    assert cfg.initial.end_perturbations(1)[0].amplitude == 0.2


def test_overrides():
    cfg = load_config(None, ["flow.rho=-2.0", "discretization.n_core=32", "flow.rho_mode=\"explicit\""])
    assert cfg.flow.rho == -2.0 and cfg.discretization.n_core == 32
    with pytest.raises(ConfigError):
        load_config(None, ["rho=-2"])
    with pytest.raises(ConfigError):
        load_config(None, ["flow.rho"])


def test_small_mu_rejected_with_path(tmp_path):
    text = default_config_text().replace("mu = 2.0", "mu = 0.5")
    with pytest.raises(ConfigError) as exc:
        load_config(write(tmp_path, text))
    assert exc.value.path == "surface.mu"
    lines = text.splitlines()
    assert lines[exc.value.line - 1].startswith("mu = 0.5")


def test_overlapping_punctures_rejected(tmp_path):
    text = default_config_text().replace(
        "punctures = [[0.5, 0.5]]\nsigma = [2.0]", "punctures = [[0.5, 0.5], [0.55, 0.5]]\nsigma = [2.0, 1.0]")
    with pytest.raises(ConfigError) as exc:
        load_config(write(tmp_path, text))
    assert exc.value.path == "surface.punctures"
    assert "[surface.punctures]" in str(exc.value)


def test_unknown_key_has_line(tmp_path):
    text = default_config_text().replace("tol = 1e-4", "tol = 1e-4\nbogus = 3")
    with pytest.raises(ConfigError) as exc:
        load_config(write(tmp_path, text))
    assert exc.value.line is not None
    assert text.splitlines()[exc.value.line - 1].startswith("bogus")


@pytest.mark.parametrize("old, new", [
    ('rho = -1.0', 'rho = 1.0'),
    ('rho = -1.0', 'rho = "a"'),
    ('base = "kappa"', 'base = "flat"'),
    ('end_k = [1]', 'end_k = [8]'),
    ('amplitude = 0.3', 'amplitude = -1.5'),
    ('formats = ["csv", "json", "svg", "checkpoint"]', 'formats = ["png"]'),
    ('n_core = 128', 'n_core = 12.5'),
    ('s_hi = 8.0', 's_hi = 20.0'),
])
def test_invalid_values(tmp_path, old, new):
    text = default_config_text()
    assert old in text
    with pytest.raises(ConfigError):
        load_config(write(tmp_path, text.replace(old, new)))


def test_toml_syntax_error(tmp_path):
    with pytest.raises(ConfigError, match="TOML"):
        load_config(write(tmp_path, "[flow\nrho = 1"))


def test_missing_file(tmp_path):
    with pytest.raises(ConfigError):
        load_config(tmp_path / "none.toml")


def test_output_root_env():
    cfg = load_config()
    assert output_directory(cfg, {}) == Path("runs/default")
    assert output_directory(cfg, {"CUSPFLOW_OUTPUT_ROOT": "/tmp/x"}) == Path("/tmp/x/runs/default")
    cfg = load_config(None, ['output.directory="/abs/dir"'])
    assert output_directory(cfg, {"CUSPFLOW_OUTPUT_ROOT": "/tmp/x"}) == Path("/abs/dir")


def test_to_dict_round_trips_through_equality():
    cfg = load_config()
    d = cfg.to_dict()
    assert d["flow"]["rho"] == -1.0 and d["initial"]["bumps"][0]["radius"] == 0.25
