import pytest

from viablemfg.cli import main
from viablemfg.experiments import (EXIT_CONFIG, EXIT_OK, ExperimentConfig, RunManifest, emit_plot_data,
                                   exit_code_for)
from viablemfg.geometry import ConfigurationError
from viablemfg.mfg import ConvergenceError

SMALL = """kind = "solve-mfg"
seed = 3

[domain]
kind = "interval"
size = 1.0
nodes = 32

[model]
name = "viable"

[solver]
dt = 0.125
"""


@pytest.fixture
def cfg_file(tmp_path):
    p = tmp_path / "small.toml"
    p.write_text(SMALL)
    return p


def test_config_round_trip(tmp_path, cfg_file):
    cfg = ExperimentConfig.load(cfg_file)
    j = tmp_path / "c.json"
    j.write_text(cfg.to_json())
    back = ExperimentConfig.load(j)
    assert back.to_dict() == cfg.to_dict()
    assert back.hash() == cfg.hash()


@pytest.mark.parametrize("patch", [{"colour": 1}, {"solver": {"dtt": 0.1}}, {"kind": "bake"},
                                   {"study": {"N_list": [2]}}, {"domain": {"kind": "torus"}},
                                   {"solver": {"dt": -0.1}}, {"seed": -1}])
def test_invalid_configs_are_rejected(cfg_file, patch):
    data = ExperimentConfig.load(cfg_file).to_dict()
    data.pop("out")
    data.update(patch)
    with pytest.raises(ConfigurationError):
        ExperimentConfig.from_dict(data)


def test_validate_subcommand(cfg_file, capsys):
    assert main(["validate", "--config", str(cfg_file)]) == EXIT_OK
    assert capsys.readouterr().out.startswith("ok: solve-mfg")


def test_negative_dt_exits_with_config_code_and_no_output(tmp_path):
    bad = tmp_path / "bad.toml"
    bad.write_text(SMALL.replace("dt = 0.125", "dt = -0.125"))
    out = tmp_path / "never"
    assert main(["run", "--config", str(bad), "--out", str(out)]) == EXIT_CONFIG
    assert not out.exists()


def test_missing_config_file(tmp_path):
    assert main(["run", "--config", str(tmp_path / "nope.toml"), "--out", str(tmp_path / "o")]) == EXIT_CONFIG


def test_run_is_reproducible(tmp_path, cfg_file, capsys):
    a, b = tmp_path / "a", tmp_path / "b"
    assert main(["run", "--config", str(cfg_file), "--out", str(a), "--threads", "1"]) == EXIT_OK
    assert main(["run", "--config", str(cfg_file), "--out", str(b), "--seed", "3"]) == EXIT_OK
    assert "PASS mass_conserved" in capsys.readouterr().out
    ma, mb = RunManifest.load(a), RunManifest.load(b)
    # config.json records the output directory; every other artifact is byte-identical
    strip = lambda files: {k: v for k, v in files.items() if k != "config.json"}  # noqa: E731
    assert strip(ma.files) == strip(mb.files) and ma.config_hash == mb.config_hash
    assert {"u.csv", "m.csv", "meta.json", "cascade.csv", "config.json"} <= set(ma.files)
    assert ma.passed


def _fake_manifest(directory, kind, rows):
    directory.mkdir()
    man = RunManifest("h", "0", kind, 0, 0.0, {}, {}, {"rows": rows}, {})
    (directory / "manifest.json").write_text(man.to_json())


def test_plot_data_for_a_nash_study(tmp_path, capsys):
    rows = [{"N": n, "sup_gap": 0.3 / n, "w_gap": 0.1 / n} for n in (2, 3, 4)]
    _fake_manifest(tmp_path / "s", "nash-study", rows)
    assert main(["plot", "--out", str(tmp_path / "s")]) == EXIT_OK
    text = (tmp_path / "s" / "plot_nash.dat").read_text().splitlines()
    assert text[1].startswith("# fit: log(gap) = -1.0")
    assert len(text) == 5


def test_plot_rejects_an_empty_study(tmp_path):
    _fake_manifest(tmp_path / "e", "particle-study", [])
    with pytest.raises(ConfigurationError):
        emit_plot_data(tmp_path / "e", "particle-study")
    assert main(["plot", "--out", str(tmp_path / "e")]) == EXIT_CONFIG
    assert main(["plot", "--out", str(tmp_path / "missing")]) == EXIT_CONFIG


def test_exit_codes():
    assert exit_code_for(ConfigurationError("x")) == 2
    assert exit_code_for(ConvergenceError("x")) == 3
    assert exit_code_for(PermissionError("x")) == 4
    with pytest.raises(KeyError):
        exit_code_for(KeyError("x"))


def test_shipped_configs_validate():
    from pathlib import Path

    for p in sorted(Path(__file__).resolve().parents[1].joinpath("configs").glob("*.toml")):
        assert main(["validate", "--config", str(p)]) == EXIT_OK, p
