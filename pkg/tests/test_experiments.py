import json
from pathlib import Path

import pytest
import yaml
from click.testing import CliRunner

from twolevel import experiments
from twolevel.cli import main
from twolevel.errors import ConfigError

CONFIGS = Path(__file__).resolve().parent.parent / "configs"

BASE = {"kind": "pde", "seed": 3,
        "params": {"gamma": 0.5, "s": 0.1, "r": {"kind": "linear", "coefficients": [0.3]},
                   "grid_size": 40},
        "initial": {"dirac": 0.5}, "pde": {"t": 0.5, "dt": 0.05}}


def _write(tmp_path, cfg, name="c.yaml"):
    p = tmp_path / name
    p.write_text(yaml.safe_dump(cfg))
    return p


@pytest.mark.parametrize("mutate,path", [
    (lambda c: c.update(kind="bogus"), "kind"),
    (lambda c: c["params"].update(gamma="x"), "params.gamma"),
    (lambda c: c["params"].update(gamma=-1), "params.gamma"),
    (lambda c: c["params"]["r"].pop("kind"), "params.r"),
    (lambda c: c["pde"].update(dt=0), "pde.dt"),
    (lambda c: c["pde"].update(whatever=1), "pde.whatever"),
    (lambda c: c.update(initial={"dirac": 2}), "initial.dirac"),
    (lambda c: c.update(seed="abc"), "seed"),
])
def test_validation_paths(mutate, path):
    import copy
    cfg = copy.deepcopy(BASE)
    mutate(cfg)
    with pytest.raises(ConfigError) as exc:
        experiments.load_config(cfg)
    assert exc.value.path == path


def test_all_shipped_configs_validate():
    files = sorted(CONFIGS.glob("*.yaml"))
    assert files
    for f in files:
        experiments.load_config(f)


def test_run_is_deterministic(tmp_path):
    cfg = experiments.load_config(BASE)
    a = experiments.run(cfg, tmp_path / "a")
    b = experiments.run(cfg, tmp_path / "b")
    assert a["files"] == b["files"]
    assert (tmp_path / "a" / "manifest.json").read_text() == (tmp_path / "b" / "manifest.json").read_text()


def test_seed_override_recorded(tmp_path):
    cfg = dict(BASE, kind="mc", mc={"t": 0.2, "K": 200})
    cfg.pop("pde")
    man = experiments.run(experiments.load_config(cfg), tmp_path, seed_override=99)
    assert man["seed"] == 99 and man["config"]["seed"] == 99
    assert "histogram.csv" in man["files"]


def test_cli_exit_codes(tmp_path):
    runner = CliRunner()
    good = _write(tmp_path, BASE)
    res = runner.invoke(main, ["run", "--config", str(good), "--out", str(tmp_path / "o")])
    assert res.exit_code == 0, res.output
    man = json.loads((tmp_path / "o" / "manifest.json").read_text())
    assert man["schema_version"] and "versions" in man
    bad = _write(tmp_path, dict(BASE, kind="nope"), "bad.yaml")
    assert runner.invoke(main, ["validate", "--config", str(bad)]).exit_code == 2
    assert runner.invoke(main, ["validate", "--config", str(good)]).exit_code == 0
    assert runner.invoke(main, ["sweep", "--config", str(good)]).exit_code == 2


def test_cli_numeric_failure_exit_code(tmp_path):
    cfg = {"kind": "verify-rate",
           "params": {"gamma": 0.5, "s": 0.1, "r": {"kind": "linear", "coefficients": [3.0]},
                      "grid_size": 50},
           "initial": {"dirac": 0.5}, "verify-rate": {"horizon": 200}}
    res = CliRunner().invoke(main, ["run", "--config", str(_write(tmp_path, cfg)),
                                    "--out", str(tmp_path / "o")])
    assert res.exit_code == 3


def test_sweep_eta(tmp_path):
    cfg = {"kind": "scan",
           "params": {"gamma": 5e-3, "s": 0.05, "r": {"kind": "linear", "coefficients": [0.1]},
                      "grid_size": 100},
           "initial": {"dirac": 0.9}, "scan": {"parameter": "eta", "values": [0, 1e-6]}}
    man = experiments.sweep(experiments.load_config(cfg), tmp_path)
    assert "truncation.csv" in man["files"]
