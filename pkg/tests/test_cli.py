import csv

import pytest

from damplab._csv import read_key_values
from damplab.cli import (
    EXIT_ERROR,
    EXIT_OK,
    EXIT_THRESHOLD,
    PRESETS,
    ConfigError,
    ScenarioConfig,
    main,
)

SHORT = ["--set", "model.modes=32", "--set", "schedule.t_end=100", "--set", "schedule.dt=0.0125",
         "--set", "schedule.samples=400", "--set", "decay.t_lo=10", "--set", "decay.t_hi=100"]


def _manifest(out):
    with open(out / "manifest.csv") as fh:
        return {r["file"]: r["sha256"] for r in csv.DictReader(fh)}


def test_list_presets(capsys):
    assert main(["list-presets"]) == EXIT_OK
    lines = capsys.readouterr().out.splitlines()
    assert len(lines) == len(PRESETS) >= 8
    assert all(": " in line for line in lines)


@pytest.mark.parametrize("name", sorted(PRESETS))
def test_every_preset_resolves(name):
    cfg = ScenarioConfig.build(name)
    assert cfg.analyses and cfg.schedule().n_steps > 0


def test_unknown_key_named(tmp_path, capsys):
    with pytest.raises(ConfigError, match="model.betta"):
        ScenarioConfig.build(overrides=["model.betta=1"])
    ini = tmp_path / "c.ini"
    ini.write_text("[model]\nbeta = 1\nwidth = 3\n")
    with pytest.raises(ConfigError, match="model.width"):
        ScenarioConfig.build(config_path=ini)
    assert main(["simulate", "--set", "decay.tlo=1", "--out", str(tmp_path)]) == EXIT_ERROR
    assert "decay.tlo" in capsys.readouterr().err


def test_invalid_value_named():
    with pytest.raises(ConfigError, match="'model.beta'"):
        ScenarioConfig.build(overrides=["model.beta=abc"])
    with pytest.raises(ConfigError, match="schedule.method"):
        ScenarioConfig.build(overrides=["schedule.method=euler"])
    with pytest.raises(ConfigError, match="phi.p"):
        ScenarioConfig.build(overrides=["phi.name=power"])


def test_simulate_writes_artefacts_and_is_reproducible(tmp_path, capsys):
    a, b = tmp_path / "a", tmp_path / "b"
    assert main(["simulate", *SHORT, "--svg", "--out", str(a)]) == EXIT_OK
    out = capsys.readouterr().out
    assert "PASS decay_theta" in out
    for name in ("trajectory.csv", "decay_report.csv", "model_checks.csv", "checks.csv",
                 "config.ini", "decay.svg", "manifest.csv"):
        assert (a / name).is_file()
    man = _manifest(a)
    assert set(man) == {p.name for p in a.iterdir()} - {"manifest.csv"}
    assert all(len(h) == 64 for h in man.values())
    assert main(["simulate", *SHORT, "--svg", "--out", str(b)]) == EXIT_OK
    assert _manifest(b) == man
    # the echoed configuration reproduces the run
    c = tmp_path / "c"
    assert main(["simulate", "--config", str(a / "config.ini"), "--svg", "--out", str(c)]) == 0
    assert _manifest(c) == man


def test_threshold_exit_code(tmp_path, capsys):
    # predicting the wrong rate must flag the run
    rc = main(["simulate", *SHORT, "--set", "decay.predicted=2.0", "--out", str(tmp_path)])
    assert rc == EXIT_THRESHOLD
    assert "FAIL decay_theta" in capsys.readouterr().out
    assert read_key_values(tmp_path / "checks.csv")["decay_theta"] == "false"


def test_stage_error_names_stage(tmp_path, capsys):
    # a range that holds no resolvent peaks cannot be fitted
    rc = main(["resolvent", "--set", "model.modes=8", "--set", "resolvent.s_max=8",
               "--out", str(tmp_path)])
    assert rc == EXIT_ERROR
    assert "stage 'resolvent'" in capsys.readouterr().err


def test_verify_phi(tmp_path):
    assert main(["verify-phi", "--set", "phi.name=tanh",
                 "--out", str(tmp_path / "t")]) == EXIT_OK
    kv = read_key_values(tmp_path / "t" / "phi_report.csv")
    assert kv["sector_passed"] == "true" and float(kv["kappa"]) == pytest.approx(1.0)
    assert main(["verify-phi", "--set", "phi.name=cubic",
                 "--out", str(tmp_path / "c")]) == EXIT_THRESHOLD
    kv = read_key_values(tmp_path / "c" / "phi_report.csv")
    assert kv["vanishing_at_zero"] == "true"


def test_fit_decay_roundtrip(tmp_path):
    run = tmp_path / "run"
    assert main(["simulate", *SHORT, "--out", str(run)]) == EXIT_OK
    fit = tmp_path / "fit"
    rc = main(["fit-decay", "--trajectory", str(run / "trajectory.csv"),
               "--set", "decay.t_lo=10", "--set", "decay.t_hi=100", "--out", str(fit)])
    assert rc == EXIT_OK
    a = read_key_values(run / "decay_report.csv")
    b = read_key_values(fit / "decay_report.csv")
    assert a["theta_hat"] == b["theta_hat"]


def test_fit_decay_missing_file(tmp_path):
    rc = main(["fit-decay", "--trajectory", str(tmp_path / "none.csv"), "--out", str(tmp_path)])
    assert rc == EXIT_ERROR


def test_sweep_independent_of_workers(tmp_path):
    args = ["sweep", *SHORT, "--vary", "model.beta=1,1.5", "--vary", "phi.name=identity,tanh"]
    assert main([*args, "--workers", "1", "--out", str(tmp_path / "s1")]) == EXIT_OK
    assert main([*args, "--workers", "2", "--out", str(tmp_path / "s2")]) == EXIT_OK
    a = (tmp_path / "s1" / "sweep.csv").read_text()
    assert a == (tmp_path / "s2" / "sweep.csv").read_text()
    assert len(a.splitlines()) == 5
    assert (tmp_path / "s1" / "003_beta=1.5_name=tanh" / "trajectory.csv").is_file()


def test_sweep_rejects_unknown_key(tmp_path):
    rc = main(["sweep", "--vary", "model.gamma=1,2", "--out", str(tmp_path)])
    assert rc == EXIT_ERROR
