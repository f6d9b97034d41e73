import json
import subprocess
import sys

import pytest

from sgdm_diag.cli import main
from sgdm_diag.config import PRESETS, ConfigError, load_config


def _write(tmp_path, text):
    p = tmp_path / "exp.ini"
    p.write_text(text)
    return str(p)


def test_validate_echoes_resolved_config(capsys):
    assert main(["validate", "--preset", "table2-qlow"]) == 0
    out = capsys.readouterr().out
    assert "[hyper]" in out and "beta = 0.2" in out and "[criteria]" in out


def test_validate_roundtrip(tmp_path, capsys):
    main(["validate", "--preset", "fig4-6-autolr", "--seed", "5"])
    text = capsys.readouterr().out
    cfg = load_config(config_text=text)
    assert cfg.seed == 5 and cfg.to_ini() == text


@pytest.mark.parametrize("section, match", [
    ("[experiment]\nkind = error_rates\n[hyper]\ngamma = 0.01\nbeta = 0.5\nbeta_final = 0.5\n", "HyperParams"),
    ("[experiment]\nkind = autolr\n[schedule]\ngamma0s = 1.0\nrho = 1.0\n", "ScheduleConfig"),
    ("[experiment]\nkind = error_rates\n[hyper]\ngamma = 0.01\nmomentum = 0.5\n", "momentum"),
    ("[experiment]\nkind = error_rates\n[extras]\na = 1\n", "extras"),
    ("[experiment]\nkind = sweep\n", "kind"),
])
def test_validate_rejects(tmp_path, capsys, section, match):
    assert main(["validate", "--config", _write(tmp_path, section)]) == 2
    assert match in capsys.readouterr().err


def test_missing_dataset_path(capsys):
    assert main(["run", "--preset", "fig5-mnist"]) == 2
    assert "--data" in capsys.readouterr().err


def test_missing_preset_and_config(capsys, monkeypatch):
    monkeypatch.delenv("SGDM_DIAG_PRESET", raising=False)
    assert main(["validate"]) == 2


def test_env_overrides_file_and_flags_override_env(tmp_path, monkeypatch):
    monkeypatch.setenv("SGDM_DIAG_SEED", "11")
    monkeypatch.setenv("SGDM_DIAG_RUNS", "3")
    cfg = load_config("table2-qhigh", config_text="[experiment]\nseed = 4\n", overrides={"runs": 2})
    assert (cfg.seed, cfg.runs) == (11, 2)
    with pytest.raises(ConfigError):
        monkeypatch.setenv("SGDM_DIAG_RUNS", "many")
        load_config("table2-qhigh")


def test_run_error_rates_writes_artifacts(tmp_path, capsys):
    out = tmp_path / "res"
    assert main(["run", "--preset", "table2-qlow", "--seed", "7", "--out", str(out), "--runs", "4",
                 "--jobs", "1"]) == 0
    assert "Q-Low" in capsys.readouterr().out
    report = json.loads((out / "table2-qlow_report.json").read_text())
    assert report["runs"] == 4 and report["setting"] == "Q-Low"
    assert (out / "table2-qlow_runs.csv").read_text().count("\n") == 5
    assert json.loads((out / "table2-qlow_config.json").read_text())["seed"] == 7


def test_run_news_csv(tmp_path, capsys):
    rows = ["url,timedelta,a,b,shares"] + [f"http://x/{i},1,{i % 7},{(i * 3) % 5},{100 + (i * 37) % 400}"
                                           for i in range(200)]
    data = tmp_path / "news.csv"
    data.write_text("\n".join(rows) + "\n")
    ini = _write(tmp_path, "[experiment]\npreset = fig5-news\n[hyper]\ngamma = 1.0\nbeta = 0.8\nbeta_final = 0.2\n"
                           "batch_size = 20\nepochs = 2\n[schedule]\nmax_epochs = 1\n")
    assert main(["run", "--config", ini, "--data", str(data), "--out", str(tmp_path / "o")]) == 0
    assert (tmp_path / "o" / "fig5-news_accuracy.csv").exists()


def test_every_preset_validates():
    for name in PRESETS:
        overrides = {"data": "/nonexistent"} if name in ("fig5-mnist", "fig5-news") else {}
        cfg = load_config(name, overrides=overrides)
        assert cfg.preset == name


def test_module_entry_point():
    res = subprocess.run([sys.executable, "-m", "sgdm_diag", "validate", "--preset", "table1"],
                         capture_output=True, text=True)
    assert res.returncode == 0 and "kind = table1" in res.stdout
