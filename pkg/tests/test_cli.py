import json
import xml.etree.ElementTree as ET

import pytest

from btba.cli import main
from btba.config import default_config_text


@pytest.fixture(scope="module")
def small_config(tmp_path_factory):
    text = default_config_text().replace(
        "rhos = [0.1, 0.3, 0.55]", "rhos = [0.3]"
    ).replace("n_per_group = [40, 60, 80, 100, 300, 500, 800, 1000]", "n_per_group = [40, 300]")
    path = tmp_path_factory.mktemp("cfg") / "small.toml"
    path.write_text(text)
    return path


@pytest.fixture(scope="module")
def run_dir(small_config, tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    assert main(["simulate", "--config", str(small_config), "--seed", "5",
                 "--replications", "6", "--out", str(out)]) == 0
    return out


def test_simulate_outputs(run_dir, capsys):
    assert (run_dir / "verdict_table.csv").exists()
    assert len(list((run_dir / "reports").glob("*.json"))) == 4
    assert len(list((run_dir / "figures").glob("*.svg"))) == 6
    manifest = json.loads((run_dir / "manifest.json").read_text())
    assert manifest["base_seed"] == 5 and manifest["schema_version"] == "btba.manifest/1"


def test_env_seed_overrides(small_config, tmp_path, monkeypatch):
    monkeypatch.setenv("BTBA_SEED", "77")
    assert main(["simulate", "--config", str(small_config), "--seed", "5",
                 "--replications", "2", "--out", str(tmp_path)]) == 0
    assert json.loads((tmp_path / "manifest.json").read_text())["base_seed"] == 77


def test_verdict_command(run_dir, tmp_path, capsys):
    assert main(["verdict", "--reports", str(run_dir), "--csv", str(tmp_path / "t.csv"),
                 "--flat", str(tmp_path / "flat.csv")]) == 0
    text = capsys.readouterr().out
    assert text.splitlines()[0].startswith("n_per_group")
    assert (tmp_path / "t.csv").read_text().startswith("# schema: btba.verdict_table/1")
    assert (tmp_path / "flat.csv").read_text().startswith("# schema: btba.verdicts/1")


@pytest.mark.parametrize("kind", ["ridgeline-est", "ridgeline-zstar", "boxplot"])
def test_plot_command(run_dir, tmp_path, kind):
    out = tmp_path / f"{kind}.svg"
    assert main(["plot", "--reports", str(run_dir / "reports"), "--kind", kind,
                 "--data-condition", "Complete", "--out", str(out)]) == 0
    ET.parse(out)


def test_diagnose_command(tmp_path, capsys):
    (tmp_path / "e.csv").write_text("condition_id,replication_id,converged,estimate\nx,1,true,0.2\nx,2,true,0.4\n")
    (tmp_path / "t.csv").write_text("condition_id,truth\nx,0.3\n")
    assert main(["diagnose", "--estimates", str(tmp_path / "e.csv"), "--truths", str(tmp_path / "t.csv"),
                 "--out", str(tmp_path / "o")]) == 0
    assert "Accept" in capsys.readouterr().out


def test_errors_are_reported(tmp_path, capsys):
    assert main(["diagnose", "--estimates", str(tmp_path / "nope.csv"), "--truths",
                 str(tmp_path / "nope.csv"), "--out", str(tmp_path)]) == 1
    assert "btba: error" in capsys.readouterr().err
