import csv

from click.testing import CliRunner

from gmmcomet.main import cli
from tests.conftest import TINY_CONFIG


def test_run_writes_outputs(tiny_config_path, tmp_path):
    out = tmp_path / "out"
    result = CliRunner().invoke(cli, ["run", str(tiny_config_path), "--out", str(out), "--seeds", "0,1",
                                      "--jobs", "2", "--no-progress"])
    assert result.exit_code == 0, result.output
    with (out / "summary.csv").open() as fh:
        rows = list(csv.DictReader(fh))
    assert [row["seed"] for row in rows] == ["0", "1"]
    assert (out / "tiny.1.report.json").exists()

    compared = CliRunner().invoke(cli, ["compare", str(out / "summary.csv")])
    assert compared.exit_code == 0
    assert "tiny" in compared.output and "OPDA" in compared.output


def test_run_reports_invalid_config(tmp_path):
    path = tmp_path / "bad.yaml"
    path.write_text(TINY_CONFIG.replace("n_init: 2", "n_init: 2\n      p_reject: 1.5"))
    result = CliRunner().invoke(cli, ["run", str(path), "--out", str(tmp_path / "out")])
    assert result.exit_code == 1
    assert "p_reject" in result.output
    assert not (tmp_path / "out").exists()


def test_run_rejects_malformed_seeds(tiny_config_path):
    result = CliRunner().invoke(cli, ["run", str(tiny_config_path), "--seeds", "a,b"])
    assert result.exit_code == 2


def test_generate_dumps_streams(tiny_config_path, tmp_path):
    result = CliRunner().invoke(cli, ["generate", str(tiny_config_path), "--out", str(tmp_path / "data")])
    assert result.exit_code == 0, result.output
    assert (tmp_path / "data" / "tiny.0" / "source.csv").exists()
    assert (tmp_path / "data" / "tiny.0" / "target.csv").exists()
