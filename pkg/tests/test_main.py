"""
Tests for the command-line entry point and its exit codes
"""
import pytest

from gradshield.main import main

pytestmark = pytest.mark.integration


DESCENT = 'kind = "descent"\n[descent]\ntrials = 500\nmultipliers = [0.0, 0.9]\n'


@pytest.fixture
def descent_file(tmp_path):
    path = tmp_path / "descent.toml"
    path.write_text(DESCENT)
    return path


def test_experiment_prints_run_directory(descent_file, tmp_path, capsys):
    out = tmp_path / "runs"
    assert main(["descent", "--config", str(descent_file), "--out", str(out)]) == 0
    printed = capsys.readouterr().out.strip()
    assert printed.startswith(str(out))
    assert (out / printed.rsplit("/", 1)[-1] / "descent.csv").exists()


def test_rerun_is_a_usage_error(descent_file, tmp_path):
    args = ["descent", "--config", str(descent_file), "--out", str(tmp_path / "runs")]
    assert main(args) == 0
    assert main(args) == 1
    assert main(args + ["--force"]) == 0


def test_seed_override_changes_run(descent_file, tmp_path, capsys):
    out = str(tmp_path / "runs")
    main(["descent", "--config", str(descent_file), "--out", out])
    main(["descent", "--config", str(descent_file), "--out", out, "--seed", "7"])
    first, second = capsys.readouterr().out.split()
    assert first != second


def test_invalid_config_exits_2(tmp_path, capsys):
    path = tmp_path / "bad.toml"
    path.write_text('kind = "descent"\n[descent]\netaa = 0.1\n')
    assert main(["descent", "--config", str(path), "--out", str(tmp_path)]) == 2
    assert "did you mean 'eta'" in capsys.readouterr().err


def test_kind_mismatch_exits_2(descent_file, tmp_path):
    assert main(["bound-curve", "--config", str(descent_file), "--out", str(tmp_path)]) == 2


def test_missing_config_file_exits_2(tmp_path):
    assert main(["descent", "--config", str(tmp_path / "absent.toml")]) == 2


def test_usage_errors_exit_1():
    with pytest.raises(SystemExit) as caught:
        main(["no-such-kind"])
    assert caught.value.code == 1
    with pytest.raises(SystemExit) as caught:
        main(["descent"])
    assert caught.value.code == 1


def test_runtime_failure_exits_3(tmp_path):
    """A dataset directory that does not exist is an ingestion failure"""
    images = tmp_path / "missing"
    path = tmp_path / "images.toml"
    path.write_text(f'kind = "bound-curve"\n[dataset]\nsource = "images"\ndirectory = "{images.as_posix()}"\n')
    assert main(["bound-curve", "--config", str(path), "--out", str(tmp_path / "runs")]) == 3
