"""
Tests for run directories, CSV tables, plot files and manifests
"""
import json
import math
import os

import pytest

from gradshield.core.exceptions import ArtifactExistsError, ArtifactLockedError, IngestionError
from gradshield.models.schemas import PlotSeries
from gradshield.services.artifact_service import artifact_service
from gradshield.utils.helpers import sha256_file


HASH = "0123456789abcdef" * 4

BOUND_SERIES = PlotSeries(
    name="bound-small",
    xlabel="encryption ratio z",
    ylabel="MSE lower bound",
    points=[(0.0, 0.1), (0.5, 0.25), (0.9, 1.0)],
)


def test_plot_file_layout(tmp_path):
    [path] = artifact_service.emit_plot_data([BOUND_SERIES], tmp_path)
    lines = path.read_text().splitlines()
    assert len(lines) == 6
    assert lines[:3] == ["# name: bound-small", "# xlabel: encryption ratio z", "# ylabel: MSE lower bound"]
    assert lines[3] == "0.0 0.1"


def test_empty_series_list_writes_nothing(tmp_path):
    assert artifact_service.emit_plot_data([], tmp_path / "plots") == []
    assert not (tmp_path / "plots").exists()


def test_plot_file_reparses(tmp_path):
    [path] = artifact_service.emit_plot_data([BOUND_SERIES], tmp_path)
    again = artifact_service.read_plot_data(path)
    assert again.points == BOUND_SERIES.points
    assert (again.name, again.xlabel, again.ylabel) == (BOUND_SERIES.name, BOUND_SERIES.xlabel, BOUND_SERIES.ylabel)


def test_plot_file_keeps_special_values(tmp_path):
    series = PlotSeries(name="edge", xlabel="x", ylabel="y", points=[(0.0, math.inf), (1.0, math.nan)])
    [path] = artifact_service.emit_plot_data([series], tmp_path)
    points = artifact_service.read_plot_data(path).points
    assert math.isinf(points[0][1]) and math.isnan(points[1][1])


def test_plot_file_missing_header(tmp_path):
    path = tmp_path / "bad.dat"
    path.write_text("# name: x\n0 1\n")
    with pytest.raises(IngestionError):
        artifact_service.read_plot_data(path)


def test_series_requires_increasing_x():
    with pytest.raises(ValueError):
        PlotSeries(name="s", xlabel="x", ylabel="y", points=[(0.5, 1.0), (0.5, 2.0)])


def test_csv_cells_are_exact(tmp_path):
    path = artifact_service.write_csv(
        tmp_path / "t.csv", ["z", "bound", "ok"], [{"z": 0.1, "bound": math.inf, "ok": True, "skip": 1}]
    )
    assert path.read_text() == "z,bound,ok\n0.1,inf,true\n"
    assert artifact_service.read_csv(path) == [{"z": "0.1", "bound": "inf", "ok": "true"}]


def test_manifest_lists_checksums(tmp_path):
    directory = artifact_service.run_directory(tmp_path, "bound-curve", HASH)
    assert directory.name == "bound-curve-0123456789ab"
    table = artifact_service.write_csv(directory / "bound.csv", ["z"], [{"z": 0.5}])
    artifact_service.write_manifest(directory, HASH, {"base": 42}, "ok", extra={"rows": 1})
    manifest = artifact_service.read_manifest(directory)
    assert manifest["files"] == {"bound.csv": sha256_file(table)}
    assert manifest["seeds"] == {"base": 42}
    assert manifest["results"] == {"rows": 1}
    assert manifest["error"] is None
    assert json.loads((directory / "manifest.json").read_text())["config_hash"] == HASH


def test_finished_run_is_not_overwritten(tmp_path):
    directory = artifact_service.run_directory(tmp_path, "descent", HASH)
    artifact_service.write_manifest(directory, HASH, {}, "ok")
    with pytest.raises(ArtifactExistsError) as caught:
        artifact_service.run_directory(tmp_path, "descent", HASH)
    assert caught.value.exit_code == 1
    (directory / "stale.csv").write_text("x\n")
    again = artifact_service.run_directory(tmp_path, "descent", HASH, force=True)
    assert again == directory
    assert not (directory / "stale.csv").exists()


def test_failed_run_can_be_repeated(tmp_path):
    directory = artifact_service.run_directory(tmp_path, "descent", HASH)
    artifact_service.write_manifest(directory, HASH, {}, "failed", error="boom")
    assert artifact_service.run_directory(tmp_path, "descent", HASH) == directory


def test_lock_is_exclusive(tmp_path):
    with artifact_service.lock(tmp_path) as path:
        assert path.exists()
        with pytest.raises(ArtifactLockedError):
            with artifact_service.lock(tmp_path):
                pass
    assert not path.exists()


# Above the largest pid_max Linux allows, so no process can own it
DEAD_PID = 4_194_305


def test_stale_lock_is_replaced(tmp_path):
    """A lock whose recorded process is gone does not block a new run"""
    (tmp_path / ".lock").write_text(str(DEAD_PID))
    assert artifact_service.lock_is_stale(tmp_path / ".lock")
    with artifact_service.lock(tmp_path) as path:
        assert artifact_service.lock_holder(path) == os.getpid()
    assert not path.exists()


def test_live_lock_still_blocks(tmp_path):
    (tmp_path / ".lock").write_text(str(os.getppid()))
    assert not artifact_service.lock_is_stale(tmp_path / ".lock")
    with pytest.raises(ArtifactLockedError):
        with artifact_service.lock(tmp_path):
            pass


def test_failed_run_with_stale_lock_can_be_repeated(tmp_path):
    directory = artifact_service.run_directory(tmp_path, "descent", HASH)
    artifact_service.write_manifest(directory, HASH, {}, "failed", error="boom")
    (directory / ".lock").write_text(str(DEAD_PID))
    assert artifact_service.run_directory(tmp_path, "descent", HASH) == directory
    assert not (directory / ".lock").exists()
