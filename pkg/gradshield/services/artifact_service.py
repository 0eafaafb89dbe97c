"""
Artifact Service

Run directories, CSV tables, plot-ready series files and the run manifest.
Every float is written with its shortest round-tripping repr so repeated
runs produce byte-identical files.
"""
import csv
import json
import os
import shutil
from contextlib import contextmanager
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Dict, Iterable, Iterator, List, Mapping, Optional, Sequence, Union

from gradshield import __version__
from gradshield.core.exceptions import ArtifactExistsError, ArtifactLockedError, IngestionError
from gradshield.core.logging_config import logger
from gradshield.models.schemas import PlotSeries
from gradshield.utils.helpers import format_float, sanitize_filename, sha256_file

MANIFEST = "manifest.json"
LOCK = ".lock"
PLOT_SUFFIX = ".dat"


def _cell(value: Any) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return format_float(value)
    return str(value)


class ArtifactService:
    """Persistence of experiment outputs"""

    def run_directory(self, output_dir: Union[str, Path], label: str, config_hash: str, force: bool = False) -> Path:
        """
        out/<label>-<hash12>, refusing to reuse a finished run unless forced

        Raises:
            ArtifactExistsError: the directory already holds a run of this config
        """
        directory = Path(output_dir) / f"{sanitize_filename(label)}-{config_hash[:12]}"
        if (directory / MANIFEST).exists():
            if not force and self.read_manifest(directory).get("status") == "ok":
                raise ArtifactExistsError(f"{directory} already holds this configuration (use --force to overwrite)")
            if (directory / LOCK).exists() and not self.lock_is_stale(directory / LOCK):
                raise ArtifactLockedError(f"{directory} is locked by another experiment")
            logger.info(f"Overwriting {directory}")
            shutil.rmtree(directory)
        directory.mkdir(parents=True, exist_ok=True)
        return directory

    def lock_holder(self, path: Path) -> Optional[int]:
        """PID written into a lock file, None when it cannot be read"""
        try:
            return int(Path(path).read_text().strip())
        except (OSError, ValueError):
            return None

    def lock_is_stale(self, path: Path) -> bool:
        """True when the recorded holder process no longer exists"""
        pid = self.lock_holder(path)
        # signal 0 only probes on POSIX; on Windows os.kill terminates
        if pid is None or pid == os.getpid() or os.name == "nt":
            return False
        try:
            os.kill(pid, 0)
        except ProcessLookupError:
            return True
        except PermissionError:
            return False
        return False

    @contextmanager
    def lock(self, directory: Path) -> Iterator[Path]:
        """
        Exclusive lock file holding the owner's PID for the duration of an experiment

        A lock left behind by a process that has since died is removed once.
        """
        path = Path(directory) / LOCK
        fd = None
        for attempt in range(2):
            try:
                fd = os.open(path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
                break
            except FileExistsError:
                if attempt == 0 and self.lock_is_stale(path):
                    logger.warning(
                        f"Removing stale lock in {directory}",
                        extra={"extra_fields": {"pid": self.lock_holder(path)}},
                    )
                    path.unlink(missing_ok=True)
                    continue
                raise ArtifactLockedError(f"{directory} is locked by another experiment")
        try:
            os.write(fd, str(os.getpid()).encode())
            os.close(fd)
            yield path
        finally:
            path.unlink(missing_ok=True)

    def write_csv(self, path: Union[str, Path], header: Sequence[str], rows: Iterable[Mapping[str, Any]]) -> Path:
        path = Path(path)
        with open(path, "w", newline="") as f:
            writer = csv.DictWriter(f, fieldnames=list(header), extrasaction="ignore", lineterminator="\n")
            writer.writeheader()
            for row in rows:
                writer.writerow({k: _cell(v) for k, v in row.items()})
        return path

    def read_csv(self, path: Union[str, Path]) -> List[Dict[str, str]]:
        with open(path, newline="") as f:
            return list(csv.DictReader(f))

    # -- plot data -----------------------------------------------------------

    def emit_plot_data(self, series_list: Sequence[PlotSeries], directory: Union[str, Path]) -> List[Path]:
        """
        One gnuplot-ready file per series: three "# key: value" header lines
        then one "x y" line per point
        """
        if not series_list:
            logger.warning("No plot series to emit")
            return []
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        paths = []
        for series in series_list:
            path = directory / f"{sanitize_filename(series.name)}{PLOT_SUFFIX}"
            lines = [f"# name: {series.name}", f"# xlabel: {series.xlabel}", f"# ylabel: {series.ylabel}"]
            lines += [f"{format_float(x)} {format_float(y)}" for x, y in series.points]
            path.write_text("\n".join(lines) + "\n")
            paths.append(path)
        return paths

    def read_plot_data(self, path: Union[str, Path], provenance: str = "") -> PlotSeries:
        """Re-parse a file written by emit_plot_data"""
        path = Path(path)
        header: Dict[str, str] = {}
        points = []
        for number, line in enumerate(path.read_text().splitlines(), start=1):
            if line.startswith("#"):
                key, _, value = line[1:].partition(":")
                header[key.strip()] = value.strip()
            elif line.strip():
                try:
                    x, y = line.split()
                    points.append((float(x), float(y)))
                except ValueError:
                    raise IngestionError(path, f"line {number}: expected two numbers")
        missing = {"name", "xlabel", "ylabel"} - header.keys()
        if missing:
            raise IngestionError(path, f"missing header fields {sorted(missing)}")
        return PlotSeries(
            name=header["name"], xlabel=header["xlabel"], ylabel=header["ylabel"],
            points=points, provenance=provenance,
        )

    # -- manifest ------------------------------------------------------------

    def write_manifest(
        self,
        directory: Path,
        config_hash: str,
        seeds: Mapping[str, int],
        status: str,
        error: Optional[str] = None,
        extra: Optional[Mapping[str, Any]] = None,
    ) -> Path:
        """
        manifest.json listing every output file with its SHA-256
        """
        directory = Path(directory)
        files = {
            str(p.relative_to(directory)): sha256_file(p)
            for p in sorted(directory.rglob("*"))
            if p.is_file() and p.name not in (MANIFEST, LOCK)
        }
        manifest = {
            "config_hash": config_hash,
            "version": __version__,
            "seeds": dict(seeds),
            "status": status,
            "error": error,
            "results": dict(extra or {}),
            "finished_at": datetime.now(timezone.utc).isoformat(),
            "files": files,
        }
        path = directory / MANIFEST
        path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
        return path

    def read_manifest(self, directory: Union[str, Path]) -> dict:
        return json.loads((Path(directory) / MANIFEST).read_text())


# Singleton instance
artifact_service = ArtifactService()
