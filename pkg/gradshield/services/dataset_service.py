"""
Dataset Service

Synthetic Gaussian datasets with a known prior, PGM/PPM image ingestion and the
GSDS1 binary export.
"""
import struct
from pathlib import Path
from typing import List, Union

import numpy as np
from PIL import Image, UnidentifiedImageError

from gradshield.core.exceptions import ConfigurationError, IngestionError
from gradshield.core.logging_config import logger
from gradshield.models.domain import DataSample, LabelRule, SyntheticPrior
from gradshield.utils.helpers import derive_seed

DATASET_MAGIC = b"GSDS1"
IMAGE_SUFFIXES = (".pgm", ".ppm")
LABELS_FILE = "labels.txt"


class DatasetService:
    """Dataset generation, loading and export"""

    def generate_synthetic_dataset(
        self,
        m: int,
        count: int,
        prior: SyntheticPrior,
        label_rule: LabelRule = None,
        seed: int = 0,
    ) -> List[DataSample]:
        """
        Draw count i.i.d. samples x ~ N(0, τ² I_m) and label them

        Args:
            m: Input dimension
            count: Number of samples (≥ 1)
            prior: Gaussian prior holding τ
            label_rule: constant value, noisy linear teacher, or argmax of a linear teacher
            seed: Seed; the dataset is a pure function of the arguments and the seed

        Returns:
            List of DataSample
        """
        if count < 1 or m < 1:
            raise ConfigurationError("synthetic dataset needs m >= 1 and count >= 1")
        rule = label_rule or LabelRule()
        rng = np.random.default_rng(seed)
        xs = rng.normal(0.0, prior.tau, size=(count, m))
        targets = self._label(xs, rule, derive_seed(seed, 1))
        return [DataSample(x=x, target=t) for x, t in zip(xs, targets)]

    def _label(self, xs: np.ndarray, rule: LabelRule, seed: int) -> list:
        count, m = xs.shape
        rng = np.random.default_rng(seed)
        if rule.kind == "constant":
            return [float(rule.value)] * count
        if rule.kind == "linear":
            teacher = rng.normal(0.0, rule.teacher_scale, size=m)
            noise = rng.normal(0.0, 1.0, size=count) * rule.noise
            return [float(v) for v in xs @ teacher + noise]
        teacher = rng.normal(0.0, rule.teacher_scale, size=(rule.num_classes, m))
        return [int(k) for k in np.argmax(xs @ teacher.T, axis=1)]

    def load_image_dataset(self, directory: Union[str, Path], labels_file: str = LABELS_FILE) -> List[DataSample]:
        """
        Load 8-bit binary PGM/PPM images with a one-integer-per-line labels file

        Images are read in file-name order, scaled to [0, 1] and flattened
        row-major (interleaved channels for PPM).
        """
        directory = Path(directory)
        if not directory.is_dir():
            raise IngestionError(directory, "not a directory")
        images = sorted(p for p in directory.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)
        labels_path = directory / labels_file
        if not images:
            logger.info(f"No images found in {directory}")
            return []
        if not labels_path.exists():
            raise IngestionError(labels_path, "labels file missing")

        try:
            lines = [line.strip() for line in labels_path.read_text().splitlines() if line.strip()]
            labels = [int(line) for line in lines]
        except (OSError, ValueError) as e:
            raise IngestionError(labels_path, f"unreadable labels: {e}")
        if len(labels) != len(images):
            raise IngestionError(labels_path, f"{len(labels)} labels for {len(images)} images")

        samples = []
        for path, label in zip(images, labels):
            samples.append(DataSample(x=self._read_image(path), target=label))
        logger.info(f"Loaded {len(samples)} images from {directory}")
        return samples

    def _read_image(self, path: Path) -> np.ndarray:
        try:
            with Image.open(path) as image:
                if image.mode not in ("L", "RGB"):
                    raise IngestionError(path, f"unsupported image mode {image.mode}")
                pixels = np.asarray(image, dtype=np.float64)
        except (OSError, UnidentifiedImageError) as e:
            raise IngestionError(path, f"unreadable image: {e}")
        return (pixels / 255.0).reshape(-1)

    def write_dataset_binary(self, samples: List[DataSample], path: Union[str, Path]) -> Path:
        """
        GSDS1 export: magic, m and count as little-endian int64, then the
        row-major float64 feature matrix
        """
        path = Path(path)
        m = samples[0].m if samples else 0
        matrix = np.array([s.x for s in samples], dtype="<f8").reshape(len(samples), m)
        with open(path, "wb") as f:
            f.write(DATASET_MAGIC)
            f.write(struct.pack("<qq", m, len(samples)))
            f.write(matrix.tobytes(order="C"))
        return path

    def read_dataset_binary(self, path: Union[str, Path]) -> np.ndarray:
        """Feature matrix (count × m) from a GSDS1 file"""
        path = Path(path)
        data = path.read_bytes()
        if data[:5] != DATASET_MAGIC:
            raise IngestionError(path, "bad magic, expected GSDS1")
        m, count = struct.unpack("<qq", data[5:21])
        matrix = np.frombuffer(data, dtype="<f8", offset=21)
        if matrix.size != m * count:
            raise IngestionError(path, "truncated sample block")
        return matrix.reshape(count, m).astype(np.float64)

    def arrays(self, samples: List[DataSample]):
        """(xs, targets) views used by the vectorised services"""
        if not samples:
            return np.zeros((0, 0)), []
        return np.stack([s.x for s in samples]), [s.target for s in samples]


# Singleton instance
dataset_service = DatasetService()
