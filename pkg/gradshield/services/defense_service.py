"""
Defense Service

Selective encryption simulated as coordinate removal: mask selection, the
restriction R and prolongation P operators, and Gaussian noise on the
unencrypted coordinates. No cryptographic backend ships; a cipher would sit
behind restrict(), producing ciphertexts for the encrypted indices that the
attacker never sees.
"""
import struct
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np

from gradshield.core.exceptions import ConfigurationError, IngestionError, NumericError
from gradshield.core.logging_config import logger
from gradshield.models.domain import DefendedGradient, EncryptionMask, GradientVector
from gradshield.utils.helpers import chunk_sizes, round_half_away

GRADIENT_MAGIC = b"GSDG1"


class DefenseService:
    """The selective-encryption channel S(·)"""

    def encrypted_count(self, D: int, z: float) -> int:
        """round(z·D), halves away from zero"""
        return round_half_away(z * D)

    def select_mask(
        self,
        g: GradientVector,
        z: float,
        strategy: str = "magnitude",
        seed: int = 0,
        fixed_indices: Optional[Sequence[int]] = None,
    ) -> EncryptionMask:
        """
        Choose which coordinates to encrypt

        Args:
            g: Gradient the selection is based on
            z: Requested encryption ratio in [0, 1]
            strategy: magnitude (encrypt the round(zD) largest |g|, lower index
                wins ties) | random (uniform without replacement) |
                fixed-indices (fixed_indices is the unencrypted list)
            seed: Seed for the random strategy
            fixed_indices: Unencrypted indices for fixed-indices

        Returns:
            EncryptionMask
        """
        values = g.values if isinstance(g, GradientVector) else np.asarray(g, dtype=np.float64)
        if not np.all(np.isfinite(values)):
            raise NumericError("gradient must be finite for mask selection", index=np.argwhere(~np.isfinite(values))[0])
        D = values.size

        if strategy == "fixed-indices":
            return self._fixed_mask(D, fixed_indices)
        if not 0.0 <= z <= 1.0:
            raise ConfigurationError(f"z={z} out of [0,1]")

        k = self.encrypted_count(D, z)
        if strategy == "magnitude":
            # descending |g|, ascending index among ties
            order = np.lexsort((np.arange(D), -np.abs(values)))
            encrypted = order[:k]
        elif strategy == "random":
            rng = np.random.default_rng(seed)
            encrypted = rng.choice(D, size=k, replace=False)
        else:
            raise ConfigurationError(f"unknown mask strategy '{strategy}'")

        keep = np.ones(D, dtype=bool)
        keep[encrypted] = False
        return EncryptionMask(D=D, unencrypted=np.flatnonzero(keep), requested_z=z)

    def _fixed_mask(self, D: int, indices: Optional[Sequence[int]]) -> EncryptionMask:
        if indices is None:
            raise ConfigurationError("fixed-indices strategy needs an index list")
        array = np.asarray(list(indices), dtype=np.int64)
        if array.size and (array.min() < 0 or array.max() >= D):
            raise ConfigurationError(f"fixed indices must lie in [0, {D})")
        if np.unique(array).size != array.size:
            raise ConfigurationError("fixed indices contain duplicates")
        unencrypted = np.sort(array)
        return EncryptionMask(D=D, unencrypted=unencrypted, requested_z=(D - unencrypted.size) / D)

    def restrict(self, g: Union[GradientVector, np.ndarray], mask: EncryptionMask) -> np.ndarray:
        """R g: the unencrypted coordinates in mask order"""
        values = g.values if isinstance(g, GradientVector) else np.asarray(g, dtype=np.float64)
        if values.shape[-1] != mask.D:
            raise ConfigurationError(f"gradient has length {values.shape[-1]}, mask expects D={mask.D}")
        return values[..., mask.unencrypted].copy()

    def prolong(self, u: np.ndarray, mask: EncryptionMask) -> np.ndarray:
        """P u: zeros at encrypted indices, u at the unencrypted ones"""
        u = np.asarray(u, dtype=np.float64)
        if u.shape[-1] != mask.d:
            raise ConfigurationError(f"reduced vector has length {u.shape[-1]}, mask has d={mask.d}")
        out = np.zeros(u.shape[:-1] + (mask.D,))
        out[..., mask.unencrypted] = u
        return out

    def restriction_matrix(self, mask: EncryptionMask) -> np.ndarray:
        """Explicit d×D binary R"""
        R = np.zeros((mask.d, mask.D))
        R[np.arange(mask.d), mask.unencrypted] = 1.0
        return R

    def prolongation_matrix(self, mask: EncryptionMask) -> np.ndarray:
        """Explicit D×d binary P = Rᵀ"""
        P = np.zeros((mask.D, mask.d))
        P[mask.unencrypted, np.arange(mask.d)] = 1.0
        return P

    def apply_defense(self, g: GradientVector, mask: EncryptionMask, sigma: float, seed: int) -> DefendedGradient:
        """
        y = P(Rg + δ) with δ ~ N(0, σ² I_d) from the seeded stream
        """
        if sigma < 0:
            raise ConfigurationError("sigma must be nonnegative")
        reduced = self.restrict(g, mask)
        if sigma > 0:
            reduced = reduced + np.random.default_rng(seed).normal(0.0, sigma, size=mask.d)
        return DefendedGradient(y=self.prolong(reduced, mask), mask=mask, sigma=sigma, seed=seed)

    def sample_observations(
        self,
        g: GradientVector,
        mask: EncryptionMask,
        sigma: float,
        draws: int,
        seed: int,
    ) -> np.ndarray:
        """draws × D matrix of independent observations y ~ N(PRg, σ² PPᵀ)"""
        reduced = self.restrict(g, mask)
        rng = np.random.default_rng(seed)
        blocks = []
        for size in chunk_sizes(draws, max(1, mask.d)):
            blocks.append(self.prolong(reduced + sigma * rng.standard_normal((size, mask.d)), mask))
        return np.concatenate(blocks) if blocks else np.zeros((0, mask.D))

    # -- serialization ------------------------------------------------------

    def write_mask(self, mask: EncryptionMask, path: Union[str, Path]) -> Path:
        """Text format: "D d" then the space-separated unencrypted indices"""
        path = Path(path)
        path.write_text(f"{mask.D} {mask.d}\n" + " ".join(str(int(i)) for i in mask.unencrypted) + "\n")
        return path

    def read_mask(self, path: Union[str, Path]) -> EncryptionMask:
        path = Path(path)
        try:
            lines = path.read_text().splitlines()
            D, d = (int(v) for v in lines[0].split())
            indices = [int(v) for v in lines[1].split()] if len(lines) > 1 else []
        except (OSError, ValueError, IndexError) as e:
            raise IngestionError(path, f"malformed mask file: {e}")
        if len(indices) != d:
            raise IngestionError(path, f"header announces d={d}, found {len(indices)} indices")
        return EncryptionMask(D=D, unencrypted=indices)

    def write_defended_gradient(self, defended: DefendedGradient, path: Union[str, Path]) -> Path:
        """
        GSDG1 export: magic, D, d (int64), σ (float64), seed (int64), y (D float64),
        unencrypted indices (d int64), all little-endian
        """
        path = Path(path)
        mask = defended.mask
        with open(path, "wb") as f:
            f.write(GRADIENT_MAGIC)
            f.write(struct.pack("<qqdq", mask.D, mask.d, defended.sigma, defended.seed))
            f.write(np.asarray(defended.y, dtype="<f8").tobytes())
            f.write(np.asarray(mask.unencrypted, dtype="<i8").tobytes())
        return path

    def read_defended_gradient(self, path: Union[str, Path]) -> DefendedGradient:
        path = Path(path)
        data = path.read_bytes()
        if data[:5] != GRADIENT_MAGIC:
            raise IngestionError(path, "bad magic, expected GSDG1")
        D, d, sigma, seed = struct.unpack("<qqdq", data[5:37])
        y = np.frombuffer(data, dtype="<f8", count=D, offset=37)
        indices = np.frombuffer(data, dtype="<i8", count=d, offset=37 + 8 * D)
        mask = EncryptionMask(D=D, unencrypted=indices)
        logger.debug(f"Read defended gradient D={D} d={d} from {path}")
        return DefendedGradient(y=y, mask=mask, sigma=sigma, seed=seed)


# Singleton instance
defense_service = DefenseService()
