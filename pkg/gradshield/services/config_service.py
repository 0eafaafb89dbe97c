"""
Config Service

Experiment files are TOML: `key = value` lines grouped under `[section]`
headers. Parsing fills defaults, rejects unknown keys with a close-match
suggestion and reports malformed input with its line number.
"""
import hashlib
import json
import re

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib
from pathlib import Path
from typing import Any, Optional, Tuple, Type, Union

from pydantic import BaseModel, ValidationError

from gradshield.core.exceptions import ConfigParseError, ConfigValidationError
from gradshield.core.logging_config import logger
from gradshield.models.experiment import ExperimentConfig
from gradshield.utils.helpers import suggest_key

_LINE = re.compile(r"line (\d+)")


class ConfigService:
    """Load, validate and fingerprint experiment configurations"""

    def parse_config(self, path: Union[str, Path], kind: Optional[str] = None) -> ExperimentConfig:
        """
        Read and validate an experiment file

        Args:
            path: TOML experiment file
            kind: Experiment kind named on the command line; fills a missing
                `kind` key and must agree with a present one

        Returns:
            ExperimentConfig with defaults filled

        Raises:
            ConfigParseError: file missing or not valid TOML
            ConfigValidationError: unknown key or invalid value
        """
        path = Path(path)
        try:
            text = path.read_text()
        except OSError as e:
            raise ConfigParseError(f"cannot read {path}: {e}")
        return self.parse_text(text, kind)

    def parse_text(self, text: str, kind: Optional[str] = None) -> ExperimentConfig:
        try:
            raw = tomllib.loads(text)
        except tomllib.TOMLDecodeError as e:
            match = _LINE.search(str(e))
            raise ConfigParseError(str(e).split(" (at ")[0], line=int(match.group(1)) if match else None)
        if kind is not None:
            if raw.setdefault("kind", kind) != kind:
                raise ConfigValidationError("kind", f"file declares '{raw['kind']}' but '{kind}' was requested")
        return self.validate(raw)

    def validate(self, raw: dict) -> ExperimentConfig:
        try:
            config = ExperimentConfig.model_validate(raw)
        except ValidationError as e:
            raise self._translate(e)
        logger.debug("Configuration validated", extra={"extra_fields": {"kind": config.kind}})
        return config

    def _translate(self, error: ValidationError) -> ConfigValidationError:
        first = error.errors()[0]
        loc = tuple(str(part) for part in first["loc"])
        field = ".".join(loc) or "<root>"
        if first["type"] == "extra_forbidden":
            owner = self._model_at(ExperimentConfig, loc[:-1])
            suggestion = suggest_key(loc[-1], owner.model_fields) if owner else None
            return ConfigValidationError(field, "unknown key", suggestion)
        message = first["msg"]
        if message.startswith("Value error, "):
            message = message[len("Value error, "):]
        return ConfigValidationError(field, message)

    def _model_at(self, model: Type[BaseModel], loc: Tuple[str, ...]) -> Optional[Type[BaseModel]]:
        """Model class owning the keys at a nested location"""
        for part in loc:
            info = model.model_fields.get(part)
            annotation = info.annotation if info else None
            if not (isinstance(annotation, type) and issubclass(annotation, BaseModel)):
                return None
            model = annotation
        return model

    def apply_overrides(self, config: ExperimentConfig, seed: Optional[int] = None, out: Optional[str] = None) -> ExperimentConfig:
        """Command-line --seed / --out applied after validation"""
        update: dict[str, Any] = {}
        if seed is not None:
            update["seed"] = seed
        if out is not None:
            update["output_dir"] = out
        return config.model_copy(update=update) if update else config

    def canonical_json(self, config: ExperimentConfig) -> str:
        """Key-sorted JSON of the semantic content (output_dir excluded)"""
        data = config.model_dump(mode="json", exclude={"output_dir"})
        return json.dumps(data, sort_keys=True, separators=(",", ":"))

    def config_hash(self, config: ExperimentConfig) -> str:
        """SHA-256 of the canonical JSON; key order in the file does not matter"""
        return hashlib.sha256(self.canonical_json(config).encode()).hexdigest()

    def snapshot(self, config: ExperimentConfig) -> str:
        """Indented JSON echo of the fully defaulted config"""
        return json.dumps(config.model_dump(mode="json"), indent=2, sort_keys=True)


# Singleton instance
config_service = ConfigService()
