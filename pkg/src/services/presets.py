"""Presets - Shared system, model and reference-result configs loaded from configs/"""

import json
import os
from pathlib import Path

from src.core.errors import ConfigurationError, FileFormatError
from src.services.perf_model import SystemConfig
from src.services.transformer_runner import ModelConfig
from src.utils.log import get_logger

logger = get_logger(__name__)

DEFAULT_CONFIG_DIR = Path(__file__).resolve().parents[2] / "configs"


def _read_json(path):
    try:
        with open(path, "r") as f:
            return json.load(f)
    except OSError as e:
        raise ConfigurationError(f"cannot read {path}: {e}") from e
    except json.JSONDecodeError as e:
        raise FileFormatError(f"{path}: {e}") from e


class PresetLibrary:
    """Lazily loads each config file once per process"""

    def __init__(self, config_dir=None):
        self.config_dir = Path(config_dir or os.environ.get("MXSIM_CONFIG_DIR") or DEFAULT_CONFIG_DIR)
        self._systems = {}
        self._models = None
        self._references = None

    def system(self, name, chips=None):
        """SystemConfig by name (base/large) or by path to a JSON file"""
        key = str(name)
        if key not in self._systems:
            path = Path(key) if key.endswith(".json") else self.config_dir / "systems" / f"{key}.json"
            self._systems[key] = SystemConfig.from_dict(_read_json(path))
            logger.debug(f"Loaded system preset {key} from {path}")
        system = self._systems[key]
        return system.with_chips(chips) if chips else system

    def _load_models(self):
        if self._models is None:
            self._models = {}
            for path in sorted((self.config_dir / "models").glob("*.json")):
                entry = _read_json(path)
                mapping = entry.pop("mapping", {})
                config = ModelConfig.from_dict(entry)
                self._models[config.name] = (config, mapping)
            logger.debug(f"Loaded {len(self._models)} model presets")
        return self._models

    def model(self, name):
        if str(name).endswith(".json"):
            entry = _read_json(name)
            entry.pop("mapping", None)
            return ModelConfig.from_dict(entry)
        models = self._load_models()
        if name not in models:
            raise ConfigurationError(f"unknown model preset {name!r}; known: {sorted(models)}")
        return models[name][0]

    def mapping(self, name):
        """{"system": ..., "chips": ...} a zoo model runs on"""
        self.model(name)
        return dict(self._load_models()[name][1])

    def zoo(self):
        """Model configs that carry a system mapping, in file order"""
        return [config for config, mapping in self._load_models().values() if mapping]

    def mapped_system(self, name):
        mapping = self.mapping(name)
        return self.system(mapping.get("system", "base"), mapping.get("chips", 1))

    def references(self):
        if self._references is None:
            self._references = _read_json(self.config_dir / "reference_results.json")
        return self._references


# One library per process, shared by every command
presets = PresetLibrary()
