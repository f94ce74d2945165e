"""Settings - Effective run settings and the run manifest

Precedence is CLI flag > --config JSON file > environment > values stored with
the inputs > built-in default. Each layer only fills keys that are still absent.
"""

import hashlib
import json
import os
import subprocess
from dataclasses import asdict, dataclass, field
from datetime import datetime, timezone
from importlib import metadata
from typing import Optional

from src.core.errors import ConfigurationError, FileFormatError
from src.utils.log import get_logger

logger = get_logger(__name__)

PACKAGE_NAME = "mxformer-sim"
FALLBACK_VERSION = "0.3.0"

# Widest current-mirror range a physical macro could offer, in binades
CM_PLAUSIBLE_MAX = 10

DEFAULTS = {
    "seed": 0,
    "threads": 1,
    "cm": 3,
    "adc": 10,
    "two_pass": True,
    "strategy": "row_hist",
    "offset": 0,
    "percentile": 100.0,
    "k_window": 7,
    "system": "base",
}


def parse_cm(value):
    """Integer cm, or None (unbounded) for `inf` and anything above the plausible cap"""
    if value is None:
        return None
    if isinstance(value, str) and value.strip().lower() in ("inf", "none", "unbounded"):
        return None
    try:
        cm = int(value)
    except (TypeError, ValueError):
        raise ConfigurationError(f"cm must be an integer or 'inf', got {value!r}")
    if cm < 0:
        raise ConfigurationError(f"cm must be >= 0, got {cm}")
    if cm > CM_PLAUSIBLE_MAX:
        logger.warning(f"cm={cm} exceeds {CM_PLAUSIBLE_MAX} binades; treating it as unbounded")
        return None
    return cm


def parse_adc(value):
    """Integer ADC bits, or None for an ideal converter"""
    if value is None or (isinstance(value, str) and value.strip().lower() == "ideal"):
        return None
    try:
        return int(value)
    except (TypeError, ValueError):
        raise ConfigurationError(f"adc must be an integer or 'ideal', got {value!r}")


def load_config_file(path):
    if path is None:
        return {}
    try:
        with open(path, "r") as f:
            data = json.load(f)
    except OSError as e:
        raise ConfigurationError(f"cannot read config {path}: {e}") from e
    except json.JSONDecodeError as e:
        raise FileFormatError(f"{path}: {e}") from e
    if not isinstance(data, dict):
        raise FileFormatError(f"{path}: expected a JSON object")
    unknown = set(data) - set(DEFAULTS)
    if unknown:
        raise ConfigurationError(f"{path}: unknown settings {sorted(unknown)}")
    return data


@dataclass(frozen=True)
class Settings:
    seed: int
    threads: int
    cm: Optional[int]
    adc: Optional[int]
    two_pass: bool
    strategy: str
    offset: int
    percentile: float
    k_window: Optional[int]
    system: str

    def as_dict(self):
        return asdict(self)


def resolve_settings(cli=None, config_path=None, stored=None):
    """
    Merge CLI flags, an optional config file, stored values and the defaults.

    Args:
        cli: dict of flag values; None means the flag was not given
        config_path: optional JSON file with any subset of DEFAULTS keys
        stored: values recorded with the inputs (e.g. the calibration's strategy)
    """
    resolved = {k: v for k, v in (cli or {}).items() if v is not None and k in DEFAULTS}
    for key, value in load_config_file(config_path).items():
        if key not in resolved:
            resolved[key] = value
    if "threads" not in resolved and os.environ.get("MXSIM_THREADS"):
        try:
            resolved["threads"] = int(os.environ["MXSIM_THREADS"])
        except ValueError:
            raise ConfigurationError(f"MXSIM_THREADS must be an integer, got {os.environ['MXSIM_THREADS']!r}")
    for key, value in (stored or {}).items():
        if key in DEFAULTS and key not in resolved and value is not None:
            resolved[key] = value
    for key, value in DEFAULTS.items():
        if key not in resolved:
            resolved[key] = value
    resolved["cm"] = parse_cm(resolved["cm"])
    resolved["adc"] = parse_adc(resolved["adc"])
    resolved["threads"] = max(1, int(resolved["threads"]))
    return Settings(**resolved)


def package_version():
    """`git describe` of the working tree when available, else the installed version"""
    try:
        described = subprocess.run(
            ["git", "describe", "--always", "--dirty"],
            capture_output=True,
            text=True,
            timeout=5,
            cwd=os.path.dirname(os.path.abspath(__file__)),
        )
        if described.returncode == 0 and described.stdout.strip():
            return described.stdout.strip()
    except (OSError, subprocess.SubprocessError):
        pass
    try:
        return metadata.version(PACKAGE_NAME)
    except metadata.PackageNotFoundError:
        return FALLBACK_VERSION


def _now():
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


@dataclass
class RunManifest:
    command: str
    seed: int
    settings: dict
    config_paths: list = field(default_factory=list)
    outputs: list = field(default_factory=list)
    version: str = field(default_factory=package_version)
    started: str = field(default_factory=_now)
    finished: Optional[str] = None

    def finish(self):
        self.finished = _now()
        return self

    @property
    def manifest_hash(self):
        stable = {k: v for k, v in asdict(self).items() if k not in ("started", "finished")}
        canonical = json.dumps(stable, sort_keys=True, separators=(",", ":"), default=str)
        return hashlib.sha256(canonical.encode()).hexdigest()

    def as_dict(self):
        data = asdict(self)
        data["hash"] = self.manifest_hash
        return data
