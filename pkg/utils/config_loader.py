"""
KEY=value configuration files and their command-line flags.

Every key maps to one long flag (CUTOFF_HZ <-> --cutoff-hz). Values are
resolved as defaults < config file < flags. The file is read with
python-dotenv's dotenv_values, so comments, quoting and `export` prefixes
follow the usual .env rules and the process environment is left alone.
"""

import argparse
import logging
import os
from dataclasses import dataclass
from typing import Any, Callable, Dict, Optional, Tuple

from dotenv import dotenv_values

from utils.errors import ParameterError

logger = logging.getLogger(__name__)


def _parse_bool(text: str) -> bool:
    lowered = text.strip().lower()
    if lowered in ("1", "true", "yes", "on"):
        return True
    if lowered in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: '{text}'")


def _optional(parse: Callable[[str], Any]) -> Callable[[str], Any]:
    def parse_optional(text: str):
        return None if text.strip().lower() in ("", "none") else parse(text)
    return parse_optional


def _float_list(text: str) -> Tuple[float, ...]:
    return tuple(float(part) for part in text.split(",") if part.strip())


@dataclass(frozen=True)
class ConfigKey:
    name: str
    parse: Callable[[str], Any]
    default: Any
    help: str

    @property
    def flag(self) -> str:
        return "--" + self.name.lower().replace("_", "-")

    @property
    def dest(self) -> str:
        return self.name.lower()


CONFIG_KEYS: Tuple[ConfigKey, ...] = (
    # paths and run identity
    ConfigKey("DATA_DIR", str, None, "directory holding the downloaded records"),
    ConfigKey("OUTPUT_DIR", str, "lsf_output", "artifact directory"),
    ConfigKey("TASK", str, "arrhythmia", "arrhythmia or afib"),
    ConfigKey("SEED", _optional(int), None, "random seed (required by train stages)"),
    ConfigKey("RECORD_FORMAT", str, "wfdb", "wfdb or interchange"),
    ConfigKey("ANNOTATION_EXT", str, "atr", "annotation file extension"),
    ConfigKey("WORKERS", int, 1, "parallel workers for per-record and grid work"),
    # preprocessing
    ConfigKey("CUTOFF_HZ", float, 0.5, "high-pass cutoff in Hz"),
    ConfigKey("FILTER_ORDER", int, 4, "Butterworth order"),
    ConfigKey("TARGET_HZ", float, 100.0, "resampling target rate"),
    ConfigKey("NORM_MODE", str, "elementwise", "elementwise or channel z-normalisation"),
    ConfigKey("ZERO_PHASE", _parse_bool, False, "forward-backward filtering"),
    ConfigKey("CHANNEL", int, 0, "signal channel to use"),
    ConfigKey("WINDOW_S", float, 10.0, "segment length in seconds"),
    # splits
    ConfigKey("VALIDATION_FRACTION", float, 0.30, "share of training segments held out for validation"),
    ConfigKey("PATIENT_WISE_VALIDATION", _parse_bool, False, "draw validation by whole patients"),
    ConfigKey("PARADIGM", str, "inter", "inter or intra patient split"),
    ConfigKey("TEST_FRACTION", float, 0.16, "test share for random splits of custom record sets"),
    # LSTM
    ConfigKey("HIDDEN_SIZE", int, 100, "LSTM units per layer"),
    ConfigKey("LEARNING_RATE", float, 1e-3, "Adam learning rate"),
    ConfigKey("BATCH_SIZE", int, 64, "minibatch size"),
    ConfigKey("MAX_EPOCHS", int, 200, "epoch cap"),
    ConfigKey("PATIENCE", int, 10, "early-stopping patience in epochs"),
    ConfigKey("CLIP_NORM", float, 5.0, "global gradient-norm clip"),
    # SVM
    ConfigKey("SVM_GAMMA", _optional(float), None, "RBF gamma (default: scale heuristic)"),
    ConfigKey("SVM_TOLERANCE", float, 1e-3, "SMO KKT tolerance"),
    ConfigKey("SVM_CACHE_MB", float, 200.0, "kernel cache budget in MB"),
    ConfigKey("GRID_C_VALUES", _optional(_float_list), None, "comma-separated C values (default 0.1..2.0)"),
    ConfigKey("GRID_WEIGHT_VALUES", _optional(_float_list), None, "comma-separated class weights (default 0.1..1.0)"),
    ConfigKey("GRID_GAMMAS", _optional(_float_list), None, "comma-separated gammas added to the grid"),
    ConfigKey("GRID_SUBSAMPLE", _optional(int), None, "stratified training subsample for the grid"),
    # benchmark
    ConfigKey("N_SEGMENTS", int, 1000, "segments timed by the benchmark"),
)

KEYS_BY_NAME: Dict[str, ConfigKey] = {key.name: key for key in CONFIG_KEYS}


def add_config_arguments(parser: argparse.ArgumentParser) -> None:
    """One long flag per key; flags default to None so unset flags fall through to the file"""
    parser.add_argument("--config", default=None, help="KEY=value configuration file")
    for key in CONFIG_KEYS:
        # boolean flags work bare (--zero-phase) or with a value (--zero-phase false)
        extra = {"nargs": "?", "const": True} if key.parse is _parse_bool else {}
        parser.add_argument(key.flag, dest=key.dest, type=key.parse, default=None,
                            help=f"{key.help} [{key.name}, default {key.default}]", **extra)


def load_config_file(path: str) -> Dict[str, Any]:
    """Parsed values for the keys present in a config file"""
    if not os.path.exists(path):
        raise ParameterError(f"config file not found: {path}")
    raw = dotenv_values(path)
    unknown = sorted(set(raw) - set(KEYS_BY_NAME))
    if unknown:
        raise ParameterError(f"{path}: unknown configuration key(s): {', '.join(unknown)}")

    values = {}
    for name, text in raw.items():
        key = KEYS_BY_NAME[name]
        try:
            values[key.dest] = key.parse(text if text is not None else "")
        except ValueError as exc:
            raise ParameterError(f"{path}: {name}: {exc}") from exc
    logger.debug(f"⚙️ Loaded {len(values)} setting(s) from {path}")
    return values


def resolve_settings(namespace: Optional[argparse.Namespace] = None,
                     config_path: Optional[str] = None) -> Dict[str, Any]:
    """defaults < config file < flags, keyed by lower-case setting name"""
    flags = vars(namespace) if namespace is not None else {}
    config_path = config_path or flags.get("config")
    from_file = load_config_file(config_path) if config_path else {}

    resolved = {}
    for key in CONFIG_KEYS:
        if flags.get(key.dest) is not None:
            resolved[key.dest] = flags[key.dest]
        elif key.dest in from_file:
            resolved[key.dest] = from_file[key.dest]
        else:
            resolved[key.dest] = key.default
    return resolved
