import json
import os.path
from typing import Any, Dict, List, Optional

import yaml

from . import utils
from .exceptions import InvalidInputError, MissingFileError
from .models import RunConfig

try:
    from yaml import CLoader as YamlLoader
except ImportError:
    # noinspection PyUnresolvedReferences
    from yaml import Loader as YamlLoader


def parse_config_file(file_path: str) -> Dict[str, Any]:
    if not os.path.isfile(file_path):
        raise MissingFileError(file_path, what="Config file")

    with open(file_path) as f:
        data = yaml.load(f, Loader=YamlLoader)

    if data is None:
        return {}

    if not isinstance(data, dict):
        raise InvalidInputError(f"Config file {file_path} must hold a mapping, got {type(data).__name__}")

    return data


def parse_confusion_file(file_path: str) -> List[List[float]]:
    if not os.path.isfile(file_path):
        raise MissingFileError(file_path, what="Confusion matrix")

    with open(file_path) as f:
        data = json.load(f)

    # Either a bare matrix or {"confusion": [[...], ...]}
    if isinstance(data, dict):
        data = data.get("confusion")

    if not isinstance(data, list):
        raise InvalidInputError(f"{file_path} does not hold a confusion matrix")

    return data


def load_run_config(file_path: Optional[str] = None, overrides: Optional[Dict[str, Any]] = None) -> RunConfig:
    """Model defaults < config file < `overrides` (command-line flags; None values are ignored)."""
    data = parse_config_file(file_path) if file_path else {}

    return RunConfig.parse_obj(utils.deep_update(data, overrides or {}))
