import hashlib
import json
import logging
import os
from typing import Any, Dict, Sequence, Union

import numpy as np
from appdirs import user_data_dir
from slugify import slugify

from . import APP_NAME
from . import __name__ as __project_name__
from .exceptions import InvalidInputError

logger = logging.getLogger(__name__)

_SEED_MASK = 2**63 - 1


def get_data_directory() -> str:
    return user_data_dir(appname=APP_NAME)


def get_default_output_directory() -> str:
    return os.path.join(get_data_directory(), "runs")


def ensure_directory(path) -> str:
    if not os.path.exists(path):
        os.makedirs(path)

    return path


def attach_run_log(output_directory: str, name: str) -> logging.Handler:
    log_directory = ensure_directory(os.path.join(output_directory, "logs"))

    handler = logging.FileHandler(os.path.join(log_directory, f"{name}.log"), mode="w")
    handler.setFormatter(
        logging.Formatter(
            "%(asctime)s.%(msecs)03d [%(levelname)-8s] %(name)s: %(message)s", datefmt="%Y-%m-%d %H:%M:%S"
        )
    )

    project_logger = logging.getLogger(__project_name__)
    project_logger.addHandler(handler)
    if project_logger.level == logging.NOTSET or project_logger.level > logging.INFO:
        project_logger.setLevel(logging.INFO)

    return handler


def detach_run_log(handler: logging.Handler):
    logging.getLogger(__project_name__).removeHandler(handler)
    handler.close()


def stable_hash(value: str) -> int:
    digest = hashlib.sha256(value.encode()).digest()
    return int.from_bytes(digest[:8], "little") & _SEED_MASK


def derive_seed(seed: int, *keys: Union[str, int]) -> int:
    """
    Mixes `seed` with `keys` into a new non-negative 63-bit seed.

    Independent of call order and of the process hash seed, so parallel and serial callers agree.
    """
    material = ":".join([str(seed)] + [str(k) for k in keys])
    return stable_hash(material)


def rng_for(seed: int, *keys: Union[str, int]) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed & _SEED_MASK, derive_seed(seed, *keys)]))


def make_sample_id(scenario_name: str, index: int) -> str:
    return f"{slugify(scenario_name)}-{index:04d}"


def deep_update(base: Dict[str, Any], overrides: Dict[str, Any]) -> Dict[str, Any]:
    merged = dict(base)

    for key, value in overrides.items():
        if value is None:
            continue

        if isinstance(value, dict):
            base_value = merged.get(key)
            merged[key] = deep_update(base_value if isinstance(base_value, dict) else {}, value)
        else:
            merged[key] = value

    return merged


def dump_json(value: Any) -> str:
    return json.dumps(value, indent=2, sort_keys=True) + "\n"


def write_text(path: str, text: str):
    parent = os.path.dirname(path)
    if parent:
        ensure_directory(parent)

    with open(path, "w", newline="\n", encoding="utf-8") as f:
        f.write(text)


def format_percent(value: float) -> str:
    return f"{100.0 * value:.1f}"


def argmax_lowest(values: Sequence[float]) -> int:
    # np.argmax returns the first maximal index
    return int(np.argmax(np.asarray(values, dtype=np.float64)))


def format_size(num_bytes: int) -> str:
    size = float(num_bytes)
    for unit in ("B", "KiB", "MiB"):
        if size < 1024.0:
            return f"{size:.1f}{unit}"

        size /= 1024.0

    return f"{size:.1f}GiB"


def softmax(logits) -> np.ndarray:
    """Numerically stable softmax in float64."""
    if hasattr(logits, "detach"):
        logits = logits.detach().cpu().tolist()

    values = np.asarray(logits, dtype=np.float64)
    if values.ndim != 1 or values.size == 0:
        raise InvalidInputError(f"softmax expects a non-empty vector, got shape {values.shape}")
    if not np.isfinite(values).all():
        raise InvalidInputError(f"logits contain non-finite values: {values.tolist()}")

    exp = np.exp(values - values.max())
    return exp / exp.sum()
