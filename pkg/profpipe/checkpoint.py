import logging
import os
from collections import OrderedDict
from typing import Any, Dict, Tuple

import numpy as np
import torch
from torch import nn

from .container import read_container, write_container
from .exceptions import CorruptContainerError, MissingCheckpointError

logger = logging.getLogger(__name__)

# Method 1 reuses the Method 2 optimisation recipe; recorded in every checkpoint it writes
METHOD1_RECIPE_ASSUMPTION = "Method 1 optimizer, epochs and batch size reuse the Method 2 recipe (AdamW)."


def state_arrays(module: nn.Module) -> "OrderedDict[str, np.ndarray]":
    return OrderedDict((name, tensor.detach().cpu().numpy()) for name, tensor in module.state_dict().items())


def save_checkpoint(path: str, module: nn.Module, metadata: Dict[str, Any]):
    write_container(path, state_arrays(module), metadata)
    logger.debug("Saved checkpoint %s", path)


def read_checkpoint(path: str) -> Tuple[Dict[str, Any], "OrderedDict[str, torch.Tensor]"]:
    if not os.path.isfile(path):
        raise MissingCheckpointError(path)

    metadata, arrays = read_container(path)
    return metadata, OrderedDict((name, torch.from_numpy(array)) for name, array in arrays.items())


def load_state(path: str, module: nn.Module, state: "OrderedDict[str, torch.Tensor]") -> nn.Module:
    try:
        module.load_state_dict(state)
    except RuntimeError as e:
        raise CorruptContainerError(path, f"parameters do not match the recorded configuration: {e}")

    module.eval()
    return module
