"""
Header-prefixed binary container shared by clips and checkpoints.

Layout::

    [8 bytes]  ASCII decimal length of the JSON header, zero padded
    [N bytes]  UTF-8 JSON header: format, version, metadata, arrays (name, dtype, shape, offset, nbytes)
    [...]      array payloads, contiguous little-endian, in header order
"""
import json
import logging
import os
from collections import OrderedDict
from typing import Any, Dict, Mapping, Optional, Tuple

import numpy as np

from . import utils
from .exceptions import CorruptContainerError, MissingFileError

logger = logging.getLogger(__name__)

FORMAT_NAME = "profpipe-container"
FORMAT_VERSION = 1
HEADER_LENGTH_BYTES = 8

_SUPPORTED_DTYPES = {"<f4", "<f8", "<i8"}


def _little_endian_dtype(array: np.ndarray) -> np.dtype:
    dtype = array.dtype.newbyteorder("<")
    if dtype.str not in _SUPPORTED_DTYPES:
        raise TypeError(f"Unsupported array dtype for container: {array.dtype}")

    return dtype


def encode_container(arrays: Mapping[str, np.ndarray], metadata: Optional[Dict[str, Any]] = None) -> bytes:
    entries = []
    payloads = []
    offset = 0

    for name, array in arrays.items():
        dtype = _little_endian_dtype(array)
        data = np.ascontiguousarray(array, dtype=dtype).tobytes()

        entries.append(
            {"name": name, "dtype": dtype.str, "shape": list(array.shape), "offset": offset, "nbytes": len(data)}
        )
        payloads.append(data)
        offset += len(data)

    header = {
        "format": FORMAT_NAME,
        "version": FORMAT_VERSION,
        "metadata": metadata or {},
        "arrays": entries,
    }
    header_bytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()

    if len(header_bytes) >= 10**HEADER_LENGTH_BYTES:
        raise ValueError("Container header too large")

    prefix = f"{len(header_bytes):0{HEADER_LENGTH_BYTES}d}".encode("ascii")

    return b"".join([prefix, header_bytes] + payloads)


def decode_container(data: bytes, source: str = "<memory>") -> Tuple[Dict[str, Any], "OrderedDict[str, np.ndarray]"]:
    if len(data) < HEADER_LENGTH_BYTES:
        raise CorruptContainerError(source, "file shorter than the header length prefix")

    prefix = data[:HEADER_LENGTH_BYTES]
    try:
        header_length = int(prefix.decode("ascii"))
    except (UnicodeDecodeError, ValueError):
        raise CorruptContainerError(source, f"invalid header length prefix {prefix!r}")

    header_end = HEADER_LENGTH_BYTES + header_length
    if len(data) < header_end:
        raise CorruptContainerError(source, "header truncated")

    try:
        header = json.loads(data[HEADER_LENGTH_BYTES:header_end].decode())
    except (UnicodeDecodeError, ValueError) as e:
        raise CorruptContainerError(source, f"unreadable header: {e}")

    if not isinstance(header, dict) or header.get("format") != FORMAT_NAME:
        raise CorruptContainerError(source, "not a profpipe container")

    if header.get("version") != FORMAT_VERSION:
        raise CorruptContainerError(source, f"unsupported version {header.get('version')}")

    entries = header.get("arrays", [])
    metadata = header.get("metadata", {})
    if not isinstance(entries, list) or not isinstance(metadata, dict):
        raise CorruptContainerError(source, "header 'arrays' must be a list and 'metadata' a mapping")

    payload = memoryview(data)[header_end:]
    arrays = OrderedDict()

    for entry in entries:
        try:
            name, dtype, shape = entry["name"], np.dtype(entry["dtype"]), tuple(entry["shape"])
            offset, nbytes = int(entry["offset"]), int(entry["nbytes"])
        except (KeyError, TypeError, ValueError) as e:
            raise CorruptContainerError(source, f"malformed array entry: {e}")

        if not all(isinstance(d, int) and not isinstance(d, bool) and d >= 0 for d in shape):
            raise CorruptContainerError(source, f"array '{name}' has invalid shape {list(shape)}")

        expected = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
        if nbytes != expected:
            raise CorruptContainerError(source, f"array '{name}' declares {nbytes} bytes, shape needs {expected}")

        if offset < 0 or offset + nbytes > len(payload):
            raise CorruptContainerError(source, f"array '{name}' truncated")

        arrays[name] = np.frombuffer(payload[offset : offset + nbytes], dtype=dtype).reshape(shape).copy()

    return metadata, arrays


def write_container(path: str, arrays: Mapping[str, np.ndarray], metadata: Optional[Dict[str, Any]] = None):
    parent = os.path.dirname(path)
    if parent:
        utils.ensure_directory(parent)

    data = encode_container(arrays, metadata)

    with open(path, "wb") as f:
        f.write(data)

    logger.debug("Wrote container %s (%s)", path, utils.format_size(len(data)))


def read_container(path: str) -> Tuple[Dict[str, Any], "OrderedDict[str, np.ndarray]"]:
    if not os.path.isfile(path):
        raise MissingFileError(path, what="Container")

    with open(path, "rb") as f:
        data = f.read()

    return decode_container(data, source=path)
