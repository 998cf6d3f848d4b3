"""
Versioned binary checkpoint, little-endian throughout:

    magic            4 bytes   b"NPC1"
    spec digest     32 bytes   SHA-256 of the canonical ModelSpec JSON
    header        u32 + JSON   {"spec": ..., "metadata": ...}
    parameters    u32 count, then named arrays in registry order
    state         u32 count, then named arrays (importance, strategy state)

A named array is: u16 name length, UTF-8 name, u8 ndim, u32 per dimension,
then float64 values in C order.
"""
import dataclasses
import json
import logging
import struct
from typing import BinaryIO, Dict, Optional

import numpy as np

from plasticity_control import errors
from plasticity_control.nn_layers import ModelSpec
from plasticity_control.tensor_core import Tensor

logger = logging.getLogger(__name__)

MAGIC = b"NPC1"
DIGEST_SIZE = 32
VALUE_DTYPE = np.dtype("<f8")


@dataclasses.dataclass
class Checkpoint:
    spec: ModelSpec
    params: Dict[str, np.ndarray]
    state: Dict[str, np.ndarray]
    metadata: Dict


def _write_array(handle: BinaryIO, name: str, values: np.ndarray) -> None:
    encoded = name.encode("utf-8")
    values = np.ascontiguousarray(values, dtype=VALUE_DTYPE)
    handle.write(struct.pack("<H", len(encoded)))
    handle.write(encoded)
    handle.write(struct.pack("<B", values.ndim))
    handle.write(struct.pack(f"<{values.ndim}I", *values.shape))
    handle.write(values.tobytes())


def _read_exact(handle: BinaryIO, size: int) -> bytes:
    data = handle.read(size)
    if len(data) != size:
        raise errors.FormatError(
            f"checkpoint truncated: expected {size} bytes, found {len(data)}"
        )
    return data


def _read_array(handle: BinaryIO):
    (length,) = struct.unpack("<H", _read_exact(handle, 2))
    name = _read_exact(handle, length).decode("utf-8")
    (ndim,) = struct.unpack("<B", _read_exact(handle, 1))
    shape = struct.unpack(f"<{ndim}I", _read_exact(handle, 4 * ndim))
    count = int(np.prod(shape)) if ndim else 1
    values = np.frombuffer(_read_exact(handle, count * VALUE_DTYPE.itemsize), dtype=VALUE_DTYPE)
    return name, values.reshape(shape).astype(np.float64)


def _write_section(handle: BinaryIO, arrays: Dict[str, np.ndarray]) -> None:
    handle.write(struct.pack("<I", len(arrays)))
    for name, values in arrays.items():
        _write_array(handle, name, values)


def _read_section(handle: BinaryIO) -> Dict[str, np.ndarray]:
    (count,) = struct.unpack("<I", _read_exact(handle, 4))
    return dict(_read_array(handle) for _ in range(count))


def save_checkpoint(
    path: str,
    spec: ModelSpec,
    params: Dict[str, Tensor],
    state: Optional[Dict[str, np.ndarray]] = None,
    metadata: Optional[Dict] = None,
) -> None:
    header = json.dumps({"spec": spec.to_dict(), "metadata": metadata or {}}, sort_keys=True).encode("utf-8")
    ordered = {name: params[name].data for name in spec.parameter_shapes()}
    with open(path, "wb") as handle:
        handle.write(MAGIC)
        handle.write(spec.digest())
        handle.write(struct.pack("<I", len(header)))
        handle.write(header)
        _write_section(handle, ordered)
        _write_section(handle, state or {})
    logger.debug(f"Checkpoint written to {path}")


def load_checkpoint(path: str, expected_spec: Optional[ModelSpec] = None) -> Checkpoint:
    """Read a checkpoint.

    Raises:
        FormatError: wrong magic, digest/header disagreement or truncation.
        ConfigurationError: if ``expected_spec`` differs from the stored spec.
    """
    with open(path, "rb") as handle:
        magic = handle.read(len(MAGIC))
        if magic != MAGIC:
            raise errors.FormatError(f"{path}: bad checkpoint magic {magic!r}")
        digest = _read_exact(handle, DIGEST_SIZE)
        (length,) = struct.unpack("<I", _read_exact(handle, 4))
        header = json.loads(_read_exact(handle, length).decode("utf-8"))
        spec = ModelSpec.from_dict(header["spec"])
        if spec.digest() != digest:
            raise errors.FormatError(f"{path}: spec digest does not match header")
        params = _read_section(handle)
        state = _read_section(handle)
    if expected_spec is not None and expected_spec.digest() != digest:
        raise errors.ConfigurationError(
            f"{path}: checkpoint spec {spec} does not match expected {expected_spec}"
        )
    return Checkpoint(spec=spec, params=params, state=state, metadata=header["metadata"])
