"""Binary parameter container and versioned checkpoints.

A record is ``u64 name length``, the UTF-8 name, ``u64 rank``, ``rank``
``u64`` dims and the little-endian float64 values. A checkpoint is the magic
``GATTNCKP``, a ``u64``-prefixed YAML header, a ``u64`` record count and the
records.
"""

from __future__ import annotations

import io
import logging
import struct
from pathlib import Path
from typing import Any, BinaryIO, Dict, Mapping, Tuple

import numpy as np
import yaml

from . import tensor as T
from .config import RunConfig, config_from_dict
from .errors import DataError
from .model import GuidedAttentionModel
from .tokens import RESERVED, Vocabulary

logger = logging.getLogger(__name__)

MAGIC = b"GATTNCKP"
FORMAT_VERSION = 1
_U64 = struct.Struct("<Q")


def _read_exact(stream: BinaryIO, size: int) -> bytes:
    data = stream.read(size)
    if len(data) != size:
        raise DataError(f"Truncated data: wanted {size} bytes, got {len(data)}.")
    return data


def _read_u64(stream: BinaryIO) -> int:
    return _U64.unpack(_read_exact(stream, 8))[0]


def write_record(stream: BinaryIO, name: str, array: np.ndarray) -> None:
    encoded = name.encode("utf-8")
    array = np.asarray(array)
    stream.write(_U64.pack(len(encoded)))
    stream.write(encoded)
    stream.write(_U64.pack(array.ndim))
    for dim in array.shape:
        stream.write(_U64.pack(dim))
    stream.write(np.ascontiguousarray(array, dtype="<f8").tobytes())


def read_record(stream: BinaryIO) -> Tuple[str, np.ndarray]:
    name = _read_exact(stream, _read_u64(stream)).decode("utf-8")
    rank = _read_u64(stream)
    shape = tuple(_read_u64(stream) for _ in range(rank))
    count = int(np.prod(shape, dtype=np.int64))
    values = np.frombuffer(_read_exact(stream, 8 * count), dtype="<f8")
    return name, values.reshape(shape).astype(np.float64)


def write_params(stream: BinaryIO, params: Mapping[str, np.ndarray]) -> None:
    stream.write(_U64.pack(len(params)))
    for name, array in params.items():
        write_record(stream, name, array)


def read_params(stream: BinaryIO) -> Dict[str, np.ndarray]:
    count = _read_u64(stream)
    params: Dict[str, np.ndarray] = {}
    for _ in range(count):
        name, array = read_record(stream)
        params[name] = array
    return params


def save_checkpoint(path: str | Path, model: GuidedAttentionModel, cfg: RunConfig, **extra: Any) -> Path:
    """Write ``model`` (parameters and batch-norm statistics) with a YAML header."""

    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    header = {
        "format_version": FORMAT_VERSION,
        "config": cfg.to_dict(),
        "vocabulary": list(model.vocab.tokens[len(RESERVED):]),
        "parameter_count": model.num_parameters(),
        **extra,
    }
    encoded = yaml.safe_dump(header, sort_keys=False).encode("utf-8")
    buffer = io.BytesIO()
    buffer.write(MAGIC)
    buffer.write(_U64.pack(len(encoded)))
    buffer.write(encoded)
    write_params(buffer, model.state_dict())
    path.write_bytes(buffer.getvalue())
    logger.debug("saved checkpoint %s (%d parameters)", path, header["parameter_count"])
    return path


def read_checkpoint(path: str | Path) -> Tuple[Dict[str, Any], Dict[str, np.ndarray]]:
    """Return ``(header, state)`` of a checkpoint file.

    Raises
    ------
    DataError
        If the file is missing, has the wrong magic or version, or is truncated.
    """

    path = Path(path)
    if not path.is_file():
        raise DataError(f"Checkpoint '{path}' does not exist.")
    with path.open("rb") as stream:
        if stream.read(len(MAGIC)) != MAGIC:
            raise DataError(f"'{path}' is not a checkpoint file.")
        try:
            header = yaml.safe_load(_read_exact(stream, _read_u64(stream)).decode("utf-8"))
        except yaml.YAMLError as exc:
            raise DataError(f"Corrupt checkpoint header in '{path}': {exc}") from exc
        if not isinstance(header, dict) or header.get("format_version") != FORMAT_VERSION:
            raise DataError(f"Unsupported checkpoint version in '{path}'.")
        state = read_params(stream)
    return header, state


def load_checkpoint(path: str | Path) -> Tuple[GuidedAttentionModel, RunConfig]:
    """Rebuild the model stored in ``path`` in evaluation mode."""

    header, state = read_checkpoint(path)
    cfg = config_from_dict(header["config"])
    T.set_default_dtype(cfg.precision)
    model = GuidedAttentionModel(
        Vocabulary(header["vocabulary"]), cfg.encoder, cfg.decoder, seed=cfg.seed
    )
    try:
        model.load_state_dict(state)
    except (KeyError, ValueError) as exc:
        raise DataError(f"Checkpoint '{path}' does not match its configuration: {exc}") from exc
    return model.eval(), cfg
