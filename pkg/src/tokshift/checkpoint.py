"""TKSF checkpoint files.

Layout (little-endian): magic ``b"TKSF"``, u32 version (1), u32 tensor count,
then per tensor: u16 name length, UTF-8 name, u8 rank, rank x u64 dims and
the values as float32 in row-major order.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .model import ModelConfig, Parameters, parameter_shapes

MAGIC = b"TKSF"
VERSION = 1


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, params: Parameters) -> None:
    chunks = [MAGIC, struct.pack("<II", VERSION, len(params))]
    for name, t in params.items():
        raw = name.encode("utf-8")
        shape = t.shape
        chunks.append(struct.pack("<H", len(raw)) + raw)
        chunks.append(struct.pack("<B", len(shape)) + struct.pack(f"<{len(shape)}Q", *shape))
        chunks.append(np.ascontiguousarray(t.data, dtype="<f4").tobytes())
    Path(path).write_bytes(b"".join(chunks))


def load_checkpoint(path) -> Parameters:
    data = Path(path).read_bytes()
    if data[:4] != MAGIC:
        raise CheckpointError(f"bad checkpoint magic {data[:4]!r} in {path}")
    try:
        version, count = struct.unpack_from("<II", data, 4)
        if version != VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version}")
        pos = 12
        arrays = {}
        for _ in range(count):
            (n,) = struct.unpack_from("<H", data, pos)
            pos += 2
            name = data[pos:pos + n].decode("utf-8")
            pos += n
            (rank,) = struct.unpack_from("<B", data, pos)
            pos += 1
            shape = struct.unpack_from(f"<{rank}Q", data, pos)
            pos += 8 * rank
            size = int(np.prod(shape))
            values = np.frombuffer(data, dtype="<f4", count=size, offset=pos)
            pos += 4 * size
            arrays[name] = values.astype(np.float64).reshape(shape)
    except CheckpointError:
        raise
    except (struct.error, ValueError) as exc:
        # short reads surface as struct.error or as a too-small frombuffer
        raise CheckpointError(f"truncated or corrupt checkpoint {path}: {exc}") from exc
    if pos != len(data):
        raise CheckpointError(f"{len(data) - pos} trailing bytes in checkpoint {path}")
    return Parameters.from_arrays(arrays)


def check_against(params: Parameters, config: ModelConfig) -> None:
    """Raise :class:`CheckpointError` naming both shapes on the first mismatch."""
    expected = parameter_shapes(config)
    for name, shape in expected.items():
        if name not in params:
            raise CheckpointError(f"checkpoint lacks tensor {name} (config expects shape {shape})")
        if params[name].shape != shape:
            raise CheckpointError(
                f"{name}: checkpoint shape {params[name].shape} != config shape {shape}"
            )
    extra = sorted(set(params) - set(expected))
    if extra:
        raise CheckpointError(f"checkpoint has tensors the config does not: {extra}")


def round_to_f32(params: Parameters) -> None:
    """Round parameter values in place to what a checkpoint would store."""
    for t in params.values():
        t.data[...] = t.data.astype(np.float32)
