"""Binary checkpoint format.

Layout: magic ``RDCK``, u32 version, length-prefixed JSON header (vocabulary,
stage configuration, architecture sizes, optimizer step), u64 tensor count,
then per tensor a length-prefixed UTF-8 name, u32 rank, u64 dims, and raw
little-endian float32 data in row-major order. The file ends with a u32
CRC32 of everything before it. Optimizer moments are stored as tensors named
``adam.m.*`` / ``adam.v.*``.
"""

from __future__ import annotations

import json
import struct
import zlib

import numpy as np

from .chem import AtomVocab
from .model import AdamState, ArchConfig, DenoiserParams
from .pipeline import StageConfig

MAGIC = b"RDCK"
VERSION = 1


class CheckpointError(ValueError):
    pass


class CheckpointCorrupt(CheckpointError):
    """Truncated file or checksum failure."""


class CheckpointIncompatible(CheckpointError):
    """Checkpoint does not match the requested vocabulary or sizes."""


def save_checkpoint(path, params: DenoiserParams,
                    opt_state: AdamState | None = None,
                    stage_config: StageConfig | None = None) -> None:
    header = {
        "vocab": list(params.vocab.symbols),
        "arch": {
            "n_layer": params.arch.n_layer,
            "dx": params.arch.dx,
            "de": params.arch.de,
            "dy": params.arch.dy,
            "n_head": params.arch.n_head,
        },
        "init_seed": params.init_seed,
        "adam_step": opt_state.step if opt_state is not None else None,
        "stage_config": stage_config.to_dict() if stage_config is not None else None,
    }
    tensors = dict(params.tensors)
    if opt_state is not None:
        for name, arr in opt_state.m.items():
            tensors[f"adam.m.{name}"] = arr
        for name, arr in opt_state.v.items():
            tensors[f"adam.v.{name}"] = arr

    body = bytearray()
    body += MAGIC
    body += struct.pack("<I", VERSION)
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
    body += struct.pack("<I", len(header_bytes))
    body += header_bytes
    body += struct.pack("<Q", len(tensors))
    for name in sorted(tensors):
        arr = np.ascontiguousarray(tensors[name], dtype="<f4")
        name_bytes = name.encode("utf-8")
        body += struct.pack("<I", len(name_bytes))
        body += name_bytes
        body += struct.pack("<I", arr.ndim)
        for dim in arr.shape:
            body += struct.pack("<Q", dim)
        body += arr.tobytes(order="C")
    crc = zlib.crc32(bytes(body)) & 0xFFFFFFFF
    body += struct.pack("<I", crc)
    with open(path, "wb") as fh:
        fh.write(bytes(body))


def load_checkpoint(path):
    """Read a checkpoint; returns (params, optimizer state or None, stage config or None)."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 16:
        raise CheckpointCorrupt("file too short to be a checkpoint")
    if blob[:4] != MAGIC:
        raise CheckpointError("magic mismatch: not a checkpoint file")
    stored_crc = struct.unpack("<I", blob[-4:])[0]
    actual_crc = zlib.crc32(blob[:-4]) & 0xFFFFFFFF
    if stored_crc != actual_crc:
        raise CheckpointCorrupt("checksum failure")

    off = 4
    (version,) = struct.unpack_from("<I", blob, off)
    off += 4
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    (header_len,) = struct.unpack_from("<I", blob, off)
    off += 4
    header = json.loads(blob[off:off + header_len].decode("utf-8"))
    off += header_len
    (count,) = struct.unpack_from("<Q", blob, off)
    off += 8

    tensors: dict[str, np.ndarray] = {}
    end = len(blob) - 4
    for _ in range(count):
        if off + 4 > end:
            raise CheckpointCorrupt("truncated tensor table")
        (name_len,) = struct.unpack_from("<I", blob, off)
        off += 4
        name = blob[off:off + name_len].decode("utf-8")
        off += name_len
        (rank,) = struct.unpack_from("<I", blob, off)
        off += 4
        dims = struct.unpack_from(f"<{rank}Q", blob, off)
        off += 8 * rank
        n_items = int(np.prod(dims)) if rank else 1
        nbytes = 4 * n_items
        if off + nbytes > end:
            raise CheckpointCorrupt("truncated tensor data")
        arr = np.frombuffer(blob, dtype="<f4", count=n_items, offset=off).reshape(dims)
        tensors[name] = arr.copy()
        off += nbytes
    if off != end:
        raise CheckpointCorrupt("trailing bytes after tensor table")

    arch = ArchConfig(**header["arch"])
    vocab = AtomVocab(tuple(header["vocab"]))
    param_tensors = {k: v for k, v in tensors.items() if not k.startswith("adam.")}
    params = DenoiserParams(arch=arch, vocab=vocab, tensors=param_tensors,
                            init_seed=header.get("init_seed", 0))
    _check_shapes(params)

    opt_state = None
    if header.get("adam_step") is not None:
        m = {k[len("adam.m."):]: v for k, v in tensors.items() if k.startswith("adam.m.")}
        v = {k[len("adam.v."):]: v for k, v in tensors.items() if k.startswith("adam.v.")}
        if set(m) != set(param_tensors) or set(v) != set(param_tensors):
            raise CheckpointCorrupt("optimizer tensors do not cover the parameters")
        opt_state = AdamState(m=m, v=v, step=int(header["adam_step"]))

    stage_config = None
    if header.get("stage_config") is not None:
        stage_config = StageConfig.from_dict(header["stage_config"])
    return params, opt_state, stage_config


def _check_shapes(params: DenoiserParams) -> None:
    from .model import init_params

    expected = init_params(params.arch, params.vocab, seed=0)
    if set(expected.tensors) != set(params.tensors):
        raise CheckpointIncompatible("tensor names do not match the architecture")
    for name, arr in expected.tensors.items():
        if params.tensors[name].shape != arr.shape:
            raise CheckpointIncompatible(
                f"tensor {name} has shape {params.tensors[name].shape}, "
                f"expected {arr.shape}")


def require_vocab(params: DenoiserParams, vocab: AtomVocab) -> None:
    """Raise when a checkpoint was trained with a different vocabulary."""
    if params.vocab.symbols != vocab.symbols:
        raise CheckpointIncompatible(
            f"checkpoint vocabulary {params.vocab.symbols} does not match "
            f"requested vocabulary {vocab.symbols}")
