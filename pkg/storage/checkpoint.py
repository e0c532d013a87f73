"""
storage/checkpoint.py — The FLATDIFF1 binary checkpoint format.

Layout (all integers little-endian):

    b"FLATDIFF1"                 9-byte magic
    uint16                       format version (1)
    uint32                       header length in bytes
    header                       UTF-8 JSON: architecture, schedule, step, config hash,
                                 seed, config, segment table, block table, extras
    blocks                       back-to-back little-endian arrays, in block-table order

Blocks: `params` (f4, always), `swa` / `ema` (f8 averager accumulators),
`adam.exp_avg` / `adam.exp_avg_sq` (f4).  Loading a saved checkpoint returns
bitwise-identical arrays on any platform.
"""
from __future__ import annotations

import json
import logging
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional

import numpy as np
import torch

from core.errors import CheckpointFormatError
from core.numerics import ParamVector
from core.optim import AveragerState

logger = logging.getLogger(__name__)

MAGIC = b"FLATDIFF1"
FORMAT_VERSION = 1
_PREFIX = struct.Struct("<HI")

_DTYPES = {"<f4": (np.dtype("<f4"), torch.float32), "<f8": (np.dtype("<f8"), torch.float64)}


@dataclass
class Checkpoint:
    architecture: dict
    schedule: dict
    step: int
    config_hash: str
    seed: int
    params: ParamVector
    config: Optional[dict] = None
    averagers: Optional[AveragerState] = None
    adam: Optional[dict] = None                 # {"step", "exp_avg", "exp_avg_sq"}
    extras: dict[str, Any] = field(default_factory=dict)


def _encode(values: torch.Tensor, code: str) -> bytes:
    np_dtype, torch_dtype = _DTYPES[code]
    return values.detach().to(torch_dtype).contiguous().numpy().astype(np_dtype, copy=False).tobytes()


def _decode(raw: bytes, code: str) -> torch.Tensor:
    np_dtype, _ = _DTYPES[code]
    return torch.from_numpy(np.frombuffer(raw, dtype=np_dtype).astype(np_dtype.newbyteorder("="), copy=True))


def encode_checkpoint(ckpt: Checkpoint) -> bytes:
    blocks: list[tuple[str, str, torch.Tensor]] = [("params", "<f4", ckpt.params.values)]
    header: dict[str, Any] = {
        "architecture": ckpt.architecture,
        "schedule": ckpt.schedule,
        "step": ckpt.step,
        "config_hash": ckpt.config_hash,
        "seed": ckpt.seed,
        "config": ckpt.config,
        "segments": ckpt.params.table(),
        "extras": ckpt.extras,
    }
    if ckpt.averagers is not None:
        blocks += [("swa", "<f8", ckpt.averagers.swa.values), ("ema", "<f8", ckpt.averagers.ema.values)]
        header["n_models"] = ckpt.averagers.n_models
    if ckpt.adam is not None:
        blocks += [("adam.exp_avg", "<f4", ckpt.adam["exp_avg"]), ("adam.exp_avg_sq", "<f4", ckpt.adam["exp_avg_sq"])]
        header["adam_step"] = int(ckpt.adam["step"])

    payloads = [_encode(values, code) for _, code, values in blocks]
    header["blocks"] = [
        {"name": name, "dtype": code, "count": int(values.numel()), "nbytes": len(raw)}
        for (name, code, values), raw in zip(blocks, payloads)
    ]
    header_bytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return MAGIC + _PREFIX.pack(FORMAT_VERSION, len(header_bytes)) + header_bytes + b"".join(payloads)


def decode_checkpoint(data: bytes, source: str = "<bytes>") -> Checkpoint:
    if not data.startswith(MAGIC):
        raise CheckpointFormatError(f"{source}: bad magic, not a FLATDIFF1 checkpoint.")
    offset = len(MAGIC)
    if len(data) < offset + _PREFIX.size:
        raise CheckpointFormatError(f"{source}: truncated prefix.")
    version, header_len = _PREFIX.unpack_from(data, offset)
    if version != FORMAT_VERSION:
        raise CheckpointFormatError(f"{source}: unsupported format version {version}.")
    offset += _PREFIX.size
    try:
        header = json.loads(data[offset:offset + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointFormatError(f"{source}: unreadable header ({exc}).") from exc
    offset += header_len

    arrays: dict[str, torch.Tensor] = {}
    for block in header["blocks"]:
        end = offset + block["nbytes"]
        if end > len(data):
            raise CheckpointFormatError(f"{source}: block '{block['name']}' is truncated.")
        arrays[block["name"]] = _decode(data[offset:end], block["dtype"])
        if arrays[block["name"]].numel() != block["count"]:
            raise CheckpointFormatError(f"{source}: block '{block['name']}' has the wrong length.")
        offset = end
    if offset != len(data):
        raise CheckpointFormatError(f"{source}: {len(data) - offset} trailing bytes after the last block.")

    try:
        params = ParamVector.from_table(header["segments"], arrays["params"])
    except KeyError as exc:
        raise CheckpointFormatError(f"{source}: missing {exc}.") from exc

    averagers = None
    if "swa" in arrays and "ema" in arrays:
        averagers = AveragerState(swa=params.like(arrays["swa"]), n_models=int(header.get("n_models", 0)),
                                  ema=params.like(arrays["ema"]))
    adam = None
    if "adam.exp_avg" in arrays:
        adam = {"step": int(header["adam_step"]), "exp_avg": arrays["adam.exp_avg"],
                "exp_avg_sq": arrays["adam.exp_avg_sq"]}

    return Checkpoint(
        architecture=header["architecture"],
        schedule=header["schedule"],
        step=int(header["step"]),
        config_hash=header["config_hash"],
        seed=int(header["seed"]),
        params=params,
        config=header.get("config"),
        averagers=averagers,
        adam=adam,
        extras=header.get("extras") or {},
    )


def save_checkpoint(path: Path, ckpt: Checkpoint) -> Path:
    """Write atomically: a crash mid-write never leaves a partial checkpoint behind."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(encode_checkpoint(ckpt))
    os.replace(tmp, path)
    logger.debug("Checkpoint written: %s (step %d)", path, ckpt.step)
    return path


def load_checkpoint(path: Path) -> Checkpoint:
    path = Path(path)
    if not path.exists():
        raise CheckpointFormatError(f"Checkpoint not found: {path}")
    return decode_checkpoint(path.read_bytes(), source=str(path))
