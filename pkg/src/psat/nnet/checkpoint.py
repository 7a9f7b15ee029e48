"""Checkpoint container (.psc).

Little-endian binary: magic ``PSATCKP1``, u16 format version, u32 JSON
header length, the UTF-8 JSON header, then per-tensor records in header
order: u16 name length, name bytes, u8 rank, rank u32 dims, float32
payload in C order.

The header carries the network config, an optional plan hash and strategy
label, arbitrary metadata, and the tensor name list. Loading validates
magic, version, tensor completeness, and shape consistency against the
config.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..errors import CheckpointError
from .model import ParamStore, UNetConfig, expected_shapes

PSC_MAGIC = b"PSATCKP1"
PSC_VERSION = 1


@dataclass
class Checkpoint:
    config: UNetConfig
    params: ParamStore
    plan_hash: str = ""
    strategy: str = ""
    meta: dict = field(default_factory=dict)


def _config_to_dict(cfg: UNetConfig) -> dict:
    return {
        "patch_size": list(cfg.patch_size),
        "num_levels": cfg.num_levels,
        "base_channels": cfg.base_channels,
        "num_classes": cfg.num_classes,
        "in_channels": cfg.in_channels,
    }


def _config_from_dict(d: dict) -> UNetConfig:
    return UNetConfig(
        patch_size=tuple(d["patch_size"]),
        num_levels=d["num_levels"],
        base_channels=d["base_channels"],
        num_classes=d["num_classes"],
        in_channels=d.get("in_channels", 1),
    )


def save_checkpoint(path: str | Path, ckpt: Checkpoint) -> None:
    path = Path(path)
    header = {
        "config": _config_to_dict(ckpt.config),
        "plan_hash": ckpt.plan_hash,
        "strategy": ckpt.strategy,
        "meta": ckpt.meta,
        "tensors": list(ckpt.params.order),
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    parts = [PSC_MAGIC, struct.pack("<HI", PSC_VERSION, len(blob)), blob]
    for name in ckpt.params.order:
        tensor = np.ascontiguousarray(ckpt.params[name], dtype="<f4")
        encoded = name.encode("utf-8")
        parts.append(struct.pack("<H", len(encoded)))
        parts.append(encoded)
        parts.append(struct.pack("<B", tensor.ndim))
        parts.append(struct.pack(f"<{tensor.ndim}I", *tensor.shape))
        parts.append(tensor.tobytes())
    path.write_bytes(b"".join(parts))


def load_checkpoint(path: str | Path) -> Checkpoint:
    path = Path(path)
    raw = path.read_bytes()
    if len(raw) < len(PSC_MAGIC) + 6:
        raise CheckpointError(f"{path}: truncated")
    if raw[: len(PSC_MAGIC)] != PSC_MAGIC:
        raise CheckpointError(f"{path}: bad magic")
    off = len(PSC_MAGIC)
    version, header_len = struct.unpack_from("<HI", raw, off)
    off += 6
    if version != PSC_VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    try:
        header = json.loads(raw[off : off + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt header: {exc}") from exc
    off += header_len
    cfg = _config_from_dict(header["config"])
    want = expected_shapes(cfg)
    tensors: dict[str, np.ndarray] = {}
    order: list[str] = []
    for expected_name in header["tensors"]:
        if off + 2 > len(raw):
            raise CheckpointError(f"{path}: truncated before {expected_name!r}")
        (name_len,) = struct.unpack_from("<H", raw, off)
        off += 2
        name = raw[off : off + name_len].decode("utf-8")
        off += name_len
        if name != expected_name:
            raise CheckpointError(f"{path}: tensor order mismatch at {name!r}")
        (rank,) = struct.unpack_from("<B", raw, off)
        off += 1
        dims = struct.unpack_from(f"<{rank}I", raw, off)
        off += 4 * rank
        count = int(np.prod(dims)) if rank else 1
        end = off + 4 * count
        if end > len(raw):
            raise CheckpointError(f"{path}: truncated payload for {name!r}")
        arr = np.frombuffer(raw[off:end], dtype="<f4").reshape(dims)
        off = end
        if name not in want:
            raise CheckpointError(f"{path}: unexpected tensor {name!r} for config")
        if tuple(dims) != want[name]:
            raise CheckpointError(
                f"{path}: tensor {name!r} has shape {tuple(dims)}, config expects {want[name]}"
            )
        tensors[name] = arr.copy()
        order.append(name)
    missing = set(want) - set(tensors)
    if missing:
        raise CheckpointError(f"{path}: missing tensors {sorted(missing)}")
    return Checkpoint(
        config=cfg,
        params=ParamStore(tensors, order),
        plan_hash=header.get("plan_hash", ""),
        strategy=header.get("strategy", ""),
        meta=header.get("meta", {}),
    )
