"""The ``UADC`` checkpoint layout: a config block plus named ``UADT`` tensors.

Layout: ``UADC`` magic, ``u16`` version, ``u32`` config length, config as
UTF-8 JSON, ``u32`` tensor count, then per tensor ``u16`` name length, name
bytes and the tensor in ``UADT`` layout. Everything is little-endian.
"""

from __future__ import annotations

import io
import json
import os
import struct
from pathlib import Path
from typing import Union

import numpy as np

from .autodiff.serialization import TensorFormatError, read_tensor, write_tensor
from .denoiser import UNet, UNetConfig, param_shapes

MAGIC = b"UADC"
VERSION = 1


class CheckpointError(ValueError):
    pass


def _read(fh, n: int, what: str) -> bytes:
    buf = fh.read(n)
    if len(buf) != n:
        raise CheckpointError(f"checkpoint truncated while reading {what}")
    return buf


def dumps_checkpoint(config: dict, tensors: dict[str, np.ndarray]) -> bytes:
    fh = io.BytesIO()
    blob = json.dumps(config, sort_keys=True).encode()
    fh.write(MAGIC)
    fh.write(struct.pack("<HI", VERSION, len(blob)))
    fh.write(blob)
    fh.write(struct.pack("<I", len(tensors)))
    for name, arr in tensors.items():
        raw = name.encode()
        if len(raw) > 0xFFFF:
            raise CheckpointError(f"tensor name too long: {name[:40]}...")
        fh.write(struct.pack("<H", len(raw)))
        fh.write(raw)
        write_tensor(fh, arr)
    return fh.getvalue()


def loads_checkpoint(data: bytes) -> tuple[dict, dict[str, np.ndarray]]:
    fh = io.BytesIO(data)
    magic = _read(fh, 4, "magic")
    if magic != MAGIC:
        raise CheckpointError(f"not a checkpoint (magic {magic!r}, expected {MAGIC!r})")
    version, n_cfg = struct.unpack("<HI", _read(fh, 6, "header"))
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version} (this build reads {VERSION})")
    try:
        config = json.loads(_read(fh, n_cfg, "config block").decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"corrupt config block: {exc}") from exc
    (count,) = struct.unpack("<I", _read(fh, 4, "tensor count"))
    tensors = {}
    for i in range(count):
        (n_name,) = struct.unpack("<H", _read(fh, 2, f"name length of tensor {i}"))
        name = _read(fh, n_name, f"name of tensor {i}").decode()
        try:
            tensors[name] = read_tensor(fh)
        except TensorFormatError as exc:
            raise CheckpointError(f"tensor {name!r}: {exc}") from exc
    if fh.read(1):
        raise CheckpointError("trailing bytes after last tensor")
    return config, tensors


def _atomic_write(path: Union[str, Path], data: bytes) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(data)
    os.replace(tmp, path)


def save_checkpoint(path, config: dict, tensors: dict[str, np.ndarray]) -> None:
    _atomic_write(path, dumps_checkpoint(config, tensors))


def load_checkpoint(path) -> tuple[dict, dict[str, np.ndarray]]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint {path} not found; run `uad train` to produce it")
    return loads_checkpoint(path.read_bytes())


def save_unet(path, model: UNet, extra: dict | None = None) -> None:
    config = {"kind": "unet", "unet": model.config.to_dict(), **(extra or {})}
    save_checkpoint(path, config, model.arrays())


def load_unet(path, expected: UNetConfig | None = None) -> tuple[UNet, dict]:
    """Load a U-Net; ``expected`` guards against a config mismatch."""
    config, tensors = load_checkpoint(path)
    if config.get("kind") != "unet":
        raise CheckpointError(f"{path} does not hold a U-Net (kind={config.get('kind')!r})")
    unet_cfg = UNetConfig(**config["unet"])
    if expected is not None and expected != unet_cfg:
        raise CheckpointError(f"checkpoint config {unet_cfg} does not match expected {expected}")
    unknown = sorted(set(tensors) - set(param_shapes(unet_cfg)))
    if unknown:
        raise CheckpointError(f"unknown tensor names in checkpoint: {unknown[:5]}")
    return UNet(unet_cfg, params=tensors), config
