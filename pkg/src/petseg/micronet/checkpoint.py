"""Binary checkpoint container.

Layout: 8-byte magic ``PSCKPT01``, little-endian uint64 header length, a UTF-8
JSON header, then raw little-endian arrays back to back. The header records
config, seed, epoch, optimizer hyperparameters and, for every array, its
name, dtype, shape and byte offset. Arrays are written in sorted name order,
so identical state gives identical bytes.
"""
from __future__ import annotations

import json
import struct

import numpy as np

from ..errors import ValidationError
from .network import NetConfig, UNet3D
from .optim import OptimizerState

MAGIC = b"PSCKPT01"
VERSION = 1


def save_checkpoint(path, net: UNet3D, opt: OptimizerState | None = None, seed: int = 0, epoch: int = 0) -> None:
    arrays = {f"param/{k}": v for k, v in net.params.items()}
    if opt is not None:
        arrays.update({f"velocity/{k}": v for k, v in opt.velocity.items()})
    entries, offset = [], 0
    for name in sorted(arrays):
        a = np.ascontiguousarray(arrays[name])
        entries.append({"name": name, "dtype": a.dtype.str.replace(">", "<"), "shape": list(a.shape), "offset": offset})
        offset += a.nbytes
    header = {
        "version": VERSION,
        "config": net.config.to_dict(),
        "seed": seed,
        "epoch": epoch,
        "optimizer": None if opt is None else opt.hyperparameters(),
        "arrays": entries,
    }
    blob = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        for e in entries:
            fh.write(np.ascontiguousarray(arrays[e["name"]]).astype(e["dtype"]).tobytes())


def load_checkpoint(path):
    """Return ``(net, opt, meta)``; ``opt`` is None when none was saved."""
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:8] != MAGIC:
        raise ValidationError(f"{path}: not a checkpoint file")
    (n,) = struct.unpack("<Q", data[8:16])
    header = json.loads(data[16 : 16 + n].decode())
    if header["version"] != VERSION:
        raise ValidationError(f"{path}: unsupported checkpoint version {header['version']}")
    base = 16 + n
    params, velocity = {}, {}
    for e in header["arrays"]:
        dt = np.dtype(e["dtype"])
        count = int(np.prod(e["shape"])) if e["shape"] else 1
        arr = np.frombuffer(data, dtype=dt, count=count, offset=base + e["offset"]).reshape(e["shape"]).copy()
        kind, name = e["name"].split("/", 1)
        (params if kind == "param" else velocity)[name] = arr
    net = UNet3D(NetConfig(**header["config"]), params)
    opt = None
    if header["optimizer"] is not None:
        opt = OptimizerState(**header["optimizer"], velocity=velocity)
    return net, opt, {"seed": header["seed"], "epoch": header["epoch"]}
