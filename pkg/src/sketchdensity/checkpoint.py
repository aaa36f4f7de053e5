"""Checkpoint container shared by every training phase.

Layout (all integers little-endian)::

    8 bytes   magic b"SKDCKPT1"
    4 bytes   uint32 header length N
    N bytes   UTF-8 JSON header (sorted keys)
    ...       concatenated blob payloads

The header holds ``format_version``, ``kind``, free-form ``meta`` (architecture
config, key-density grid, training step, ...) and a ``blobs`` list of
``{name, dtype, shape, offset, nbytes}`` records; offsets count from the first
byte after the header. Payloads are C-ordered little-endian arrays. Nothing
time-dependent is written, so identical state gives identical bytes.
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np
import torch

from .errors import ConfigurationError

MAGIC = b"SKDCKPT1"
FORMAT_VERSION = 1

_DTYPES = {
    torch.float32: "<f4",
    torch.float64: "<f8",
    torch.int64: "<i8",
    torch.int32: "<i4",
    torch.uint8: "|u1",
    torch.bool: "|b1",
}
_TORCH = {v: k for k, v in _DTYPES.items()}


def encode(kind, meta, tensors):
    """Serialise named tensors plus JSON metadata to bytes."""
    blobs, payload, offset = [], [], 0
    for name in sorted(tensors):
        t = tensors[name].detach().cpu().contiguous()
        if t.dtype not in _DTYPES:
            raise ConfigurationError(f"unsupported dtype {t.dtype} for {name}")
        arr = t.numpy().astype(_DTYPES[t.dtype], copy=False)
        raw = arr.tobytes(order="C")
        blobs.append({"name": name, "dtype": _DTYPES[t.dtype], "shape": list(arr.shape),
                      "offset": offset, "nbytes": len(raw)})
        payload.append(raw)
        offset += len(raw)
    header = json.dumps({"format_version": FORMAT_VERSION, "kind": kind, "meta": meta,
                         "blobs": blobs}, sort_keys=True, separators=(",", ":")).encode()
    return MAGIC + struct.pack("<I", len(header)) + header + b"".join(payload)


def decode(data):
    """Inverse of :func:`encode`; returns (kind, meta, tensors)."""
    if data[:8] != MAGIC:
        raise ConfigurationError("not a checkpoint file (bad magic)")
    (n,) = struct.unpack("<I", data[8:12])
    header = json.loads(data[12:12 + n].decode())
    if header.get("format_version") != FORMAT_VERSION:
        raise ConfigurationError(
            f"checkpoint format {header.get('format_version')} unsupported "
            f"(expected {FORMAT_VERSION})")
    base = 12 + n
    tensors = {}
    for b in header["blobs"]:
        raw = data[base + b["offset"]: base + b["offset"] + b["nbytes"]]
        arr = np.frombuffer(raw, dtype=np.dtype(b["dtype"])).reshape(b["shape"])
        tensors[b["name"]] = torch.from_numpy(arr.copy()).to(_TORCH[b["dtype"]])
    return header["kind"], header["meta"], tensors


def save(path, kind, meta, tensors):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    data = encode(kind, meta, tensors)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(data)
    tmp.replace(path)
    return hashlib.sha256(data).hexdigest()


def load(path):
    path = Path(path)
    if not path.is_file():
        raise ConfigurationError(f"checkpoint not found: {path}")
    return decode(path.read_bytes())


def file_digest(path):
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def module_digest(module):
    """SHA-256 over a module's parameters and buffers, in name order."""
    h = hashlib.sha256()
    for name, t in sorted(module.state_dict().items()):
        h.update(name.encode())
        h.update(t.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


def flatten_modules(prefix_to_module):
    out = {}
    for prefix, module in prefix_to_module.items():
        for name, t in module.state_dict().items():
            out[f"{prefix}.{name}"] = t
    return out


def load_modules(tensors, prefix_to_module):
    for prefix, module in prefix_to_module.items():
        sub = {k[len(prefix) + 1:]: v for k, v in tensors.items() if k.startswith(prefix + ".")}
        missing = set(module.state_dict()) - set(sub)
        if missing:
            raise ConfigurationError(f"checkpoint lacks weights for {prefix}: {sorted(missing)[:3]}")
        module.load_state_dict(sub)


def flatten_optimizer(prefix, optimizer):
    """Split an optimizer state into blobs plus a JSON-able remainder."""
    sd = optimizer.state_dict()
    tensors, scalars = {}, {}
    for idx, st in sd["state"].items():
        for key, val in st.items():
            if torch.is_tensor(val):
                tensors[f"{prefix}.{idx}.{key}"] = val
            else:
                scalars[f"{idx}.{key}"] = val
    return tensors, {"param_groups": sd["param_groups"], "scalars": scalars}


def restore_optimizer(prefix, optimizer, tensors, info):
    state = {}
    for name, val in tensors.items():
        if name.startswith(prefix + "."):
            idx, key = name[len(prefix) + 1:].split(".", 1)
            state.setdefault(int(idx), {})[key] = val
    for name, val in info["scalars"].items():
        idx, key = name.split(".", 1)
        state.setdefault(int(idx), {})[key] = val
    optimizer.load_state_dict({"state": state, "param_groups": info["param_groups"]})
