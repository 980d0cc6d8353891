"""Checkpoint serialization.

File layout: 8-byte magic ``MAM2M1\\0\\0``, u32 version, u64 JSON-header
length, the UTF-8 JSON header, then raw little-endian 32-bit payloads. The
header carries the config snapshot plus one entry (path, dtype, shape, byte
offset) per stored array, sorted by path. Optimizer state lives under
``optim/``, batch-norm buffers under ``buffers/``, and the iteration counter
under ``state/iteration``. Save -> load -> save is byte-identical.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .errors import CheckpointError, ShapeError
from .guidance import EncoderParams, encoder_init
from .m2m import M2MConfig, M2MParams, m2m_init

MAGIC = b"MAM2M1\0\0"
VERSION = 1
_DTYPES = {"f32": np.dtype("<f4"), "i32": np.dtype("<i4")}


@dataclass
class Checkpoint:
    encoder: EncoderParams
    m2m: M2MParams
    adam: ad.AdamState
    iteration: int
    config: dict


def _collect_arrays(ckpt: Checkpoint) -> dict:
    """Flatten a checkpoint into path -> (dtype tag, array)."""
    out = {}
    for path, t in ckpt.encoder.params.items():
        out[path] = ("f32", t.data)
    for path, t in ckpt.m2m.params.items():
        out[path] = ("f32", t.data)
    for base, st in list(ckpt.encoder.buffers.items()) + list(ckpt.m2m.buffers.items()):
        out[f"buffers/{base}/mean"] = ("f32", st.mean)
        out[f"buffers/{base}/var"] = ("f32", st.var)
    for path, arr in ckpt.adam.m.items():
        out[f"optim/m/{path}"] = ("f32", arr)
    for path, arr in ckpt.adam.v.items():
        out[f"optim/v/{path}"] = ("f32", arr)
    out["optim/t"] = ("i32", np.array([ckpt.adam.t], np.int32))
    out["state/iteration"] = ("i32", np.array([ckpt.iteration], np.int32))
    return out


def save_checkpoint(path, ckpt: Checkpoint):
    arrays = _collect_arrays(ckpt)
    entries = []
    offset = 0
    payloads = []
    for apath in sorted(arrays):
        tag, arr = arrays[apath]
        data = np.ascontiguousarray(arr, dtype=_DTYPES[tag]).tobytes()
        entries.append({"path": apath, "dtype": tag,
                        "shape": list(np.asarray(arr).shape), "offset": offset})
        payloads.append(data)
        offset += len(data)
    header = json.dumps({"config": ckpt.config, "entries": entries},
                        sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", VERSION))
        f.write(struct.pack("<Q", len(header)))
        f.write(header)
        for chunk in payloads:
            f.write(chunk)


def _read_header(raw: bytes, path) -> tuple:
    if len(raw) < 20 or raw[:8] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    (version,) = struct.unpack("<I", raw[8:12])
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    (hlen,) = struct.unpack("<Q", raw[12:20])
    if len(raw) < 20 + hlen:
        raise CheckpointError(f"{path}: truncated header")
    try:
        header = json.loads(raw[20:20 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt header ({exc})") from exc
    return header, raw[20 + hlen:]


def load_checkpoint(path) -> Checkpoint:
    """Rebuild models from the stored config and fill every array,
    verifying each shape against the freshly initialized structure."""
    raw = Path(path).read_bytes()
    header, payload = _read_header(raw, path)
    config = header["config"]

    views = {}
    for e in header["entries"]:
        dt = _DTYPES[e["dtype"]]
        count = int(np.prod(e["shape"])) if e["shape"] else 1
        start, end = e["offset"], e["offset"] + count * dt.itemsize
        if end > len(payload):
            raise CheckpointError(f"{path}: truncated payload at {e['path']}")
        views[e["path"]] = np.frombuffer(payload[start:end], dtype=dt) \
            .reshape(e["shape"]).copy()

    m2m_cfg = M2MConfig.from_dict(config["m2m"])
    built = m2m_init(m2m_cfg)
    enc = encoder_init(channels=config["encoder_channels"],
                       seed=config.get("encoder_seed", 0))
    enc.frozen = bool(config.get("freeze_encoder", False))

    def fill(params: ad.ParamSet):
        for ppath, t in params.items():
            if ppath not in views:
                raise CheckpointError(f"{path}: missing parameter {ppath}")
            arr = views[ppath]
            if tuple(arr.shape) != tuple(t.shape):
                raise ShapeError(
                    f"{path}: parameter {ppath} has shape {tuple(arr.shape)}, "
                    f"expected {tuple(t.shape)}")
            t.data = arr.astype(np.float32)

    fill(built.params)
    fill(enc.params)
    for base, st in list(built.buffers.items()) + list(enc.buffers.items()):
        st.mean = views[f"buffers/{base}/mean"].astype(np.float32)
        st.var = views[f"buffers/{base}/var"].astype(np.float32)

    adam = ad.AdamState(t=int(views["optim/t"][0]))
    for vpath, arr in views.items():
        if vpath.startswith("optim/m/"):
            adam.m[vpath[len("optim/m/"):]] = arr.astype(np.float32)
        elif vpath.startswith("optim/v/"):
            adam.v[vpath[len("optim/v/"):]] = arr.astype(np.float32)

    iteration = int(views["state/iteration"][0])
    return Checkpoint(encoder=enc, m2m=built, adam=adam,
                      iteration=iteration, config=config)


def describe_checkpoint(path) -> dict:
    """Header summary for inspection without loading arrays."""
    raw = Path(path).read_bytes()
    header, payload = _read_header(raw, path)
    total = sum(int(np.prod(e["shape"])) if e["shape"] else 1
                for e in header["entries"])
    return {"config": header["config"],
            "entries": header["entries"],
            "total_values": total,
            "payload_bytes": len(payload)}
