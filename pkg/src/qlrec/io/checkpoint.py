"""Binary checkpoint container.

Layout (all integers little-endian)::

    b"QLR1" | u32 version | u64 metadata_len | metadata (UTF-8 JSON) | payload

The metadata lists every tensor with its dtype, shape and byte range inside
the payload, the model/quantization/adapter configuration and the SHA-256 of
the payload. Blobs are packed back to back without padding, so the payload
size is the sum of the tensor sizes.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
import tempfile
from pathlib import Path
from typing import Dict, List, Optional, Tuple, Union

import numpy as np

from ..bitpack import PackedMatrix, QuantParams
from ..lora import LoraAdapter
from ..autodiff import Tensor
from ..model import TransformerConfig, TransformerModel

MAGIC = b"QLR1"
VERSION = 1
_HEADER = struct.Struct("<4sIQ")
_DTYPES = {"f32": np.dtype("<f4"), "f64": np.dtype("<f8"), "u32": np.dtype("<u4")}


class CheckpointError(ValueError):
    pass


def _dtype_tag(arr: np.ndarray) -> str:
    for tag, dt in _DTYPES.items():
        if arr.dtype == dt.newbyteorder("=") or arr.dtype == dt:
            return tag
    raise CheckpointError(f"cannot store dtype {arr.dtype}")


def _collect(model: TransformerModel) -> Tuple[Dict[str, np.ndarray], dict]:
    tensors: Dict[str, np.ndarray] = {}
    grads: Dict[str, bool] = {}
    for name, t in model.named_base_tensors().items():
        tensors[name] = t.data
        grads[name] = bool(t.requires_grad)
    quant, adapters = {}, []
    for bi, block in enumerate(model.blocks):
        for name, slot in block.slots().items():
            key = f"blocks.{bi}.{name}"
            if slot.packed is not None:
                pm, qp = slot.packed, slot.qparams
                tensors[key + ".packed"] = pm.words
                tensors[key + ".scales"] = qp.scales
                tensors[key + ".zeros"] = qp.zeros
                if pm.perm is not None:
                    tensors[key + ".perm"] = pm.perm.astype(np.uint32)
                quant[key] = {"bits": pm.bits, "group_size": qp.group_size,
                              "shape": list(pm.shape), "act_order": pm.perm is not None}
            for ai, a in enumerate(slot.adapters):
                akey = f"{key}.adapters.{ai}"
                tensors[akey + ".A"] = a.A.data
                tensors[akey + ".B"] = a.B.data
                adapters.append({"path": akey, "r": a.r, "alpha": a.alpha,
                                 "dropout_p": a.dropout_p, "frozen": a.frozen})
    meta = {"model": model.config.to_dict(), "quant": quant, "adapters": adapters,
            "requires_grad": grads, "model_frozen": model.frozen}
    return tensors, meta


def serialize(model: TransformerModel, extra: Optional[dict] = None) -> bytes:
    tensors, meta = _collect(model)
    index = {}
    blobs: List[bytes] = []
    offset = 0
    for name, arr in tensors.items():
        tag = _dtype_tag(arr)
        blob = np.ascontiguousarray(arr, dtype=_DTYPES[tag]).tobytes()
        index[name] = {"dtype": tag, "shape": list(arr.shape), "byte_offset": offset, "byte_len": len(blob)}
        blobs.append(blob)
        offset += len(blob)
    payload = b"".join(blobs)
    meta["tensors"] = index
    meta["payload_len"] = len(payload)
    meta["content_hash"] = hashlib.sha256(payload).hexdigest()
    meta["extra"] = extra or {}
    header = json.dumps(meta, sort_keys=True).encode("utf-8")
    return _HEADER.pack(MAGIC, VERSION, len(header)) + header + payload


def save(model: TransformerModel, path: Union[str, Path], extra: Optional[dict] = None) -> int:
    """Write ``model`` atomically; returns the payload size in bytes."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    data = serialize(model, extra)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return read_manifest(path)["payload_len"]


def _split(data: bytes) -> Tuple[dict, memoryview]:
    if len(data) < _HEADER.size:
        raise CheckpointError("file is too short to be a checkpoint")
    magic, version, mlen = _HEADER.unpack_from(data)
    if magic != MAGIC:
        raise CheckpointError(f"bad magic {magic!r}")
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    start = _HEADER.size + mlen
    if start > len(data):
        raise CheckpointError("metadata runs past the end of the file")
    meta = json.loads(bytes(data[_HEADER.size:start]).decode("utf-8"))
    return meta, memoryview(data)[start:]


def read_manifest(path: Union[str, Path]) -> dict:
    with open(path, "rb") as fh:
        head = fh.read(_HEADER.size)
        magic, version, mlen = _HEADER.unpack(head)
        if magic != MAGIC:
            raise CheckpointError(f"bad magic {magic!r}")
        return json.loads(fh.read(mlen).decode("utf-8"))


def _arrays(meta: dict, payload: memoryview) -> Dict[str, np.ndarray]:
    if len(payload) != meta["payload_len"]:
        raise CheckpointError(f"payload is {len(payload)} bytes, manifest says {meta['payload_len']}")
    if hashlib.sha256(payload).hexdigest() != meta["content_hash"]:
        raise CheckpointError("payload hash mismatch; the file is corrupt")
    spans = sorted((e["byte_offset"], e["byte_offset"] + e["byte_len"], n) for n, e in meta["tensors"].items())
    prev = 0
    for lo, hi, name in spans:
        if lo < prev or hi > len(payload):
            raise CheckpointError(f"tensor {name} overlaps another or lies out of bounds")
        prev = hi
    out = {}
    for name, e in meta["tensors"].items():
        dt = _DTYPES[e["dtype"]]
        arr = np.frombuffer(payload, dtype=dt, count=e["byte_len"] // dt.itemsize, offset=e["byte_offset"])
        out[name] = arr.reshape(e["shape"]).astype(dt.newbyteorder("="), copy=True)
    return out


def deserialize(data: bytes) -> Tuple[TransformerModel, dict]:
    meta, payload = _split(data)
    arrays = _arrays(meta, payload)
    cfg = TransformerConfig(**meta["model"])
    fp_dtype = arrays["tok_emb"].dtype
    model = TransformerModel(cfg, dtype=fp_dtype)
    for bi, block in enumerate(model.blocks):
        for name, slot in block.slots().items():
            key = f"blocks.{bi}.{name}"
            q = meta["quant"].get(key)
            if q is not None:
                perm = arrays.get(key + ".perm")
                pm = PackedMatrix(q["shape"][0], q["shape"][1], q["bits"], arrays[key + ".packed"],
                                  None if perm is None else perm.astype(np.int64))
                slot.set_quantized(pm, QuantParams(q["group_size"], arrays[key + ".scales"], arrays[key + ".zeros"]))
    for name, t in model.named_base_tensors().items():
        if name not in arrays:
            raise CheckpointError(f"checkpoint lacks tensor {name}")
        t.data = arrays[name]
        t.requires_grad = meta["requires_grad"].get(name, True)
    for a in meta["adapters"]:
        _, bi, name, _, ai = a["path"].split(".")
        slot = model.blocks[int(bi)].slots()[name]
        if int(ai) != len(slot.adapters):
            raise CheckpointError(f"adapter {a['path']} is out of order")
        slot.adapters.append(LoraAdapter(Tensor(arrays[a["path"] + ".A"]), Tensor(arrays[a["path"] + ".B"]),
                                         a["alpha"], a["dropout_p"], a["frozen"]))
    model.frozen = meta.get("model_frozen", False)
    return model, meta


def load(path: Union[str, Path]) -> Tuple[TransformerModel, dict]:
    """Read a checkpoint, verifying its hash; returns ``(model, manifest)``."""
    return deserialize(Path(path).read_bytes())
