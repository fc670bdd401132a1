"""Binary checkpoint container.

Layout::

    b"MHFC" | u32 version | u64 header_len | header JSON (UTF-8) | blobs

All integers and tensor blobs are little-endian. The header holds the model
and training configs, epoch, loss, free-form extras and a ``tensors``
directory ``name -> {dtype, shape, offset, length}`` in blob order; offsets
are relative to the first blob byte and contiguous.
"""

import json
import struct
from collections import OrderedDict

import numpy as np

MAGIC = b"MHFC"
VERSION = 1
_DTYPES = {"float32": "<f4", "float64": "<f8"}


class CheckpointError(ValueError):
    pass


def _dumps(obj):
    return json.dumps(obj, separators=(",", ":"), allow_nan=False).encode("utf-8")


def encode(tensors, model_config, train_config=None, epoch=0, loss=None, extra=None):
    """Serialize ``tensors`` (ordered name -> ndarray) and metadata to bytes."""
    directory = OrderedDict()
    blobs = []
    offset = 0
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        key = arr.dtype.name
        if key not in _DTYPES:
            raise CheckpointError(f"{name}: unsupported dtype {key}")
        raw = np.ascontiguousarray(arr, dtype=_DTYPES[key]).tobytes()
        directory[name] = {"dtype": key, "shape": list(arr.shape), "offset": offset, "length": len(raw)}
        blobs.append(raw)
        offset += len(raw)
    header = OrderedDict(
        model_config=model_config,
        train_config=train_config,
        epoch=int(epoch),
        loss=None if loss is None else float(loss),
        extra=extra or {},
        tensors=directory,
    )
    hb = _dumps(header)
    return MAGIC + struct.pack("<IQ", VERSION, len(hb)) + hb + b"".join(blobs)


def decode(buf):
    """Inverse of :func:`encode`; returns ``(header, tensors)``."""
    if len(buf) < 16 or buf[:4] != MAGIC:
        raise CheckpointError("not an MHFC checkpoint")
    version, hlen = struct.unpack("<IQ", buf[4:16])
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    start = 16 + hlen
    if start > len(buf):
        raise CheckpointError("truncated header")
    try:
        header = json.loads(buf[16:start].decode("utf-8"), object_pairs_hook=OrderedDict)
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"corrupt header ({e})") from None
    tensors = OrderedDict()
    expect = 0
    for name, ent in header["tensors"].items():
        if ent["offset"] != expect:
            raise CheckpointError(f"{name}: non-contiguous offset")
        dt = np.dtype(_DTYPES[ent["dtype"]])
        n = int(np.prod(ent["shape"], dtype=np.int64))
        if ent["length"] != n * dt.itemsize:
            raise CheckpointError(f"{name}: length does not match shape")
        lo = start + ent["offset"]
        if lo + ent["length"] > len(buf):
            raise CheckpointError(f"{name}: blob past end of file")
        arr = np.frombuffer(buf, dtype=dt, count=n, offset=lo).reshape(ent["shape"])
        tensors[name] = arr.astype(np.dtype(ent["dtype"]))
        expect += ent["length"]
    if start + expect != len(buf):
        raise CheckpointError("file size does not match tensor directory")
    return header, tensors


def save(path, tensors, model_config, train_config=None, epoch=0, loss=None, extra=None):
    data = encode(tensors, model_config, train_config, epoch, loss, extra)
    with open(path, "wb") as fh:
        fh.write(data)


def load(path):
    with open(path, "rb") as fh:
        return decode(fh.read())


def save_training_state(path, params, cfg, tc, optimizer=None, epoch=0, loss=None, history=None):
    """Model parameters plus optional Amsgrad state in one checkpoint."""
    tensors = OrderedDict(params.arrays())
    extra = {}
    if optimizer is not None:
        tensors.update(optimizer.state_arrays())
        extra["optimizer"] = optimizer.meta()
    if history is not None:
        extra["epoch_losses"] = [float(v) for v in history]
    save(path, tensors, cfg.to_dict(), None if tc is None else tc.to_dict(), epoch, loss, extra)


def load_training_state(path):
    """Returns ``(cfg, tc, params, optimizer_arrays, header)``."""
    from .config import ModelConfig, TrainConfig
    from .model import ModelParams

    header, tensors = load(path)
    cfg = ModelConfig.from_dict(header["model_config"])
    tc = TrainConfig.from_dict(header["train_config"]) if header.get("train_config") else None
    params = ModelParams.from_arrays(OrderedDict((k, v) for k, v in tensors.items() if not k.startswith("optim.")))
    optim = {k: v for k, v in tensors.items() if k.startswith("optim.")}
    return cfg, tc, params, optim, header
