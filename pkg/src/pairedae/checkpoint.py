"""PAE1 checkpoint container.

Layout::

    b"PAE1" | u64 LE header length | UTF-8 JSON header | payload

The header is compact JSON with sorted keys holding ``kind``, ``spec``
(architecture), ``config`` (run config echo) and ``manifest``: a list of
``{"name", "shape", "offset"}`` entries whose byte offsets into the payload
ascend without gaps. The payload is the arrays as little-endian float64 in
manifest order.
"""
from __future__ import annotations

import json
import struct

import numpy as np

from .paired import PairedModel
from .variational import VariationalLatentMap, VpaeModel

MAGIC = b"PAE1"
KINDS = ("paired", "vpae", "latent-map")


class CheckpointError(ValueError):
    pass


def encode_checkpoint(kind, spec, arrays: dict, config=None) -> bytes:
    manifest, chunks, off = [], [], 0
    for name, arr in arrays.items():
        a = np.ascontiguousarray(arr, dtype="<f8")
        manifest.append({"name": name, "shape": list(a.shape), "offset": off})
        chunks.append(a.tobytes())
        off += a.nbytes
    header = {"kind": kind, "spec": spec, "config": config if config is not None else {}, "manifest": manifest}
    hb = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return MAGIC + struct.pack("<Q", len(hb)) + hb + b"".join(chunks)


def decode_checkpoint(data: bytes):
    """Returns (kind, spec, arrays, config)."""
    if len(data) < 12 or data[:4] != MAGIC:
        raise CheckpointError("not a PAE1 checkpoint")
    (hlen,) = struct.unpack("<Q", data[4:12])
    if 12 + hlen > len(data):
        raise CheckpointError("header length exceeds file size")
    try:
        header = json.loads(data[12 : 12 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"corrupt header: {exc}") from None
    if not isinstance(header, dict) or not {"kind", "spec", "manifest"} <= set(header):
        raise CheckpointError("header lacks kind, spec or manifest")
    payload = data[12 + hlen :]
    arrays, expect = {}, 0
    for ent in header["manifest"]:
        if not isinstance(ent, dict) or not {"name", "shape", "offset"} <= set(ent):
            raise CheckpointError("malformed manifest entry")
        shape = tuple(ent["shape"])
        nbytes = 8 * int(np.prod(shape, dtype=np.int64))
        if ent["offset"] != expect:
            raise CheckpointError(f"tensor {ent['name']!r} has offset {ent['offset']}, expected {expect}")
        if expect + nbytes > len(payload):
            raise CheckpointError(f"tensor {ent['name']!r} runs past the payload")
        arrays[ent["name"]] = np.frombuffer(payload, dtype="<f8", count=nbytes // 8, offset=expect).reshape(shape).astype(np.float64)
        expect += nbytes
    if expect != len(payload):
        raise CheckpointError(f"payload has {len(payload) - expect} unclaimed bytes")
    return header["kind"], header["spec"], arrays, header.get("config", {})


def model_to_bytes(model, config=None) -> bytes:
    """Serialize a PairedModel, VpaeModel or (PairedModel, VariationalLatentMap) pair."""
    if isinstance(model, PairedModel):
        return encode_checkpoint("paired", model.spec(), model.to_arrays(), config)
    if isinstance(model, VpaeModel):
        return encode_checkpoint("vpae", model.spec(), model.to_arrays(), config)
    if isinstance(model, tuple) and len(model) == 2 and isinstance(model[1], VariationalLatentMap):
        pm, vm = model
        spec = {"paired": pm.spec(), "map": vm.spec()}
        return encode_checkpoint("latent-map", spec, {**pm.to_arrays(), **vm.to_arrays()}, config)
    raise TypeError(f"cannot serialize {type(model).__name__}")


def model_from_bytes(data: bytes):
    """Returns (kind, model, config)."""
    kind, spec, arrays, config = decode_checkpoint(data)
    try:
        if kind == "paired":
            return kind, PairedModel.from_arrays(spec, arrays), config
        if kind == "vpae":
            return kind, VpaeModel.from_arrays(spec, arrays), config
        if kind == "latent-map":
            pm = PairedModel.from_arrays(spec["paired"], arrays)
            return kind, (pm, VariationalLatentMap.from_arrays(spec["map"], arrays)), config
    except KeyError as exc:
        raise CheckpointError(f"checkpoint misses tensor or field {exc}") from None
    raise CheckpointError(f"unknown checkpoint kind {kind!r}")


def save_model(path, model, config=None):
    data = model_to_bytes(model, config)
    with open(path, "wb") as fh:
        fh.write(data)
    return data


def load_model(path):
    with open(path, "rb") as fh:
        return model_from_bytes(fh.read())
