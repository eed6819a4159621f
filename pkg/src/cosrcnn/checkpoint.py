"""Binary checkpoint container.

Layout: ASCII ``CRCN``, one version byte, then records of
``name_len:u32 | name:utf-8 | ndim:u32 | dims:u32*ndim | data:f64*prod(dims)``,
all little-endian and row-major. Non-tensor state (config JSON, RNG state)
is stored as 1-D tensors of byte values.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np

from .config import RunConfig, from_dict
from .detector import CosRCNN
from .sumoco import SuMoCoQueue

MAGIC = b"CRCN"
VERSION = 1

_U32 = struct.Struct("<I")


class CheckpointError(ValueError):
    pass


# ---------------------------------------------------------------------------
# raw records
# ---------------------------------------------------------------------------

def encode_records(records: Mapping[str, np.ndarray]) -> bytes:
    out = [MAGIC, bytes([VERSION])]
    for name, arr in records.items():
        a = np.array(arr, dtype="<f8", order="C")  # keeps 0-d shapes
        raw = name.encode("utf-8")
        out.append(_U32.pack(len(raw)))
        out.append(raw)
        out.append(_U32.pack(a.ndim))
        out.extend(_U32.pack(d) for d in a.shape)
        out.append(a.tobytes(order="C"))
    return b"".join(out)


def decode_records(blob: bytes) -> dict[str, np.ndarray]:
    """Parse a whole container; any structural problem raises ``CheckpointError``."""
    if len(blob) < 5:
        raise CheckpointError("truncated checkpoint: missing header")
    if blob[:4] != MAGIC:
        raise CheckpointError(f"bad magic {blob[:4]!r}, expected {MAGIC!r}")
    if blob[4] != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {blob[4]} (this build reads version {VERSION})")
    pos = 5
    records: dict[str, np.ndarray] = {}

    def take(n: int, what: str) -> bytes:
        nonlocal pos
        if pos + n > len(blob):
            raise CheckpointError(f"truncated checkpoint while reading {what} at byte {pos}")
        chunk = blob[pos:pos + n]
        pos += n
        return chunk

    while pos < len(blob):
        (name_len,) = _U32.unpack(take(4, "name length"))
        try:
            name = take(name_len, "name").decode("utf-8")
        except UnicodeDecodeError as exc:
            raise CheckpointError(f"record name at byte {pos - name_len} is not UTF-8") from exc
        (ndim,) = _U32.unpack(take(4, f"ndim of '{name}'"))
        dims = tuple(_U32.unpack(take(4, f"dims of '{name}'"))[0] for _ in range(ndim))
        count = int(np.prod(dims, dtype=np.int64)) if ndim else 1
        data = np.frombuffer(take(8 * count, f"data of '{name}'"), dtype="<f8").astype(np.float64)
        if name in records:
            raise CheckpointError(f"duplicate record '{name}'")
        records[name] = data.reshape(dims)
    return records


def _bytes_tensor(s: str) -> np.ndarray:
    return np.frombuffer(s.encode("utf-8"), dtype=np.uint8).astype(np.float64)


def _tensor_str(a: np.ndarray) -> str:
    return bytes(np.asarray(a, dtype=np.uint8).tolist()).decode("utf-8")


# ---------------------------------------------------------------------------
# model-level state
# ---------------------------------------------------------------------------

@dataclass
class Checkpoint:
    config: RunConfig
    model: CosRCNN
    iteration: int = 0
    velocity: dict[str, np.ndarray] = field(default_factory=dict)
    key_params: dict[str, np.ndarray] = field(default_factory=dict)
    queue: SuMoCoQueue | None = None
    rng_state: dict | None = None


def to_records(ck: Checkpoint) -> dict[str, np.ndarray]:
    rec: dict[str, np.ndarray] = {
        "meta/config": _bytes_tensor(ck.config.dumps()),
        "meta/iteration": np.array(float(ck.iteration)),
    }
    if ck.rng_state is not None:
        rec["meta/rng"] = _bytes_tensor(json.dumps(ck.rng_state, sort_keys=True))
    for name, t in ck.model.named_parameters().items():
        rec[f"param/{name}"] = t.data
    for name, v in sorted(ck.velocity.items()):
        rec[f"optim/{name}"] = v
    for name, v in sorted(ck.key_params.items()):
        rec[f"sumoco/key/{name}"] = v
    if ck.queue is not None:
        rec["sumoco/capacity"] = np.array(float(ck.queue.capacity))
        for i, e in enumerate(ck.queue.entries):
            rec[f"sumoco/feat/{i}"] = e.feature
            rec[f"sumoco/label/{i}"] = np.array(float(e.class_id))
            rec[f"sumoco/iter/{i}"] = np.array(float(e.iteration))
    return rec


def from_records(rec: dict[str, np.ndarray]) -> Checkpoint:
    try:
        config = from_dict(json.loads(_tensor_str(rec["meta/config"])))
        iteration = int(rec["meta/iteration"])
    except KeyError as exc:
        raise CheckpointError(f"checkpoint lacks required record {exc.args[0]}") from None
    c = config.comparator
    model = CosRCNN.init(config.seed, c.mode, c.objective, config.rpn_variant)
    params = model.named_parameters()
    seen = {"meta/config", "meta/iteration"}

    for name, t in params.items():
        key = f"param/{name}"
        if key not in rec:
            raise CheckpointError(f"checkpoint lacks parameter '{name}'")
        if rec[key].shape != t.shape:
            raise CheckpointError(f"shape mismatch for '{name}': checkpoint {rec[key].shape}, "
                                  f"config expects {t.shape}")
        t.data = rec[key].copy()
        seen.add(key)

    velocity, key_params = {}, {}
    for rname, arr in rec.items():
        if rname.startswith("optim/") and rname[6:] in params:
            velocity[rname[6:]] = arr.copy()
            seen.add(rname)
        elif rname.startswith("sumoco/key/") and rname[11:] in params:
            key_params[rname[11:]] = arr.copy()
            seen.add(rname)

    rng_state = None
    if "meta/rng" in rec:
        rng_state = json.loads(_tensor_str(rec["meta/rng"]))
        seen.add("meta/rng")

    queue = None
    if "sumoco/capacity" in rec:
        seen.add("sumoco/capacity")
        queue = SuMoCoQueue(int(rec["sumoco/capacity"]), model.embedder.dim)
        i = 0
        while f"sumoco/feat/{i}" in rec:
            names = (f"sumoco/feat/{i}", f"sumoco/label/{i}", f"sumoco/iter/{i}")
            if not all(n in rec for n in names):
                raise CheckpointError(f"incomplete queue entry {i}")
            queue.enqueue(rec[names[0]][None], [int(rec[names[1]])], int(rec[names[2]]))
            seen.update(names)
            i += 1

    unexpected = sorted(set(rec) - seen)
    if unexpected:
        raise CheckpointError(f"unexpected entries in checkpoint: {unexpected}")
    return Checkpoint(config, model, iteration, velocity, key_params, queue, rng_state)


def save(path, ck: Checkpoint) -> None:
    """Write atomically: a crash never leaves a half-written file at ``path``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(encode_records(to_records(ck)))
    tmp.replace(path)


def load(path) -> Checkpoint:
    return from_records(decode_records(Path(path).read_bytes()))


def model_checksum(model: CosRCNN) -> str:
    h = hashlib.sha256()
    for name, t in sorted(model.named_parameters().items()):
        h.update(name.encode())
        h.update(np.ascontiguousarray(t.data, dtype="<f8").tobytes())
    return h.hexdigest()


__all__ = ["MAGIC", "VERSION", "CheckpointError", "Checkpoint", "encode_records", "decode_records",
           "to_records", "from_records", "save", "load", "model_checksum"]
