"""Binary checkpoint format.

Layout (all integers little-endian):

    magic b"GDT1"
    parameter manifest: u32 count, then per entry
        u16 name length + UTF-8 name, u8 ndim, ndim * u32 dims, u64 byte offset
    u64 payload length, raw little-endian float32 payload
    optimizer flag u8; when 1: u32 step count, f64 beta1/beta2/eps/weight_decay,
        u8 clip flag + f64 clip, then a parallel manifest + payload holding the
        first/second moments as "m.<name>" / "v.<name>"
    metadata: u32 pair count, per pair u32-length-prefixed UTF-8 key and value
"""
from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .optim import AdamState

MAGIC = b"GDT1"


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    params: dict[str, np.ndarray]
    optimizer: AdamState | None
    metadata: dict[str, str]


def _write_manifest_and_blob(out: list[bytes], arrays: dict[str, np.ndarray]) -> None:
    out.append(struct.pack("<I", len(arrays)))
    offset = 0
    blobs = []
    for name, arr in arrays.items():
        data = np.ascontiguousarray(arr, dtype="<f4")
        enc = name.encode("utf-8")
        out.append(struct.pack("<H", len(enc)))
        out.append(enc)
        out.append(struct.pack("<B", data.ndim))
        out.append(struct.pack(f"<{data.ndim}I", *data.shape) if data.ndim else b"")
        out.append(struct.pack("<Q", offset))
        blobs.append(data.tobytes())
        offset += data.nbytes
    out.append(struct.pack("<Q", offset))
    out.extend(blobs)


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0
        self.section = "header"

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise CheckpointError(f"truncated checkpoint while reading {self.section} "
                                  f"(byte {self.pos})")
        chunk = self.buf[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def _read_manifest_and_blob(r: _Reader) -> dict[str, np.ndarray]:
    (count,) = r.unpack("<I")
    entries = []
    for _ in range(count):
        (nlen,) = r.unpack("<H")
        name = r.take(nlen).decode("utf-8")
        (ndim,) = r.unpack("<B")
        dims = r.unpack(f"<{ndim}I") if ndim else ()
        (offset,) = r.unpack("<Q")
        entries.append((name, dims, offset))
    (blob_len,) = r.unpack("<Q")
    blob = r.take(blob_len)
    arrays = {}
    for name, dims, offset in entries:
        n = int(np.prod(dims)) if dims else 1
        end = offset + 4 * n
        if end > blob_len:
            raise CheckpointError(f"truncated checkpoint while reading {r.section} "
                                  f"payload for {name!r}")
        arrays[name] = np.frombuffer(blob, dtype="<f4", count=n, offset=offset).reshape(dims).copy()
    return arrays


def save_checkpoint(path: str, params: dict[str, np.ndarray],
                    optimizer: AdamState | None = None,
                    metadata: dict[str, str] | None = None) -> None:
    out: list[bytes] = [MAGIC]
    _write_manifest_and_blob(out, params)
    if optimizer is None:
        out.append(struct.pack("<B", 0))
    else:
        out.append(struct.pack("<B", 1))
        out.append(struct.pack("<I", optimizer.step_count))
        out.append(struct.pack("<dddd", optimizer.betas[0], optimizer.betas[1],
                               optimizer.eps, optimizer.weight_decay))
        if optimizer.clip_norm is None:
            out.append(struct.pack("<Bd", 0, 0.0))
        else:
            out.append(struct.pack("<Bd", 1, optimizer.clip_norm))
        moments = {f"m.{k}": v for k, v in optimizer.m.items()}
        moments.update({f"v.{k}": v for k, v in optimizer.v.items()})
        _write_manifest_and_blob(out, moments)
        decay = ",".join(sorted(optimizer.decay_names)).encode("utf-8")
        out.append(struct.pack("<I", len(decay)))
        out.append(decay)
    metadata = metadata or {}
    out.append(struct.pack("<I", len(metadata)))
    for k, v in metadata.items():
        ke, ve = k.encode("utf-8"), v.encode("utf-8")
        out.append(struct.pack("<I", len(ke)))
        out.append(ke)
        out.append(struct.pack("<I", len(ve)))
        out.append(ve)
    with open(path, "wb") as f:
        f.write(b"".join(out))


def load_checkpoint(path: str) -> Checkpoint:
    with open(path, "rb") as f:
        buf = f.read()
    r = _Reader(buf)
    if r.take(4) != MAGIC:
        raise CheckpointError(f"not a checkpoint: bad magic in {path}")
    r.section = "parameters"
    params = _read_manifest_and_blob(r)
    r.section = "optimizer"
    (has_opt,) = r.unpack("<B")
    optimizer = None
    if has_opt:
        (step_count,) = r.unpack("<I")
        b1, b2, eps, wd = r.unpack("<dddd")
        clip_flag, clip = r.unpack("<Bd")
        moments = _read_manifest_and_blob(r)
        (dlen,) = r.unpack("<I")
        decay = r.take(dlen).decode("utf-8")
        optimizer = AdamState(
            betas=(b1, b2), eps=eps, weight_decay=wd,
            clip_norm=clip if clip_flag else None,
            decay_names=frozenset(x for x in decay.split(",") if x),
            step_count=step_count,
            m={k[2:]: v for k, v in moments.items() if k.startswith("m.")},
            v={k[2:]: v for k, v in moments.items() if k.startswith("v.")},
        )
    r.section = "metadata"
    (n_pairs,) = r.unpack("<I")
    metadata = {}
    for _ in range(n_pairs):
        (klen,) = r.unpack("<I")
        key = r.take(klen).decode("utf-8")
        (vlen,) = r.unpack("<I")
        metadata[key] = r.take(vlen).decode("utf-8")
    return Checkpoint(params=params, optimizer=optimizer, metadata=metadata)
