"""Bit-exact checkpoint persistence.

Layout: magic "PDNRT50\\0"; u32 LE version (=1); u32 tensor count; per
tensor a u16 name length + UTF-8 name, u8 dtype code (1=f32, 2=f64),
u8 ndim, ndim x u64 dims, then raw little-endian element data; a u32
length-prefixed UTF-8 JSON metadata block (architecture descriptor, epoch,
best validation metrics, optimizer hyperparameters, rng state); and a
trailing CRC-32 of all preceding bytes. Loads verify the checksum before
parsing, so a truncated or corrupted file never yields a partial model.
"""

import json
import struct
import zlib
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    BadMagic,
    ChecksumMismatch,
    IoFailure,
    ShapeMismatchOnLoad,
    VersionMismatch,
)
from .models import build_from_descriptor

MAGIC = b"PDNRT50\0"
VERSION = 1
_DTYPE_CODE = {np.dtype(np.float32): 1, np.dtype(np.float64): 2}
_CODE_DTYPE = {1: np.dtype("<f4"), 2: np.dtype("<f8")}


@dataclass
class Checkpoint:
    version: int
    descriptor: dict
    tensors: dict  # name -> np.ndarray
    metadata: dict = field(default_factory=dict)


def checkpoint_from_model(model, epoch=0, best_val_loss=None, best_val_acc=None,
                          optimizer_hyperparams=None, rng_state=None):
    tensors = {name: t.data.copy() for name, t in model.named_tensors().items()}
    trainable = {
        g.name: g.trainable for g in model.parameter_groups()
    }
    meta = {
        "epoch": int(epoch),
        "best_val_loss": best_val_loss,
        "best_val_acc": best_val_acc,
        "optimizer": optimizer_hyperparams or {},
        "rng_state": rng_state or {},
        "trainable": trainable,
    }
    if model.descriptor is None:
        raise ValueError("model carries no architecture descriptor; cannot checkpoint")
    return Checkpoint(VERSION, dict(model.descriptor), tensors, meta)


def save_checkpoint(ckpt, path):
    parts = [MAGIC, struct.pack("<I", ckpt.version), struct.pack("<I", len(ckpt.tensors))]
    for name, arr in ckpt.tensors.items():
        nb = name.encode("utf-8")
        code = _DTYPE_CODE.get(arr.dtype)
        if code is None:
            raise ValueError(f"tensor {name!r} has unsupported dtype {arr.dtype}")
        parts.append(struct.pack("<H", len(nb)))
        parts.append(nb)
        parts.append(struct.pack("<BB", code, arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype=arr.dtype.newbyteorder("<")).tobytes())
    meta_blob = json.dumps(
        {"descriptor": ckpt.descriptor, **ckpt.metadata}, sort_keys=True
    ).encode("utf-8")
    parts.append(struct.pack("<I", len(meta_blob)))
    parts.append(meta_blob)
    body = b"".join(parts)
    crc = zlib.crc32(body) & 0xFFFFFFFF
    try:
        with open(path, "wb") as fh:
            fh.write(body)
            fh.write(struct.pack("<I", crc))
    except OSError as exc:
        raise IoFailure(f"cannot write checkpoint {path}: {exc}") from exc


def load_checkpoint(path):
    try:
        with open(path, "rb") as fh:
            blob = fh.read()
    except OSError as exc:
        raise IoFailure(f"cannot read checkpoint {path}: {exc}") from exc
    if len(blob) < len(MAGIC) + 12:
        raise ChecksumMismatch(f"{path}: file too short")
    if blob[: len(MAGIC)] != MAGIC:
        raise BadMagic(f"{path}: not a checkpoint file")
    (version,) = struct.unpack_from("<I", blob, len(MAGIC))
    if version != VERSION:
        raise VersionMismatch(f"{path}: version {version} != {VERSION}")
    body, tail = blob[:-4], blob[-4:]
    (crc_stored,) = struct.unpack("<I", tail)
    if zlib.crc32(body) & 0xFFFFFFFF != crc_stored:
        raise ChecksumMismatch(f"{path}: CRC mismatch")

    off = len(MAGIC) + 4
    (count,) = struct.unpack_from("<I", body, off)
    off += 4
    tensors = {}
    try:
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", body, off)
            off += 2
            name = body[off : off + nlen].decode("utf-8")
            off += nlen
            code, ndim = struct.unpack_from("<BB", body, off)
            off += 2
            dims = struct.unpack_from(f"<{ndim}Q", body, off)
            off += 8 * ndim
            dt = _CODE_DTYPE[code]
            nbytes = int(np.prod(dims)) * dt.itemsize if ndim else dt.itemsize
            arr = np.frombuffer(body[off : off + nbytes], dtype=dt).reshape(dims)
            off += nbytes
            tensors[name] = arr.astype(dt.newbyteorder("="))
        (mlen,) = struct.unpack_from("<I", body, off)
        off += 4
        meta = json.loads(body[off : off + mlen].decode("utf-8"))
    except (struct.error, KeyError, ValueError, IndexError) as exc:
        raise ChecksumMismatch(f"{path}: malformed body ({exc})") from exc
    descriptor = meta.pop("descriptor")
    return Checkpoint(version, descriptor, tensors, meta)


def load_into_model(ckpt, model):
    """Copy checkpoint tensors into an existing model, in place.

    Every checkpoint tensor must exist in the model with the same shape
    and dtype; otherwise ShapeMismatchOnLoad (and nothing is modified).
    """
    named = model.named_tensors()
    staged = []
    if set(named) != set(ckpt.tensors):
        missing = set(ckpt.tensors) ^ set(named)
        raise ShapeMismatchOnLoad(f"tensor name sets differ ({sorted(missing)[:4]}...)")
    for name, tensor in named.items():
        src = ckpt.tensors[name]
        if tuple(src.shape) != tuple(tensor.shape) or src.dtype != tensor.data.dtype:
            raise ShapeMismatchOnLoad(
                f"{name}: checkpoint {src.shape}/{src.dtype} vs model "
                f"{tensor.shape}/{tensor.data.dtype}"
            )
        staged.append((tensor, src))
    for tensor, src in staged:
        tensor.data[...] = src
    for g in model.parameter_groups():
        flag = ckpt.metadata.get("trainable", {}).get(g.name)
        if flag is not None:
            for t in g.tensors.values():
                t.requires_grad = bool(flag)
    return model


def model_from_checkpoint(ckpt):
    """Rebuild the architecture from the stored descriptor and load weights."""
    model = build_from_descriptor(ckpt.descriptor)
    return load_into_model(ckpt, model)
