"""Binary formats: named-tensor checkpoints, token sets and latent feature files.

All numbers are little-endian. Checkpoint layout::

    b"RIPTCKPT"  u32 version  u32 meta_len  meta (UTF-8 JSON)
    u32 count, then per tensor:
        u16 name_len  name (UTF-8)  u8 ndim  u32 dims[ndim]  f32 values
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .errors import FormatError

CKPT_MAGIC = b"RIPTCKPT"
CKPT_VERSION = 1
_F32 = np.dtype("<f4")


def save_checkpoint(path, tensors, meta=None):
    path = Path(path)
    meta_bytes = json.dumps(meta or {}, sort_keys=True).encode("utf-8")
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<II", CKPT_VERSION, len(meta_bytes)))
        fh.write(meta_bytes)
        fh.write(struct.pack("<I", len(tensors)))
        for name, arr in tensors.items():
            arr = np.asarray(arr)
            nb = name.encode("utf-8")
            fh.write(struct.pack("<H", len(nb)))
            fh.write(nb)
            fh.write(struct.pack("<B", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(np.ascontiguousarray(arr, dtype=_F32).tobytes())
    tmp.replace(path)


def load_checkpoint(path):
    """Returns ``(tensors, meta)``; tensors are float32 arrays keyed by name."""
    path = Path(path)
    with open(path, "rb") as fh:
        buf = fh.read()
    if buf[:8] != CKPT_MAGIC:
        raise FormatError("not a checkpoint archive (bad magic)", path)
    try:
        version, meta_len = struct.unpack_from("<II", buf, 8)
        if version != CKPT_VERSION:
            raise FormatError(f"unsupported checkpoint version {version}", path)
        pos = 16
        meta = json.loads(buf[pos : pos + meta_len].decode("utf-8"))
        pos += meta_len
        (count,) = struct.unpack_from("<I", buf, pos)
        pos += 4
        tensors = {}
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", buf, pos)
            pos += 2
            name = buf[pos : pos + nlen].decode("utf-8")
            pos += nlen
            (ndim,) = struct.unpack_from("<B", buf, pos)
            pos += 1
            shape = struct.unpack_from(f"<{ndim}I", buf, pos)
            pos += 4 * ndim
            size = int(np.prod(shape, dtype=np.int64))
            if pos + 4 * size > len(buf):
                raise FormatError(f"truncated tensor {name!r}", path)
            tensors[name] = np.frombuffer(buf, dtype=_F32, count=size, offset=pos).reshape(shape).copy()
            pos += 4 * size
    except (struct.error, UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"corrupt checkpoint ({exc})", path) from None
    return tensors, meta


def write_token_set(fh_or_path, token_points, token_feats):
    """One record: u32 T, u32 D, T*3 coords, T*D features (f32)."""
    tp = np.asarray(token_points, dtype=_F32)
    tf = np.asarray(token_feats, dtype=_F32)
    if tp.ndim != 2 or tp.shape[1] != 3 or tf.ndim != 2 or tf.shape[0] != tp.shape[0]:
        raise ValueError(f"bad token set shapes {tp.shape}, {tf.shape}")
    blob = struct.pack("<II", tf.shape[0], tf.shape[1]) + tp.tobytes() + tf.tobytes()
    if hasattr(fh_or_path, "write"):
        fh_or_path.write(blob)
    else:
        Path(fh_or_path).write_bytes(blob)


def read_token_sets(path):
    """All records of a token-set file as a list of ``(points, feats)``."""
    buf = Path(path).read_bytes()
    out, pos = [], 0
    while pos < len(buf):
        if pos + 8 > len(buf):
            raise FormatError("truncated token-set header", path)
        T, D = struct.unpack_from("<II", buf, pos)
        pos += 8
        need = 4 * (3 * T + T * D)
        if pos + need > len(buf):
            raise FormatError("truncated token-set record", path)
        pts = np.frombuffer(buf, dtype=_F32, count=3 * T, offset=pos).reshape(T, 3)
        pos += 12 * T
        feats = np.frombuffer(buf, dtype=_F32, count=T * D, offset=pos).reshape(T, D)
        pos += 4 * T * D
        out.append((pts.copy(), feats.copy()))
    return out


def labels_path(path):
    path = Path(path)
    return path.with_name(path.name + ".labels")


def write_features(path, features, labels=None):
    """``u32 count, u32 dim`` then ``count`` f32 rows; labels go to ``<path>.labels``."""
    f = np.asarray(features, dtype=_F32)
    if f.ndim != 2:
        raise ValueError(f"features must be 2-D, got {f.shape}")
    with open(path, "wb") as fh:
        fh.write(struct.pack("<II", *f.shape))
        fh.write(f.tobytes())
    if labels is not None:
        if len(labels) != len(f):
            raise ValueError(f"{len(labels)} labels for {len(f)} feature rows")
        labels_path(path).write_text("".join(f"{lab}\n" for lab in labels), encoding="utf-8")


def read_features(path):
    """Returns ``(features, labels)``; labels is None without a sidecar file."""
    path = Path(path)
    buf = path.read_bytes()
    if len(buf) < 8:
        raise FormatError("truncated feature header", path)
    count, dim = struct.unpack_from("<II", buf, 0)
    if len(buf) != 8 + 4 * count * dim:
        raise FormatError(f"expected {count}x{dim} rows, file size disagrees", path)
    feats = np.frombuffer(buf, dtype=_F32, offset=8).reshape(count, dim).copy()
    lp = labels_path(path)
    labels = None
    if lp.exists():
        labels = [s for s in lp.read_text(encoding="utf-8").split("\n") if s]
        if len(labels) != count:
            raise FormatError(f"{len(labels)} labels for {count} rows", lp)
    return feats, labels
