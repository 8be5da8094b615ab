"""Serialization helpers: tensor containers, checkpoints, manifests, previews.

Single arrays travel as .npy (magic bytes + format version + dtype/shape
header + row-major payload — exactly the portable container we need, so we
do not reinvent it).  Checkpoints hold many named arrays plus a config echo
in one versioned binary file; the layout below is fixed and byte-stable so
identical state always serializes to identical bytes (numpy's zip-based
archives historically did not guarantee that).
"""

import json
import os
import struct

import numpy as np

# ----------------------------------------------------------------------------
# single-array containers

def save_array(path, arr):
    path = os.fspath(path)
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    with open(path, "wb") as f:
        np.save(f, np.ascontiguousarray(arr))


def load_array(path):
    with open(path, "rb") as f:
        return np.load(f)


# ----------------------------------------------------------------------------
# multi-array checkpoint container
#
#   bytes 0..7   magic  b"ODIFFCK1"
#   bytes 8..15  u64 little-endian header length H
#   bytes 16..16+H  UTF-8 JSON: {"version": 1, "config": {...},
#                    "arrays": [{"name", "dtype", "shape", "offset", "nbytes"}]}
#   then raw row-major array payloads at the stated offsets (relative to the
#   end of the header), in index order, no padding.

_MAGIC = b"ODIFFCK1"


def save_checkpoint(path, arrays, config):
    """Write named float/int arrays plus a JSON-serializable config echo.

    `arrays` is a dict name -> ndarray.  Keys are sorted so the byte layout
    is independent of insertion order.
    """
    path = os.fspath(path)
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    names = sorted(arrays.keys())
    index = []
    offset = 0
    blobs = []
    for name in names:
        a = np.asarray(arrays[name])  # not ascontiguousarray: that flattens 0-d
        raw = a.tobytes(order="C")
        index.append({
            "name": name,
            "dtype": a.dtype.str,  # endian-explicit, e.g. "<f4"
            "shape": list(a.shape),
            "offset": offset,
            "nbytes": len(raw),
        })
        blobs.append(raw)
        offset += len(raw)
    header = json.dumps(
        {"version": 1, "config": config, "arrays": index},
        sort_keys=True, separators=(",", ":"),
    ).encode("utf-8")
    with open(path, "wb") as f:
        f.write(_MAGIC)
        f.write(struct.pack("<Q", len(header)))
        f.write(header)
        for raw in blobs:
            f.write(raw)


def load_checkpoint(path):
    """Return (arrays dict, config dict)."""
    with open(path, "rb") as f:
        magic = f.read(8)
        if magic != _MAGIC:
            raise ValueError(f"{path}: not a checkpoint container (bad magic)")
        (hlen,) = struct.unpack("<Q", f.read(8))
        header = json.loads(f.read(hlen).decode("utf-8"))
        if header.get("version") != 1:
            raise ValueError(f"{path}: unsupported container version")
        payload = f.read()
    arrays = {}
    for ent in header["arrays"]:
        raw = payload[ent["offset"]:ent["offset"] + ent["nbytes"]]
        arrays[ent["name"]] = np.frombuffer(raw, dtype=np.dtype(ent["dtype"])).reshape(ent["shape"]).copy()
    return arrays, header["config"]


# ----------------------------------------------------------------------------
# structured-text manifests (canonical JSON: sorted keys, fixed separators,
# so equal content means equal bytes)

def dump_json(path, obj):
    path = os.fspath(path)
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        json.dump(obj, f, sort_keys=True, separators=(",", ":"))
        f.write("\n")


def load_json(path):
    with open(path, "r", encoding="utf-8") as f:
        return json.load(f)


def canonical_json(obj):
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


# ----------------------------------------------------------------------------
# 8-bit preview images (display only; binary containers stay authoritative)

def save_preview_png(path, img_chw):
    """img_chw: (3,H,W) float in [0,1] -> 8-bit PNG."""
    from PIL import Image

    path = os.fspath(path)
    a = np.asarray(img_chw, dtype=np.float64)
    if a.ndim != 3 or a.shape[0] != 3:
        raise ValueError(f"preview expects (3,H,W), got {a.shape}")
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    u8 = np.round(np.clip(a, 0.0, 1.0) * 255.0).astype(np.uint8).transpose(1, 2, 0)
    Image.fromarray(u8, mode="RGB").save(path, format="PNG")
