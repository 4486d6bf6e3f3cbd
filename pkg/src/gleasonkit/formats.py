"""Self-describing binary containers for model weights and patch bundles.

Layout (all integers little-endian)::

    magic      4 bytes   b"GKW1" (weights) or b"GKB1" (bundle)
    hlen       uint32    length of the JSON header in bytes
    header     hlen      UTF-8 JSON, keys sorted
    payload    ...       raw little-endian arrays, concatenated

The header lists every array with name, dtype, shape and byte offset into the
payload, and carries the SHA-256 of the payload.
"""
from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ValidationError

WEIGHTS_MAGIC = b"GKW1"
BUNDLE_MAGIC = b"GKB1"

_DTYPES = {"f4": np.dtype("<f4"), "u1": np.dtype("u1"), "i4": np.dtype("<i4")}


def write_container(path, magic, arrays, meta):
    """Write ``arrays`` (ordered name -> ndarray) with ``meta`` into one file."""
    entries = []
    chunks = []
    offset = 0
    for name, arr in arrays.items():
        code = {"float32": "f4", "uint8": "u1", "int32": "i4"}.get(np.asarray(arr).dtype.name)
        if code is None:
            raise ValidationError(f"tensor {name!r}: unsupported dtype {np.asarray(arr).dtype}")
        data = np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes()
        entries.append({"name": name, "dtype": code, "shape": list(np.shape(arr)),
                        "offset": offset, "nbytes": len(data)})
        chunks.append(data)
        offset += len(data)
    payload = b"".join(chunks)
    header = {"meta": meta, "tensors": entries, "sha256": hashlib.sha256(payload).hexdigest()}
    hbytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    with open(path, "wb") as fh:
        fh.write(magic)
        fh.write(struct.pack("<I", len(hbytes)))
        fh.write(hbytes)
        fh.write(payload)


def read_container(path, magic):
    """Inverse of :func:`write_container`; returns ``(arrays, meta)``."""
    raw = Path(path).read_bytes()
    if len(raw) < 8 or raw[:4] != magic:
        raise ValidationError(f"{path}: not a {magic.decode()} container")
    (hlen,) = struct.unpack("<I", raw[4:8])
    if len(raw) < 8 + hlen:
        raise ValidationError(f"{path}: truncated header")
    try:
        header = json.loads(raw[8:8 + hlen])
    except ValueError as exc:
        raise ValidationError(f"{path}: corrupt header ({exc})") from None
    payload = raw[8 + hlen:]
    expected = sum(e["nbytes"] for e in header["tensors"])
    if len(payload) != expected:
        raise ValidationError(f"{path}: payload is {len(payload)} bytes, header declares {expected}")
    if hashlib.sha256(payload).hexdigest() != header["sha256"]:
        raise ValidationError(f"{path}: checksum mismatch")
    arrays = {}
    for e in header["tensors"]:
        dt = _DTYPES[e["dtype"]]
        buf = payload[e["offset"]:e["offset"] + e["nbytes"]]
        count = int(np.prod(e["shape"], dtype=np.int64))
        if count * dt.itemsize != len(buf):
            raise ValidationError(f"{path}: tensor {e['name']!r} size does not match its shape")
        arrays[e["name"]] = np.frombuffer(buf, dtype=dt).reshape(e["shape"]).copy()
    return arrays, header["meta"]


@dataclass
class PatchBundle:
    """All patches of one core: either raw pixels or pre-extracted features."""

    core_id: str
    coords: np.ndarray
    pixels: np.ndarray | None = None
    features: np.ndarray | None = None

    def __post_init__(self):
        if (self.pixels is None) == (self.features is None):
            raise ValidationError(f"bundle {self.core_id}: exactly one of pixels/features required")
        self.coords = np.asarray(self.coords, dtype=np.int32).reshape(-1, 2)
        n = len(self.coords)
        if self.pixels is not None:
            self.pixels = np.asarray(self.pixels, dtype=np.uint8)
            if self.pixels.shape[0] != n or self.pixels.shape[1:] != (256, 256, 3):
                raise ValidationError(f"bundle {self.core_id}: pixels must be N x 256 x 256 x 3")
        else:
            self.features = np.asarray(self.features, dtype=np.float32)
            if self.features.ndim != 2 or self.features.shape[0] != n:
                raise ValidationError(f"bundle {self.core_id}: features must be N x dim")

    @property
    def n(self):
        return len(self.coords)

    @property
    def kind(self):
        return "pixels" if self.pixels is not None else "features"

    def data(self):
        return self.pixels if self.pixels is not None else self.features


def write_bundle(bundle: PatchBundle, path):
    meta = {"core_id": bundle.core_id, "N": bundle.n, "kind": bundle.kind}
    if bundle.features is not None:
        meta["dim"] = int(bundle.features.shape[1])
    write_container(path, BUNDLE_MAGIC, {"coords": bundle.coords, bundle.kind: bundle.data()}, meta)


def read_bundle(path) -> PatchBundle:
    arrays, meta = read_container(path, BUNDLE_MAGIC)
    coords = arrays.get("coords")
    if coords is None or len(coords) != meta["N"]:
        raise ValidationError(f"{path}: header N={meta.get('N')} does not match stored entries")
    kind = meta.get("kind")
    if kind not in ("pixels", "features") or kind not in arrays:
        raise ValidationError(f"{path}: unknown bundle kind {kind!r}")
    return PatchBundle(meta["core_id"], coords, **{kind: arrays[kind]})
