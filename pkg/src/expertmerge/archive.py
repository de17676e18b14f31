"""Named-tensor archives: a ``manifest.json`` plus a raw little-endian ``blob.bin``.

An archive is a directory holding the two files. Records are laid out
back to back in insertion order, every offset 4-byte aligned. Values are
stored as f32 by default; everything is handed back as f64.
"""

from __future__ import annotations

import hashlib
import json
import math
import os
import re
from collections.abc import Iterable, Mapping
from pathlib import Path

import numpy as np

from .errors import ArchiveError, ModuleMismatch

MANIFEST = "manifest.json"
BLOB = "blob.bin"

DTYPES = {"f32": np.dtype("<f4"), "f64": np.dtype("<f8")}

KIND_ORDER = ("attn.q", "attn.k", "attn.v", "attn.o", "mlp.fc1", "mlp.fc2", "other")
_MODULE_RE = re.compile(r"^layer\.(\d+)\.(.+)$")


def module_sort_key(name: str) -> tuple:
    """Order modules by (layer index, kind) so that neighbours are adjacent.

    Names outside the ``layer.<i>.<kind>`` convention sort after all
    conforming names, lexicographically.
    """
    m = _MODULE_RE.match(name)
    if m is None:
        return (1, 0, 0, name)
    layer, kind = int(m.group(1)), m.group(2)
    rank = KIND_ORDER.index(kind) if kind in KIND_ORDER else len(KIND_ORDER)
    return (0, layer, rank, kind)


def module_layer(name: str) -> int | None:
    m = _MODULE_RE.match(name)
    return int(m.group(1)) if m else None


def module_kind(name: str) -> str:
    m = _MODULE_RE.match(name)
    return m.group(2) if m else "other"


def ordered_modules(names: Iterable[str]) -> list[str]:
    return sorted(names, key=module_sort_key)


def _pairs(tensors) -> list[tuple[str, np.ndarray]]:
    items = tensors.items() if isinstance(tensors, Mapping) else tensors
    out = []
    seen = set()
    for name, value in items:
        if not isinstance(name, str) or not name:
            raise ArchiveError("tensor name must be a non-empty string", repr(name))
        if name in seen:
            raise ArchiveError("duplicate tensor name", name)
        seen.add(name)
        out.append((name, np.asarray(value)))
    return out


def encode_archive(tensors, dtype: str = "f32") -> tuple[bytes, bytes]:
    """Serialize tensors to ``(manifest bytes, blob bytes)`` without touching disk."""
    if dtype not in DTYPES:
        raise ArchiveError(f"unsupported dtype {dtype!r}")
    np_dtype = DTYPES[dtype]
    records = []
    chunks = []
    offset = 0
    for name, arr in _pairs(tensors):
        shape = [int(s) for s in arr.shape]
        if not shape or any(s <= 0 for s in shape):
            raise ArchiveError(f"shape must be non-empty and positive, got {shape}", name)
        raw = np.ascontiguousarray(arr, dtype=np_dtype).tobytes(order="C")
        records.append(
            {"name": name, "shape": shape, "dtype": dtype, "offset": offset, "byte_len": len(raw)}
        )
        chunks.append(raw)
        offset += len(raw)
    manifest = json.dumps(records, indent=1).encode("utf-8") + b"\n"
    return manifest, b"".join(chunks)


def archive_digest(tensors, dtype: str = "f32") -> str:
    """Content hash of the archive that ``write_archive`` would produce."""
    manifest, blob = encode_archive(tensors, dtype)
    return _digest(manifest, blob)


def _digest(manifest: bytes, blob: bytes) -> str:
    h = hashlib.sha256()
    h.update(len(manifest).to_bytes(8, "little"))
    h.update(manifest)
    h.update(blob)
    return h.hexdigest()


def _atomic_write(path: Path, data: bytes) -> None:
    tmp = path.with_name(path.name + f".tmp{os.getpid()}")
    with open(tmp, "wb") as fh:
        fh.write(data)
    os.replace(tmp, path)


def write_archive(tensors, path, dtype: str = "f32") -> str:
    """Write ``tensors`` (mapping or ``(name, array)`` pairs) as an archive directory.

    Returns the archive's content hash.
    """
    manifest, blob = encode_archive(tensors, dtype)
    return write_encoded(manifest, blob, path)


def write_encoded(manifest: bytes, blob: bytes, path) -> str:
    path = Path(path)
    try:
        path.mkdir(parents=True, exist_ok=True)
        _atomic_write(path / BLOB, blob)
        _atomic_write(path / MANIFEST, manifest)
    except OSError as exc:
        raise ArchiveError(f"cannot write archive at {path}: {exc}") from exc
    return _digest(manifest, blob)


def _validate_records(records, blob_len: int) -> list[dict]:
    if not isinstance(records, list):
        raise ArchiveError("manifest must be a JSON array of records")
    names = set()
    checked = []
    for i, rec in enumerate(records):
        if not isinstance(rec, dict):
            raise ArchiveError(f"record {i} is not an object")
        name = rec.get("name")
        if not isinstance(name, str) or not name:
            raise ArchiveError(f"record {i} has no valid name")
        if name in names:
            raise ArchiveError("duplicate tensor name", name)
        names.add(name)
        missing = {"shape", "dtype", "offset", "byte_len"} - rec.keys()
        if missing:
            raise ArchiveError(f"missing fields {sorted(missing)}", name)
        shape, dtype, offset, byte_len = rec["shape"], rec["dtype"], rec["offset"], rec["byte_len"]
        if dtype not in DTYPES:
            raise ArchiveError(f"unsupported dtype {dtype!r}", name)
        if (
            not isinstance(shape, list)
            or not shape
            or not all(isinstance(s, int) and not isinstance(s, bool) and s > 0 for s in shape)
        ):
            raise ArchiveError(f"invalid shape {shape!r}", name)
        for key, val in (("offset", offset), ("byte_len", byte_len)):
            if not isinstance(val, int) or isinstance(val, bool) or val < 0:
                raise ArchiveError(f"invalid {key} {val!r}", name)
        if offset % 4:
            raise ArchiveError(f"offset {offset} is not 4-byte aligned", name)
        expected = DTYPES[dtype].itemsize * math.prod(shape)
        if byte_len != expected:
            raise ArchiveError(f"byte_len {byte_len} does not match shape (expected {expected})", name)
        if offset + byte_len > blob_len:
            raise ArchiveError(
                f"truncated blob: record ends at byte {offset + byte_len}, blob has {blob_len}", name
            )
        checked.append(rec)

    by_offset = sorted(checked, key=lambda r: (r["offset"], r["name"]))
    for prev, cur in zip(by_offset, by_offset[1:]):
        if cur["offset"] < prev["offset"] + prev["byte_len"]:
            raise ArchiveError(f"byte range overlaps record {prev['name']!r}", cur["name"])
    end = max((r["offset"] + r["byte_len"] for r in checked), default=0)
    if end != blob_len:
        raise ArchiveError(f"blob has {blob_len - end} trailing bytes beyond the last record")
    return checked


def decode_archive(manifest: bytes, blob: bytes, promote: bool = True) -> dict[str, np.ndarray]:
    try:
        records = json.loads(manifest.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ArchiveError(f"malformed manifest: {exc}") from exc
    out = {}
    for rec in _validate_records(records, len(blob)):
        dt = DTYPES[rec["dtype"]]
        count = rec["byte_len"] // dt.itemsize
        arr = np.frombuffer(blob, dtype=dt, count=count, offset=rec["offset"]).reshape(rec["shape"])
        out[rec["name"]] = arr.astype(np.float64) if promote else arr.copy()
    return out


def read_archive(path, promote: bool = True) -> dict[str, np.ndarray]:
    """Load every tensor of an archive directory.

    With ``promote`` (the default) values come back as f64; otherwise in
    their stored dtype, byte for byte.
    """
    path = Path(path)
    try:
        manifest = (path / MANIFEST).read_bytes()
        blob = (path / BLOB).read_bytes()
    except OSError as exc:
        raise ArchiveError(f"cannot read archive at {path}: {exc}") from exc
    return decode_archive(manifest, blob, promote=promote)


def read_archive_dtypes(path) -> set[str]:
    """Storage dtypes used by an archive's records."""
    try:
        records = json.loads((Path(path) / MANIFEST).read_text("utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise ArchiveError(f"cannot read manifest at {path}: {exc}") from exc
    return {r.get("dtype") for r in records if isinstance(r, dict)}


def read_archive_digest(path) -> str:
    path = Path(path)
    try:
        return _digest((path / MANIFEST).read_bytes(), (path / BLOB).read_bytes())
    except OSError as exc:
        raise ArchiveError(f"cannot read archive at {path}: {exc}") from exc


def diff_modules(backbone: Mapping[str, np.ndarray], task: Mapping[str, np.ndarray]) -> dict[str, np.ndarray]:
    """Per-module weight update ``task - backbone`` in f64, in module order."""
    missing = sorted(set(backbone) - set(task), key=module_sort_key)
    extra = sorted(set(task) - set(backbone), key=module_sort_key)
    if missing:
        raise ModuleMismatch("module missing from task checkpoint", missing[0])
    if extra:
        raise ModuleMismatch("module not present in backbone", extra[0])
    deltas = {}
    for name in ordered_modules(backbone):
        w0 = np.asarray(backbone[name], dtype=np.float64)
        wt = np.asarray(task[name], dtype=np.float64)
        if w0.shape != wt.shape:
            raise ModuleMismatch(f"shape {wt.shape} differs from backbone shape {w0.shape}", name)
        deltas[name] = wt - w0
    return deltas
