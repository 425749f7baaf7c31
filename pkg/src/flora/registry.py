"""Binary adapter files, a directory-backed catalog, and bundle manifests.

File layout (all little-endian)::

    offset  size  field
    0       4     magic b"FLRA"
    4       2     version (u16, currently 1)
    6       1     kind (0 lora, 1 flora, 2 ia3)
    7       4     d (u32, 0 for ia3)
    11      4     k (u32)
    15      4     r (u32, 0 for ia3)
    19      1     dtype (0 float32, 1 float64)
    20      1     reduction (0 sum, 1 mean; 0 unless flora)
    21      ...   payload: B [d, r] then A [r, k], or scale [k], row-major
"""

from __future__ import annotations

import os
import struct
import threading
from pathlib import Path
from typing import Dict, Iterable, Optional, Union

import numpy as np

from .adapters import FloraAdapter, Ia3Adapter, LoraAdapter
from .errors import (
    AdapterNotFoundError,
    DimensionError,
    FormatError,
    NonFinitePayloadError,
    StorageError,
    TruncatedFileError,
    UnsupportedVersionError,
)

MAGIC = b"FLRA"
VERSION = 1
HEADER = struct.Struct("<4sHBIIIBB")
HEADER_SIZE = HEADER.size
KIND_CODES = {"lora": 0, "flora": 1, "ia3": 2}
DTYPE_CODES = {np.dtype("<f4"): 0, np.dtype("<f8"): 1}
REDUCTION_CODES = {"sum": 0, "mean": 1}
SUFFIX = ".flra"
MANIFEST = "manifest.txt"

_KIND_NAMES = {v: k for k, v in KIND_CODES.items()}
_DTYPE_NAMES = {v: k for k, v in DTYPE_CODES.items()}
_REDUCTION_NAMES = {v: k for k, v in REDUCTION_CODES.items()}

AdapterRecord = Union[LoraAdapter, FloraAdapter, Ia3Adapter]


def storage_bytes(kind: str, d: int, k: int, r: int, dtype=np.float32) -> int:
    size = np.dtype(dtype).itemsize
    if kind == "ia3":
        return HEADER_SIZE + size * k
    if kind not in KIND_CODES:
        raise FormatError(f"unknown adapter kind {kind!r}")
    return HEADER_SIZE + size * r * (d + k)


def _header_fields(adapter: AdapterRecord):
    arrays = (adapter.scale,) if adapter.kind == "ia3" else (adapter.B, adapter.A)
    dtype = np.result_type(*arrays).newbyteorder("<")
    if dtype not in DTYPE_CODES:
        raise FormatError(f"dtype {dtype} is not storable")
    if adapter.kind == "ia3":
        return KIND_CODES["ia3"], 0, adapter.scale.shape[0], 0, DTYPE_CODES[dtype], 0
    d, r = adapter.B.shape
    reduction = REDUCTION_CODES[adapter.reduction] if adapter.kind == "flora" else 0
    return KIND_CODES[adapter.kind], d, adapter.A.shape[1], r, DTYPE_CODES[dtype], reduction


def encode(adapter: AdapterRecord) -> bytes:
    kind, d, k, r, dt, red = _header_fields(adapter)
    le = _DTYPE_NAMES[dt]
    parts = [HEADER.pack(MAGIC, VERSION, kind, d, k, r, dt, red)]
    arrays = (adapter.scale,) if adapter.kind == "ia3" else (adapter.B, adapter.A)
    parts += [np.ascontiguousarray(a, dtype=le).tobytes() for a in arrays]
    return b"".join(parts)


def store(adapter: AdapterRecord, path) -> int:
    """Write one adapter file; returns the number of bytes written.

    Writes to one path are single-writer: concurrent stores to the same path
    are the caller's problem. The file is written to a sibling temp file and
    renamed, so readers never see a half-written adapter.
    """
    data = encode(adapter)
    path = Path(path)
    tmp = path.with_name(path.name + f".tmp{os.getpid()}.{threading.get_ident()}")
    try:
        with open(tmp, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except OSError as exc:
        try:
            tmp.unlink()
        except OSError:
            pass
        raise StorageError(f"cannot write {path}: {exc}") from exc
    return len(data)


def decode(data: bytes, adapter_id: str = "adapter") -> AdapterRecord:
    if len(data) < HEADER_SIZE:
        raise TruncatedFileError(f"file has {len(data)} bytes, header needs {HEADER_SIZE}", offset=len(data), section="header")
    magic, version, kind, d, k, r, dt, red = HEADER.unpack_from(data)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}", offset=0, section="header")
    if version != VERSION:
        raise UnsupportedVersionError(f"unsupported version {version}", offset=4, section="header")
    if kind not in _KIND_NAMES:
        raise FormatError(f"unknown kind code {kind}", offset=6, section="header")
    if dt not in _DTYPE_NAMES:
        raise FormatError(f"unknown dtype code {dt}", offset=19, section="header")
    if red not in _REDUCTION_NAMES or (red and kind != KIND_CODES["flora"]):
        raise FormatError(f"invalid reduction code {red} for kind {_KIND_NAMES[kind]}", offset=20, section="header")
    name, dtype = _KIND_NAMES[kind], _DTYPE_NAMES[dt]
    if name == "ia3":
        if r != 0 or d != 0:
            raise FormatError(f"ia3 file must declare d=0 and r=0, got d={d} r={r}", offset=7, section="header")
        if k == 0:
            raise DimensionError("ia3 file declares k=0")
        sections = [("scale", (k,))]
    else:
        if d == 0 or k == 0 or r == 0:
            raise DimensionError(f"{name} file declares a zero dimension (d={d}, k={k}, r={r})")
        sections = [("B", (d, r)), ("A", (r, k))]
    size = dtype.itemsize
    want = HEADER_SIZE + sum(size * int(np.prod(shape)) for _, shape in sections)
    if len(data) > want:
        raise FormatError(f"{len(data) - want} trailing bytes after payload", offset=want, section="payload")
    arrays, offset = {}, HEADER_SIZE
    for section, shape in sections:
        n = size * int(np.prod(shape))
        if offset + n > len(data):
            raise TruncatedFileError(
                f"section {section} needs {n} bytes, {len(data) - offset} remain", offset=len(data), section=section
            )
        arr = np.frombuffer(data, dtype=dtype, count=int(np.prod(shape)), offset=offset).reshape(shape)
        bad = np.flatnonzero(~np.isfinite(arr))
        if bad.size:
            raise NonFinitePayloadError(
                f"non-finite value in {section} at element {int(bad[0])}",
                offset=offset + size * int(bad[0]), section=section,
            )
        arrays[section] = arr.astype(dtype.newbyteorder("="))
        offset += n
    if name == "ia3":
        return Ia3Adapter(arrays["scale"], adapter_id)
    if name == "lora":
        return LoraAdapter(arrays["B"], arrays["A"], adapter_id)
    return FloraAdapter(arrays["B"], arrays["A"], adapter_id, _REDUCTION_NAMES[red])


def read_header(path) -> dict:
    with open(path, "rb") as fh:
        data = fh.read(HEADER_SIZE)
    if len(data) < HEADER_SIZE:
        raise TruncatedFileError("file ends inside the header", offset=len(data), section="header")
    magic, version, kind, d, k, r, dt, red = HEADER.unpack(data)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}", offset=0, section="header")
    return {
        "version": version, "kind": _KIND_NAMES.get(kind, f"?{kind}"), "d": d, "k": k, "r": r,
        "dtype": _DTYPE_NAMES[dt].name if dt in _DTYPE_NAMES else f"?{dt}",
        "reduction": _REDUCTION_NAMES.get(red, f"?{red}"),
    }


def load(path, adapter_id: Optional[str] = None) -> AdapterRecord:
    """Read and validate one adapter file; the id defaults to the file stem."""
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as exc:
        raise StorageError(f"cannot read {path}: {exc}") from exc
    return decode(data, adapter_id or path.stem)


class AdapterCatalog:
    """Adapters stored as ``<id>.flra`` files under one directory.

    Registration writes through to disk and updates the in-memory index under
    a lock; lookups always re-read the file, so a record is never stale.
    """

    def __init__(self, root):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)
        self._lock = threading.Lock()
        self._ids = {p.stem for p in self.root.glob(f"*{SUFFIX}")}

    def path(self, adapter_id: str) -> Path:
        if not adapter_id or "/" in adapter_id or adapter_id.startswith("."):
            raise StorageError(f"invalid adapter id {adapter_id!r}")
        return self.root / f"{adapter_id}{SUFFIX}"

    def register(self, adapter: AdapterRecord, adapter_id: Optional[str] = None) -> str:
        adapter_id = adapter_id or adapter.id
        with self._lock:
            store(adapter, self.path(adapter_id))
            self._ids.add(adapter_id)
        return adapter_id

    def remove(self, adapter_id: str) -> None:
        with self._lock:
            if adapter_id not in self._ids:
                raise AdapterNotFoundError(adapter_id)
            self.path(adapter_id).unlink()
            self._ids.discard(adapter_id)

    def get(self, adapter_id: str) -> AdapterRecord:
        with self._lock:
            known = adapter_id in self._ids
        if not known:
            raise AdapterNotFoundError(adapter_id)
        try:
            return load(self.path(adapter_id), adapter_id)
        except StorageError as exc:
            raise AdapterNotFoundError(adapter_id) from exc

    def __contains__(self, adapter_id) -> bool:
        return adapter_id in self._ids

    def ids(self):
        with self._lock:
            return sorted(self._ids)


def store_bundle(records: Dict[str, AdapterRecord], directory) -> Path:
    """Write one file per placement plus a ``placement=file`` manifest."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    lines = []
    for placement, rec in records.items():
        fname = f"{placement}{SUFFIX}"
        store(rec, directory / fname)
        lines.append(f"{placement}={fname}\n")
    try:
        (directory / MANIFEST).write_text("".join(lines))
    except OSError as exc:
        raise StorageError(f"cannot write manifest in {directory}: {exc}") from exc
    return directory


def read_manifest(directory) -> Dict[str, str]:
    path = Path(directory) / MANIFEST
    try:
        text = path.read_text()
    except OSError as exc:
        raise StorageError(f"cannot read {path}: {exc}") from exc
    entries = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, value = line.partition("=")
        if not sep or not key.strip() or not value.strip():
            raise FormatError(f"{path}:{n}: expected placement=file, got {line!r}")
        entries[key.strip()] = value.strip()
    return entries


def load_bundle(directory, bundle_id: Optional[str] = None):
    from .model import AdapterBundle

    directory = Path(directory)
    bundle_id = bundle_id or directory.name
    records = {
        placement: load(directory / fname, f"{bundle_id}/{placement}")
        for placement, fname in read_manifest(directory).items()
    }
    return AdapterBundle(bundle_id, records)


def file_sizes(paths: Iterable) -> Dict[str, int]:
    return {str(p): os.path.getsize(p) for p in paths}
