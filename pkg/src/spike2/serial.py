"""Versioned binary container for named float64 tensors.

Layout (all integers little-endian):
    magic 8 bytes | version u32 | tensor count u32
    per tensor: name length u32 | name utf-8 | rank u32 | dims u64 * rank
                | values f64 * prod(dims), row-major

Round trips are bit-exact. Checkpoints pair one container with a key=value
manifest whose crc32 entry guards the container bytes.
"""

from __future__ import annotations

import struct
import zlib
from pathlib import Path

import numpy as np

MAGIC = b"SPK2TNSR"
VERSION = 1


class ContainerError(ValueError):
    """Malformed or truncated tensor container."""


def pack_tensors(tensors: dict[str, np.ndarray]) -> bytes:
    out = [MAGIC, struct.pack("<II", VERSION, len(tensors))]
    for name, arr in tensors.items():
        a = np.ascontiguousarray(arr, dtype=np.float64)
        nb = name.encode("utf-8")
        out.append(struct.pack("<I", len(nb)))
        out.append(nb)
        out.append(struct.pack("<I", a.ndim))
        out.append(struct.pack(f"<{a.ndim}Q", *a.shape))
        out.append(a.astype("<f8", copy=False).tobytes())
    return b"".join(out)


def unpack_tensors(blob: bytes) -> dict[str, np.ndarray]:
    view = memoryview(blob)
    pos = 0

    def take(n: int) -> memoryview:
        nonlocal pos
        if pos + n > len(view):
            raise ContainerError(f"truncated container at byte {pos}")
        piece = view[pos:pos + n]
        pos += n
        return piece

    if bytes(take(8)) != MAGIC:
        raise ContainerError("bad magic string")
    version, count = struct.unpack("<II", take(8))
    if version != VERSION:
        raise ContainerError(f"unsupported format version {version}")
    tensors: dict[str, np.ndarray] = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<I", take(4))
        name = bytes(take(nlen)).decode("utf-8")
        (rank,) = struct.unpack("<I", take(4))
        dims = struct.unpack(f"<{rank}Q", take(8 * rank))
        size = 1
        for d in dims:
            if d < 1:
                raise ContainerError(f"tensor {name!r} has dim {d} < 1")
            size *= d
        data = np.frombuffer(take(8 * size), dtype="<f8").astype(np.float64)
        tensors[name] = data.reshape(dims)
    if pos != len(view):
        raise ContainerError(f"{len(view) - pos} trailing bytes after last tensor")
    return tensors


def save_tensors(path, tensors: dict[str, np.ndarray]) -> None:
    Path(path).write_bytes(pack_tensors(tensors))


def load_tensors(path) -> dict[str, np.ndarray]:
    return unpack_tensors(Path(path).read_bytes())


# ---------------------------------------------------------------------------
# Checkpoints: container + key=value manifest with crc guard
# ---------------------------------------------------------------------------

WEIGHTS_FILE = "weights.bin"
MANIFEST_FILE = "manifest.txt"


def format_manifest(entries: dict[str, str]) -> str:
    lines = [f"{k}={entries[k]}" for k in sorted(entries)]
    return "\n".join(lines) + "\n"


def parse_manifest(text: str) -> dict[str, str]:
    entries: dict[str, str] = {}
    for ln, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ContainerError(f"manifest line {ln}: missing '='")
        key, val = line.split("=", 1)
        entries[key.strip()] = val.strip()
    return entries


def save_checkpoint(directory, tensors: dict[str, np.ndarray], manifest: dict[str, str]) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    blob = pack_tensors(tensors)
    entries = dict(manifest)
    entries["weights_crc32"] = f"{zlib.crc32(blob):08x}"
    entries["manifest_version"] = "1"
    (d / WEIGHTS_FILE).write_bytes(blob)
    (d / MANIFEST_FILE).write_text(format_manifest(entries))


def load_checkpoint(directory) -> tuple[dict[str, np.ndarray], dict[str, str]]:
    d = Path(directory)
    mpath = d / MANIFEST_FILE
    wpath = d / WEIGHTS_FILE
    if not mpath.exists() or not wpath.exists():
        raise ContainerError(f"checkpoint at {d} is missing {MANIFEST_FILE} or {WEIGHTS_FILE}")
    manifest = parse_manifest(mpath.read_text())
    blob = wpath.read_bytes()
    want = manifest.get("weights_crc32")
    if want is None:
        raise ContainerError("manifest lacks weights_crc32")
    got = f"{zlib.crc32(blob):08x}"
    if got != want:
        raise ContainerError(f"weights crc mismatch: manifest {want}, file {got}")
    return unpack_tensors(blob), manifest
