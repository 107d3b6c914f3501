"""On-disk formats: rasters, checkpoints, embedding dumps, manifests, loss logs.

All binary formats are little-endian with 4-byte ASCII magics:

* ``SKRA`` raster — u32 width, u32 height, u32 channels, then f32 pixels in
  row-major order (row, column, channel).
* ``SKCK`` checkpoint — u32 tensor count, then per tensor: u32 name length,
  UTF-8 name bytes, u32 rank, u32 per-axis extents, f32 data.
* ``SKEM`` embedding dump — u32 count, u32 dim, count×dim f32 values, then
  count u32 location ids.

Text artifacts are line-delimited: the dataset manifest is tab-separated
(location_id, split, altitude_m, condition, world_x, world_y, path) and the
training loss log is one JSON object per optimizer step. Identical inputs
serialize to identical bytes — reproducibility audits diff these files raw.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

__all__ = [
    "write_raster",
    "read_raster",
    "write_checkpoint",
    "read_checkpoint",
    "write_embeddings",
    "read_embeddings",
    "ManifestRecord",
    "write_manifest",
    "read_manifest",
    "append_loss_record",
    "read_loss_log",
]

_RASTER_MAGIC = b"SKRA"
_CKPT_MAGIC = b"SKCK"
_EMB_MAGIC = b"SKEM"


class FormatError(ValueError):
    """Raised when a file does not conform to its declared format."""


def _read_exact(f, n: int) -> bytes:
    buf = f.read(n)
    if len(buf) != n:
        raise FormatError(f"truncated file: wanted {n} bytes, got {len(buf)}")
    return buf


def _read_u32(f) -> int:
    return struct.unpack("<I", _read_exact(f, 4))[0]


# ---------------------------------------------------------------------------
# rasters
# ---------------------------------------------------------------------------

def write_raster(path: str | Path, raster: np.ndarray) -> None:
    """Write an (H, W, C) float array as an SKRA file."""
    arr = np.asarray(raster, dtype=np.float32)
    if arr.ndim != 3:
        raise FormatError(f"raster must be (H, W, C), got shape {arr.shape}")
    h, w, c = arr.shape
    with open(path, "wb") as f:
        f.write(_RASTER_MAGIC)
        f.write(struct.pack("<III", w, h, c))
        f.write(arr.astype("<f4").tobytes(order="C"))


def read_raster(path: str | Path) -> np.ndarray:
    with open(path, "rb") as f:
        if _read_exact(f, 4) != _RASTER_MAGIC:
            raise FormatError(f"{path}: bad raster magic")
        w = _read_u32(f)
        h = _read_u32(f)
        c = _read_u32(f)
        data = np.frombuffer(_read_exact(f, 4 * w * h * c), dtype="<f4")
    return data.reshape(h, w, c).astype(np.float64)


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def write_checkpoint(path: str | Path, tensors: dict[str, np.ndarray]) -> None:
    """Write named arrays in insertion order as an SKCK file (f32 payload)."""
    with open(path, "wb") as f:
        f.write(_CKPT_MAGIC)
        f.write(struct.pack("<I", len(tensors)))
        for name, arr in tensors.items():
            arr = np.asarray(arr)
            nb = name.encode("utf-8")
            f.write(struct.pack("<I", len(nb)))
            f.write(nb)
            f.write(struct.pack("<I", arr.ndim))
            for dim in arr.shape:
                f.write(struct.pack("<I", dim))
            f.write(arr.astype("<f4").tobytes(order="C"))


def read_checkpoint(path: str | Path) -> dict[str, np.ndarray]:
    out: dict[str, np.ndarray] = {}
    with open(path, "rb") as f:
        if _read_exact(f, 4) != _CKPT_MAGIC:
            raise FormatError(f"{path}: bad checkpoint magic")
        count = _read_u32(f)
        for _ in range(count):
            name = _read_exact(f, _read_u32(f)).decode("utf-8")
            rank = _read_u32(f)
            shape = tuple(_read_u32(f) for _ in range(rank))
            n = int(np.prod(shape)) if shape else 1
            data = np.frombuffer(_read_exact(f, 4 * n), dtype="<f4")
            out[name] = data.reshape(shape).astype(np.float64)
    return out


# ---------------------------------------------------------------------------
# embedding dumps
# ---------------------------------------------------------------------------

def write_embeddings(
    path: str | Path, embeddings: np.ndarray, location_ids: np.ndarray
) -> None:
    emb = np.asarray(embeddings, dtype=np.float32)
    ids = np.asarray(location_ids, dtype=np.uint32)
    if emb.ndim != 2 or ids.shape != (emb.shape[0],):
        raise FormatError(
            f"embeddings (N, D) with N ids required, got {emb.shape} / {ids.shape}"
        )
    with open(path, "wb") as f:
        f.write(_EMB_MAGIC)
        f.write(struct.pack("<II", emb.shape[0], emb.shape[1]))
        f.write(emb.astype("<f4").tobytes(order="C"))
        f.write(ids.astype("<u4").tobytes(order="C"))


def read_embeddings(path: str | Path) -> tuple[np.ndarray, np.ndarray]:
    with open(path, "rb") as f:
        if _read_exact(f, 4) != _EMB_MAGIC:
            raise FormatError(f"{path}: bad embedding magic")
        count = _read_u32(f)
        dim = _read_u32(f)
        emb = np.frombuffer(_read_exact(f, 4 * count * dim), dtype="<f4")
        ids = np.frombuffer(_read_exact(f, 4 * count), dtype="<u4")
    return emb.reshape(count, dim).astype(np.float64), ids.astype(np.int64)


# ---------------------------------------------------------------------------
# dataset manifest
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ManifestRecord:
    location_id: int
    split: str  # train | gallery | query
    altitude_m: int  # -1 for satellite tiles (no altitude)
    condition: str
    world_x: float
    world_y: float
    path: str

    @property
    def is_satellite(self) -> bool:
        return self.altitude_m < 0


def write_manifest(path: str | Path, records: list[ManifestRecord]) -> None:
    lines = []
    for r in records:
        lines.append(
            "\t".join(
                [
                    str(r.location_id),
                    r.split,
                    str(r.altitude_m),
                    r.condition,
                    repr(float(r.world_x)),
                    repr(float(r.world_y)),
                    r.path,
                ]
            )
        )
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_manifest(path: str | Path) -> list[ManifestRecord]:
    records = []
    for lineno, line in enumerate(
        Path(path).read_text(encoding="utf-8").splitlines(), start=1
    ):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 7:
            raise FormatError(f"{path}:{lineno}: expected 7 tab-separated fields")
        records.append(
            ManifestRecord(
                location_id=int(parts[0]),
                split=parts[1],
                altitude_m=int(parts[2]),
                condition=parts[3],
                world_x=float(parts[4]),
                world_y=float(parts[5]),
                path=parts[6],
            )
        )
    return records


# ---------------------------------------------------------------------------
# loss log
# ---------------------------------------------------------------------------

def append_loss_record(f, record: dict) -> None:
    """Append one optimizer-step record as a canonical JSON line.

    Keys are sorted and floats use Python repr (shortest round-trip), so two
    identical runs write identical bytes.
    """
    f.write(json.dumps(record, sort_keys=True))
    f.write("\n")


def read_loss_log(path: str | Path) -> list[dict]:
    out = []
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if line.strip():
            out.append(json.loads(line))
    return out
