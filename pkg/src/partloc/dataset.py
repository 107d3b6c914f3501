"""On-disk dataset: writer for generated scene pairs and a reader with
grouped access for training and retrieval.

Layout under a dataset root::

    manifest.tsv              one record per raster (see formats.ManifestRecord)
    rasters/loc0000003_sat.skra       satellite tile (no altitude)
    rasters/loc0000003_alt150.skra    drone view at 150 m

Train locations carry split ``train`` for both view kinds; held-out
locations split into ``gallery`` (their satellite tiles) and ``query``
(their drone views). All rasters are stored clean — weather corruption
is applied online by consumers.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .config import RunConfig
from .formats import ManifestRecord, read_manifest, read_raster, write_manifest, write_raster
from .scenes import SceneSet, build_dataset

MANIFEST_NAME = "manifest.tsv"
RASTER_DIR = "rasters"


def _raster_name(location_id: int, altitude_m: int | None) -> str:
    if altitude_m is None:
        return f"loc{location_id:07d}_sat.skra"
    return f"loc{location_id:07d}_alt{altitude_m}.skra"


def _emit_location_records(
    scene_set: SceneSet,
    sat_split: str,
    drone_split: str,
    out_dir: Path,
) -> list[ManifestRecord]:
    records: list[ManifestRecord] = []
    raster_dir = out_dir / RASTER_DIR
    for loc in scene_set.locations:
        spec = loc.spec
        wx, wy = spec.world_coord
        sat_rel = f"{RASTER_DIR}/{_raster_name(spec.location_id, None)}"
        write_raster(raster_dir / _raster_name(spec.location_id, None), loc.satellite)
        records.append(
            ManifestRecord(
                location_id=spec.location_id,
                split=sat_split,
                altitude_m=-1,
                condition="normal",
                world_x=wx,
                world_y=wy,
                path=sat_rel,
            )
        )
        for alt in sorted(loc.drone):
            rel = f"{RASTER_DIR}/{_raster_name(spec.location_id, alt)}"
            write_raster(raster_dir / _raster_name(spec.location_id, alt), loc.drone[alt])
            records.append(
                ManifestRecord(
                    location_id=spec.location_id,
                    split=drone_split,
                    altitude_m=alt,
                    condition="normal",
                    world_x=wx,
                    world_y=wy,
                    path=rel,
                )
            )
    return records


def write_dataset(out_dir: str | Path, cfg: RunConfig) -> Path:
    """Generate and persist train + held-out scene sets; returns manifest path."""
    out = Path(out_dir)
    (out / RASTER_DIR).mkdir(parents=True, exist_ok=True)
    train = build_dataset(
        cfg.n_locations, cfg.altitudes, "train", cfg.data_seed, size=cfg.raster_size
    )
    # Gallery and query share one held-out location family: each location
    # contributes its satellite tile to the gallery and its drone views as
    # queries, so a single build covers both splits.
    held_out = build_dataset(
        cfg.n_test_locations, cfg.altitudes, "query", cfg.data_seed, size=cfg.raster_size
    )
    records = _emit_location_records(train, "train", "train", out)
    records += _emit_location_records(held_out, "gallery", "query", out)
    manifest = out / MANIFEST_NAME
    write_manifest(manifest, records)
    return manifest


@dataclass(frozen=True)
class TrainGroup:
    """One training location's views: the satellite tile + drone records."""

    location_id: int
    satellite: ManifestRecord
    drones: tuple[ManifestRecord, ...]


class DiskDataset:
    """Reader over a written dataset; rasters are cached in memory."""

    def __init__(self, root: str | Path) -> None:
        self.root = Path(root)
        manifest = self.root / MANIFEST_NAME
        if not manifest.is_file():
            raise FileNotFoundError(f"no {MANIFEST_NAME} under {self.root}")
        self._records = read_manifest(manifest)
        self._cache: dict[str, np.ndarray] = {}
        by_split: dict[str, list[ManifestRecord]] = {}
        for rec in self._records:
            by_split.setdefault(rec.split, []).append(rec)
        self._by_split = by_split
        groups: dict[int, dict[str, list[ManifestRecord]]] = {}
        for rec in by_split.get("train", []):
            slot = groups.setdefault(rec.location_id, {"sat": [], "drone": []})
            slot["sat" if rec.is_satellite else "drone"].append(rec)
        self._groups: dict[int, TrainGroup] = {}
        for loc_id in sorted(groups):
            slot = groups[loc_id]
            if len(slot["sat"]) != 1:
                raise ValueError(
                    f"train location {loc_id} has {len(slot['sat'])} satellite tiles"
                )
            drones = tuple(sorted(slot["drone"], key=lambda r: r.altitude_m))
            if not drones:
                raise ValueError(f"train location {loc_id} has no drone views")
            self._groups[loc_id] = TrainGroup(loc_id, slot["sat"][0], drones)
        self._train_ids = tuple(sorted(self._groups))
        self._labels = {loc_id: i for i, loc_id in enumerate(self._train_ids)}

    # -- record access ------------------------------------------------------

    def records(self, split: str) -> list[ManifestRecord]:
        if split not in ("train", "gallery", "query"):
            raise ValueError(f"unknown split {split!r}")
        return list(self._by_split.get(split, []))

    def load_raster(self, record: ManifestRecord) -> np.ndarray:
        cached = self._cache.get(record.path)
        if cached is None:
            cached = read_raster(self.root / record.path)
            self._cache[record.path] = cached
        return cached

    # -- training groups ----------------------------------------------------

    @property
    def train_location_ids(self) -> tuple[int, ...]:
        return self._train_ids

    def group(self, location_id: int) -> TrainGroup:
        try:
            return self._groups[location_id]
        except KeyError:
            raise KeyError(f"location {location_id} is not a train location") from None

    def label_of(self, location_id: int) -> int:
        try:
            return self._labels[location_id]
        except KeyError:
            raise KeyError(f"location {location_id} is not a train location") from None
