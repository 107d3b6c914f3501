#!/usr/bin/env python3
"""Procedural cross-view scenes and the weather simulator, end to end.

Generates two locations, renders the overhead tile and the ground-view
ladder for each, applies every corruption condition to one ground view,
and writes the whole gallery as a PPM contact sheet next to this script.

Run:  python3 demos/01_scene_gallery.py
"""

from __future__ import annotations

import pathlib

import numpy as np

from partloc.scenes import (
    ALTITUDES,
    COMPONENT_KINDS,
    CONDITIONS,
    corrupt,
    gen_location,
    render_view,
)

OUT = pathlib.Path(__file__).resolve().parent / "out"


def write_ppm(path: pathlib.Path, raster: np.ndarray) -> None:
    """Binary PPM (P6): viewable everywhere, zero dependencies."""
    img = np.clip(raster * 255.0, 0, 255).astype(np.uint8)
    h, w = img.shape[:2]
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode())
        f.write(img.tobytes())


def contact_sheet(rows: list[list[np.ndarray]], pad: int = 2) -> np.ndarray:
    size = rows[0][0].shape[0]
    n_cols = max(len(r) for r in rows)
    sheet = np.ones((len(rows) * (size + pad) + pad,
                     n_cols * (size + pad) + pad, 3))
    for i, row in enumerate(rows):
        for j, tile in enumerate(row):
            y = pad + i * (size + pad)
            x = pad + j * (size + pad)
            sheet[y:y + size, x:x + size] = tile
    return sheet


def kind_fractions(raster: np.ndarray) -> str:
    """Rough painted-area share per kind, for eyeballing palette balance."""
    from partloc.scenes import _KIND_COLOR  # demo-only introspection
    total = raster.shape[0] * raster.shape[1]
    parts = []
    for kind in COMPONENT_KINDS:
        color = _KIND_COLOR[kind]
        close = np.linalg.norm(raster - color, axis=-1) < 0.10
        parts.append(f"{kind}={close.sum() / total:.3f}")
    return "  ".join(parts)


def main() -> None:
    OUT.mkdir(exist_ok=True)
    print("== layouts ==")
    specs = [gen_location(layout_seed=s, location_id=i)
             for i, s in enumerate((101, 202))]
    for spec in specs:
        counts = {k: 0 for k in COMPONENT_KINDS}
        for comp in spec.components:
            counts[comp.kind] += 1
        print(f"location {spec.location_id}: {len(spec.components)} components "
              f"{counts}")

    print("\n== overhead tile + ground ladder (one row per location) ==")
    rows = []
    for spec in specs:
        row = [render_view(spec, "sat")]
        for alt in ALTITUDES:
            row.append(render_view(spec, "drone", altitude_m=alt,
                                   texture_seed=spec.location_id))
        rows.append(row)
        print(f"location {spec.location_id}: overhead painted shares  "
              f"{kind_fractions(row[0])}")
    write_ppm(OUT / "views.ppm", contact_sheet(rows))
    print(f"wrote {OUT / 'views.ppm'}  "
          f"(columns: overhead, then ground at {ALTITUDES} m)")

    print("\n== weather conditions on one ground view ==")
    base = render_view(specs[0], "drone", altitude_m=200, texture_seed=0)
    tiles, labels = [], []
    for ci, cond in enumerate(CONDITIONS):
        tiles.append(corrupt(base, cond, seed=ci))
        labels.append(cond)
    write_ppm(OUT / "weather.ppm", contact_sheet([tiles[:5], tiles[5:]]))
    print("conditions:", ", ".join(labels))
    print(f"wrote {OUT / 'weather.ppm'}  (rows read left-to-right)")

    print("\n== determinism ==")
    again = corrupt(base, "fog_snow", seed=7)
    once = corrupt(base, "fog_snow", seed=7)
    print("same condition + seed reproduces bytes:",
          again.tobytes() == once.tobytes())
    other = corrupt(base, "fog_snow", seed=8)
    print("different seed changes the raster:   ",
          again.tobytes() != other.tobytes())


if __name__ == "__main__":
    main()
