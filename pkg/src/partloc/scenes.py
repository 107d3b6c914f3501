"""Procedural cross-view scene pairs and the weather corruption simulator.

A location is a small abstract "city block": 3–12 geometric components
(buildings, roads, vegetation, water) with deterministic per-component shading,
all derived from a single layout seed. Two views render the same geometry:

* satellite — top-down, fixed scale, the full unit footprint, no warp;
* drone — an altitude-dependent centered crop (window side = altitude/300, so
  300 m sees the whole footprint and 150 m the central quarter), a fixed 10°
  horizontal shear standing in for obliqueness, plus per-pixel texture noise
  from a separate texture seed.

Geometry is evaluated analytically per output pixel, so component silhouettes
are exactly shared between views and across texture seeds — layout is the
stable signal, texture the nuisance.

Weather corruption covers ten conditions (``CONDITIONS``); combined tags apply
their parts sequentially, and every corruption is a pure function of
(raster, condition, seed) with output clamped to [0, 1].
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "COMPONENT_KINDS",
    "CONDITIONS",
    "CORRUPT_CONDITIONS",
    "ALTITUDES",
    "SceneComponent",
    "SceneSpec",
    "LocationScenes",
    "SceneSet",
    "gen_location",
    "render_view",
    "occupancy_mask",
    "corrupt",
    "sample_condition",
    "build_dataset",
]

COMPONENT_KINDS = ("building", "road", "vegetation", "water")

# exactly the ten protocol conditions; combined tags apply parts in name order
CONDITIONS = (
    "normal",
    "fog",
    "rain",
    "snow",
    "dark",
    "light",
    "fog_rain",
    "fog_snow",
    "rain_snow",
    "wind",
)
CORRUPT_CONDITIONS = tuple(c for c in CONDITIONS if c != "normal")

ALTITUDES = (150, 200, 250, 300)

_BG_COLOR = np.array([0.86, 0.83, 0.76])
_KIND_COLOR = {
    "building": np.array([0.62, 0.33, 0.28]),
    "road": np.array([0.30, 0.30, 0.34]),
    "vegetation": np.array([0.18, 0.55, 0.24]),
    "water": np.array([0.16, 0.38, 0.70]),
}
_SHEAR_TAN = math.tan(math.radians(10.0))
_TEXTURE_NOISE_STD = 0.03
_FOOT_LO, _FOOT_HI = 0.1, 0.9  # component footprints stay inside this square


@dataclass(frozen=True)
class SceneComponent:
    kind: str
    center: tuple[float, float]
    extent: tuple[float, float]  # full width / height in world units
    orientation: float  # radians
    shade: float  # per-component brightness factor, shared across views


@dataclass(frozen=True)
class SceneSpec:
    location_id: int
    layout_seed: int
    components: tuple[SceneComponent, ...]
    world_coord: tuple[float, float] = (0.0, 0.0)


@dataclass
class LocationScenes:
    """One location's rendered views: a clean satellite tile + drone views."""

    spec: SceneSpec
    satellite: np.ndarray
    drone: dict[int, np.ndarray]  # altitude_m -> raster


@dataclass
class SceneSet:
    split: str
    locations: list[LocationScenes] = field(default_factory=list)

    def location_ids(self) -> list[int]:
        return [loc.spec.location_id for loc in self.locations]


# ---------------------------------------------------------------------------
# layout generation
# ---------------------------------------------------------------------------

# Every location paints the same per-kind area (before overlap), so global
# color statistics carry no identity: retrieval has to read the arrangement,
# which survives the view change, rather than the palette mix, which any
# pooled color histogram would shortcut.
_KIND_AREA_BUDGET = 0.07


def _raw_extent(kind: str, rng: np.random.Generator) -> tuple[float, float]:
    if kind == "building":
        return (float(rng.uniform(0.10, 0.28)), float(rng.uniform(0.10, 0.28)))
    if kind == "road":
        return (float(rng.uniform(0.35, 0.70)), float(rng.uniform(0.04, 0.08)))
    if kind == "vegetation":
        return (float(rng.uniform(0.12, 0.30)), float(rng.uniform(0.12, 0.30)))
    return (float(rng.uniform(0.15, 0.35)), float(rng.uniform(0.15, 0.35)))


def _extent_area(kind: str, extent: tuple[float, float]) -> float:
    w, h = extent
    if kind in ("building", "road"):
        return w * h
    return math.pi / 4.0 * w * h


def gen_location(
    layout_seed: int,
    location_id: int = 0,
    world_coord: tuple[float, float] = (0.0, 0.0),
) -> SceneSpec:
    """Deterministic layout from a seed: 3–12 components inside [0.1, 0.9]².

    Kinds are dealt round-robin and each kind's total painted area is
    rescaled to a fixed budget, so locations differ in component geometry
    and arrangement but share near-identical color statistics.
    """
    rng = np.random.default_rng(layout_seed)
    n = int(rng.integers(4, 13))
    kinds = [COMPONENT_KINDS[i % len(COMPONENT_KINDS)] for i in range(n)]
    order = rng.permutation(n)  # paint order varies; kind counts do not

    extents: dict[int, tuple[float, float]] = {}
    for kind in COMPONENT_KINDS:
        idx = [i for i in range(n) if kinds[i] == kind]
        raw = {i: _raw_extent(kind, rng) for i in idx}
        total = sum(_extent_area(kind, e) for e in raw.values())
        scale = math.sqrt(_KIND_AREA_BUDGET / total)
        extents.update(
            {i: (e[0] * scale, e[1] * scale) for i, e in raw.items()}
        )

    components = []
    for i in order:
        extent = extents[int(i)]
        orientation = float(rng.uniform(0.0, math.pi))
        # center-biased placement: the low-altitude drone window sees the
        # middle of the footprint, so layouts concentrate evidence there
        raw_c = rng.normal(0.5, 0.18, size=2)
        radius = 0.5 * math.hypot(extent[0], extent[1])
        lo, hi = _FOOT_LO + radius, _FOOT_HI - radius
        if lo >= hi:
            center = (0.5, 0.5)
        else:
            center = (float(np.clip(raw_c[0], lo, hi)), float(np.clip(raw_c[1], lo, hi)))
        components.append(
            SceneComponent(kinds[int(i)], center, extent, orientation, 1.0)
        )
    return SceneSpec(
        location_id=location_id,
        layout_seed=int(layout_seed),
        components=tuple(components),
        world_coord=world_coord,
    )


# ---------------------------------------------------------------------------
# rendering
# ---------------------------------------------------------------------------

def _world_grid(view: str, altitude_m: int | None, size: int) -> tuple[np.ndarray, np.ndarray]:
    """World (x, y) coordinates of every output pixel center."""
    px = (np.arange(size) + 0.5) / size
    u, v = np.meshgrid(px, px)  # u: column fraction, v: row fraction
    if view == "sat":
        return u, v
    side = altitude_m / 300.0  # 300 m -> full footprint, 150 m -> central quarter
    x = 0.5 + side * (u - 0.5 + _SHEAR_TAN * (v - 0.5))
    y = 0.5 + side * (v - 0.5)
    return x, y


def _component_mask(comp: SceneComponent, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    cx, cy = comp.center
    c, s = math.cos(comp.orientation), math.sin(comp.orientation)
    dx, dy = x - cx, y - cy
    qx = c * dx + s * dy
    qy = -s * dx + c * dy
    hw, hh = comp.extent[0] / 2.0, comp.extent[1] / 2.0
    if comp.kind in ("building", "road"):
        return (np.abs(qx) <= hw) & (np.abs(qy) <= hh)
    return (qx / hw) ** 2 + (qy / hh) ** 2 <= 1.0


def _validate_view(view: str, altitude_m: int | None) -> None:
    if view not in ("sat", "drone"):
        raise ValueError(f"unknown view {view!r}")
    if view == "drone" and altitude_m not in ALTITUDES:
        raise ValueError(f"drone altitude must be one of {ALTITUDES}, got {altitude_m}")


def render_view(
    spec: SceneSpec,
    view: str,
    altitude_m: int | None = None,
    texture_seed: int = 0,
    size: int = 64,
) -> np.ndarray:
    """Render one view as an (size, size, 3) float64 raster in [0, 1]."""
    _validate_view(view, altitude_m)
    x, y = _world_grid(view, altitude_m, size)
    out = np.tile(_BG_COLOR, (size, size, 1))
    for comp in spec.components:
        mask = _component_mask(comp, x, y)
        color = np.clip(_KIND_COLOR[comp.kind] * comp.shade, 0.0, 1.0)
        out[mask] = color
    if view == "drone":
        rng = np.random.default_rng(texture_seed)
        out = out + rng.normal(0.0, _TEXTURE_NOISE_STD, size=out.shape)
    return np.clip(out, 0.0, 1.0)


def occupancy_mask(
    spec: SceneSpec, view: str, altitude_m: int | None = None, size: int = 64
) -> np.ndarray:
    """Boolean component-occupancy silhouette (texture-independent)."""
    _validate_view(view, altitude_m)
    x, y = _world_grid(view, altitude_m, size)
    mask = np.zeros((size, size), dtype=bool)
    for comp in spec.components:
        mask |= _component_mask(comp, x, y)
    return mask


# ---------------------------------------------------------------------------
# weather corruption
# ---------------------------------------------------------------------------

def _fog(r: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    alpha = rng.uniform(0.4, 0.7)
    return (1.0 - alpha) * r + alpha * 0.7


def _rain(r: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    h, w, _ = r.shape
    speed = rng.uniform(0.1, 0.3)  # controls streak length
    angle = rng.uniform(-20.0, 20.0)  # slant shared by all streaks in a pass
    length = max(2, int(round(speed * h)))
    n_streaks = 40
    out = r.copy()
    dy = math.cos(math.radians(angle))
    dx = math.sin(math.radians(angle))
    for _ in range(n_streaks):
        y0 = rng.uniform(0, h - 1)
        x0 = rng.uniform(0, w - 1)
        for t in range(length):
            yi = int(round(y0 + dy * t))
            xi = int(round(x0 + dx * t))
            if 0 <= yi < h and 0 <= xi < w:
                out[yi, xi] += 0.25
    return out


def _snow(r: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    h, w, _ = r.shape
    flake_size = rng.uniform(0.1, 0.4)
    speed = rng.uniform(0.01, 0.05)  # slight fall elongation
    radius = flake_size * 8.0
    smear = max(1, int(round(speed * h)))
    n_flakes = 60
    out = r.copy()
    yy, xx = np.mgrid[0:h, 0:w]
    for _ in range(n_flakes):
        cy = rng.uniform(0, h - 1)
        cx = rng.uniform(0, w - 1)
        for t in range(smear):
            d2 = (yy - (cy + t)) ** 2 + (xx - cx) ** 2
            mask = d2 <= radius * radius
            out[mask] = 0.2 * out[mask] + 0.8
    return out


def _dark(r: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    return r * rng.uniform(0.3, 0.5)


def _light(r: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    return r * rng.uniform(1.5, 2.0)


def _wind(r: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """15-tap motion blur along a random direction in [-45°, 45°]."""
    angle = rng.uniform(-45.0, 45.0)
    taps = 15
    h, w, _ = r.shape
    dx = math.cos(math.radians(angle))
    dy = math.sin(math.radians(angle))
    acc = np.zeros_like(r)
    yy, xx = np.mgrid[0:h, 0:w]
    for t in range(taps):
        off = t - (taps - 1) / 2.0
        ys = np.clip(np.round(yy + dy * off).astype(int), 0, h - 1)
        xs = np.clip(np.round(xx + dx * off).astype(int), 0, w - 1)
        acc += r[ys, xs]
    return acc / taps


_SINGLE = {
    "fog": _fog,
    "rain": _rain,
    "snow": _snow,
    "dark": _dark,
    "light": _light,
    "wind": _wind,
}


def sample_condition(rng: np.random.Generator) -> str:
    """Uniform draw over all ten conditions (per-batch online sampling)."""
    return CONDITIONS[int(rng.integers(0, len(CONDITIONS)))]


def corrupt(raster: np.ndarray, condition: str, seed: int) -> np.ndarray:
    """Apply one weather condition; pure in (raster, condition, seed)."""
    if condition not in CONDITIONS:
        raise ValueError(f"unknown weather condition {condition!r}")
    out = np.array(raster, dtype=np.float64, copy=True)
    if condition == "normal":
        return out
    rng = np.random.default_rng(seed)
    for part in condition.split("_"):
        out = _SINGLE[part](out, rng)
    return np.clip(out, 0.0, 1.0)


# ---------------------------------------------------------------------------
# dataset assembly
# ---------------------------------------------------------------------------

_TEST_ID_BASE = 1_000_000
_GRID_SPACING_M = 10.0


def _derive_seed(*parts: int) -> int:
    return int(np.random.SeedSequence(parts).generate_state(1, np.uint64)[0])


def build_dataset(
    n_locations: int,
    altitudes: tuple[int, ...],
    split: str,
    seed: int,
    size: int = 64,
) -> SceneSet:
    """Build one split's scene set.

    ``train`` locations (ids 0..n-1) are disjoint by construction from the
    test family (ids 1_000_000+idx) used by ``gallery`` and ``query``, which
    share one location set: each query location has exactly one gallery
    satellite tile. World coordinates sit on a 10 m grid.
    """
    if n_locations < 2:
        raise ValueError(f"need at least 2 locations, got {n_locations}")
    if split not in ("train", "gallery", "query"):
        raise ValueError(f"unknown split {split!r}")
    for alt in altitudes:
        if alt not in ALTITUDES:
            raise ValueError(f"altitude {alt} not in {ALTITUDES}")
    family = 0 if split == "train" else 1
    grid_w = max(1, math.ceil(math.sqrt(n_locations)))
    out = SceneSet(split=split)
    for idx in range(n_locations):
        location_id = idx if split == "train" else _TEST_ID_BASE + idx
        layout_seed = _derive_seed(seed, family, idx)
        world = (
            _GRID_SPACING_M * (idx % grid_w),
            _GRID_SPACING_M * (idx // grid_w),
        )
        spec = gen_location(layout_seed, location_id=location_id, world_coord=world)
        sat = render_view(spec, "sat", size=size)
        drone = {}
        for alt in altitudes:
            tex = _derive_seed(seed, family, idx, alt)
            drone[alt] = render_view(
                spec, "drone", altitude_m=alt, texture_seed=tex, size=size
            )
        out.locations.append(LocationScenes(spec=spec, satellite=sat, drone=drone))
    return out
