"""Georeferenced rasters, road vectors and intersections shared by every stage.

World coordinates are (east, north) in meters of a local planar frame; no
geodetic projection is involved.  Pixel coordinates are (x, y) with x along
columns and y along rows, row 0 being the northernmost row.  Sub-pixel
positions are kept as floats everywhere; rounding happens only when a raster
is actually indexed.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np


class EmptyRegionError(ValueError):
    """Requested crop lies entirely outside the source raster."""


@dataclass(frozen=True)
class GeoTransform:
    """Mapping between raster pixels and the local planar world frame.

    ``rotation_deg`` is the clockwise angle (on a north-up map) between the
    raster's up direction and true north, applied about pixel (0, 0) whose
    center sits at (origin_east, origin_north).

    Sign convention (rotation 0): east = origin_east + x * mpp,
    north = origin_north - y * mpp.
    """

    origin_east: float
    origin_north: float
    meters_per_pixel: float = 1.0
    rotation_deg: float = 0.0

    def __post_init__(self):
        if self.meters_per_pixel <= 0:
            raise ValueError(f"meters_per_pixel must be > 0, got {self.meters_per_pixel}")
        if not -180.0 <= self.rotation_deg < 180.0:
            raise ValueError(f"rotation_deg must be in [-180, 180), got {self.rotation_deg}")

    def _matrix(self) -> np.ndarray:
        # Involution: the same matrix maps pixel offsets to world offsets
        # (in units of meters_per_pixel) and back.
        t = math.radians(self.rotation_deg)
        c, s = math.cos(t), math.sin(t)
        return np.array([[c, -s], [-s, -c]], dtype=np.float64)

    def pixel_to_world(self, p) -> np.ndarray:
        """Map pixel points (..., 2) to world (east, north) points."""
        p = np.asarray(p, dtype=np.float64)
        off = p @ self._matrix().T * self.meters_per_pixel
        return off + np.array([self.origin_east, self.origin_north])

    def world_to_pixel(self, w) -> np.ndarray:
        """Map world (east, north) points (..., 2) to pixel points."""
        w = np.asarray(w, dtype=np.float64)
        off = (w - np.array([self.origin_east, self.origin_north])) / self.meters_per_pixel
        return off @ self._matrix().T

    def shifted(self, x0: float, y0: float) -> "GeoTransform":
        """GeoTransform whose pixel (0, 0) is this transform's pixel (x0, y0)."""
        east, north = self.pixel_to_world((x0, y0))
        return GeoTransform(east, north, self.meters_per_pixel, self.rotation_deg)

    def to_dict(self) -> dict:
        return {
            "origin_east": self.origin_east,
            "origin_north": self.origin_north,
            "meters_per_pixel": self.meters_per_pixel,
            "rotation_deg": self.rotation_deg,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "GeoTransform":
        return cls(d["origin_east"], d["origin_north"], d["meters_per_pixel"], d["rotation_deg"])


@dataclass(frozen=True, eq=False)
class AffineTransform2D:
    """2x3 matrix [A|t] mapping source pixel coordinates to target pixels."""

    matrix: np.ndarray

    def __post_init__(self):
        m = np.asarray(self.matrix, dtype=np.float64)
        if m.shape != (2, 3):
            raise ValueError(f"affine matrix must be 2x3, got {m.shape}")
        m = np.ascontiguousarray(m)
        m.flags.writeable = False
        object.__setattr__(self, "matrix", m)

    @classmethod
    def identity(cls) -> "AffineTransform2D":
        return cls(np.array([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]]))

    @classmethod
    def from_parts(cls, a: np.ndarray, t) -> "AffineTransform2D":
        m = np.zeros((2, 3))
        m[:, :2] = a
        m[:, 2] = t
        return cls(m)

    @classmethod
    def rotation_about(cls, center, angle_deg: float, translation=(0.0, 0.0)) -> "AffineTransform2D":
        """Rotation by angle_deg (positive = counter-clockwise in pixel axes)
        about ``center``, followed by a translation."""
        t = math.radians(angle_deg)
        c, s = math.cos(t), math.sin(t)
        a = np.array([[c, -s], [s, c]])
        cx, cy = center
        shift = np.array([cx, cy]) - a @ np.array([cx, cy]) + np.asarray(translation, dtype=np.float64)
        return cls.from_parts(a, shift)

    @property
    def linear(self) -> np.ndarray:
        return self.matrix[:, :2]

    @property
    def translation(self) -> np.ndarray:
        return self.matrix[:, 2]

    @property
    def det(self) -> float:
        return float(np.linalg.det(self.linear))

    def apply(self, points) -> np.ndarray:
        p = np.asarray(points, dtype=np.float64)
        return p @ self.linear.T + self.translation

    def inverse(self) -> "AffineTransform2D":
        inv = np.linalg.inv(self.linear)
        return AffineTransform2D.from_parts(inv, -inv @ self.translation)

    def then(self, other: "AffineTransform2D") -> "AffineTransform2D":
        """Composition: apply self first, then other."""
        a = other.linear @ self.linear
        t = other.linear @ self.translation + other.translation
        return AffineTransform2D.from_parts(a, t)

    def to_list(self) -> list:
        return [float(v) for v in self.matrix.ravel()]

    @classmethod
    def from_list(cls, values) -> "AffineTransform2D":
        return cls(np.asarray(values, dtype=np.float64).reshape(2, 3))


@dataclass(frozen=True, eq=False)
class RoadRaster:
    """Occupancy grid of road pixels, values in [0, 1] (1 = road)."""

    values: np.ndarray
    geo: GeoTransform

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float32)
        if v.ndim != 2 or v.shape[0] < 1 or v.shape[1] < 1:
            raise ValueError(f"raster must be 2-D with both dims >= 1, got shape {v.shape}")
        if float(v.min(initial=0.0)) < 0.0 or float(v.max(initial=0.0)) > 1.0:
            raise ValueError("raster values must lie in [0, 1]")
        v = np.ascontiguousarray(v)
        v.flags.writeable = False
        object.__setattr__(self, "values", v)

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]

    def road_mask(self) -> np.ndarray:
        return self.values >= 0.5

    def road_pixel_count(self) -> int:
        return int(self.road_mask().sum())

    def contains_world(self, point) -> bool:
        x, y = self.geo.world_to_pixel(point)
        return -0.5 <= x <= self.width - 0.5 and -0.5 <= y <= self.height - 0.5


def crop_region(r: RoadRaster, center, radius_m: float) -> RoadRaster:
    """Square crop of side ceil(2*radius_m / mpp) centered at a world point.

    Out-of-bounds area is zero-filled; the crop's georeference is exact.
    Raises EmptyRegionError when the window does not overlap the source.
    """
    if radius_m <= 0:
        raise ValueError(f"radius_m must be > 0, got {radius_m}")
    side = int(math.ceil(2.0 * radius_m / r.geo.meters_per_pixel))
    cx, cy = r.geo.world_to_pixel(center)
    x0 = int(round(cx)) - side // 2
    y0 = int(round(cy)) - side // 2
    x1, y1 = x0 + side, y0 + side
    if x1 <= 0 or y1 <= 0 or x0 >= r.width or y0 >= r.height:
        raise EmptyRegionError(
            f"crop at world {tuple(np.asarray(center, dtype=float))} radius {radius_m} m "
            f"lies outside the {r.width}x{r.height} raster"
        )
    out = np.zeros((side, side), dtype=np.float32)
    sx0, sy0 = max(x0, 0), max(y0, 0)
    sx1, sy1 = min(x1, r.width), min(y1, r.height)
    out[sy0 - y0 : sy1 - y0, sx0 - x0 : sx1 - x0] = r.values[sy0:sy1, sx0:sx1]
    return RoadRaster(out, r.geo.shifted(x0, y0))


@dataclass(frozen=True, eq=False)
class RoadSegment:
    """Polyline centerline in world meters plus a constant road width."""

    points: np.ndarray
    width_m: float

    def __post_init__(self):
        p = np.ascontiguousarray(np.asarray(self.points, dtype=np.float64))
        if p.ndim != 2 or p.shape[0] < 2 or p.shape[1] != 2:
            raise ValueError(f"polyline must have shape (n>=2, 2), got {p.shape}")
        if not self.width_m > 0:
            raise ValueError(f"width_m must be > 0, got {self.width_m}")
        p.flags.writeable = False
        object.__setattr__(self, "points", p)


@dataclass(frozen=True)
class RoadVectorSet:
    """Collection of road segments; the vector ground truth for a map."""

    segments: tuple = ()

    def __post_init__(self):
        object.__setattr__(self, "segments", tuple(self.segments))

    def __len__(self) -> int:
        return len(self.segments)

    def bounds(self) -> tuple:
        """(min_east, min_north, max_east, max_north) over all polyline points."""
        if not self.segments:
            raise ValueError("empty vector set has no bounds")
        pts = np.vstack([s.points for s in self.segments])
        lo = pts.min(axis=0)
        hi = pts.max(axis=0)
        return float(lo[0]), float(lo[1]), float(hi[0]), float(hi[1])

    def translated(self, de: float, dn: float) -> "RoadVectorSet":
        off = np.array([de, dn])
        return RoadVectorSet(
            tuple(RoadSegment(s.points + off, s.width_m) for s in self.segments)
        )


@dataclass(frozen=True, eq=False)
class Intersection:
    """A detected or labeled road crossing."""

    id: int
    pixel_pos: tuple
    world_pos: tuple
    score: float = 1.0
    descriptor: np.ndarray | None = None

    def __post_init__(self):
        object.__setattr__(self, "pixel_pos", (float(self.pixel_pos[0]), float(self.pixel_pos[1])))
        object.__setattr__(self, "world_pos", (float(self.world_pos[0]), float(self.world_pos[1])))
        if not 0.0 <= self.score <= 1.0:
            raise ValueError(f"score must be in [0, 1], got {self.score}")

    def with_descriptor(self, descriptor: np.ndarray) -> "Intersection":
        return Intersection(self.id, self.pixel_pos, self.world_pos, self.score, descriptor)


def make_intersection(geo: GeoTransform, pixel_pos, id: int, score: float = 1.0,
                      descriptor: np.ndarray | None = None) -> Intersection:
    """Intersection whose world position is derived from its pixel position."""
    world = geo.pixel_to_world(pixel_pos)
    return Intersection(id, (float(pixel_pos[0]), float(pixel_pos[1])),
                        (float(world[0]), float(world[1])), score, descriptor)


@dataclass(frozen=True, eq=False)
class Region:
    """All intersections within radius_m of a center intersection."""

    center: Intersection
    radius_m: float
    members: tuple

    def __post_init__(self):
        members = tuple(self.members)
        if self.center not in members:
            raise ValueError("region center must be one of its members")
        c = np.asarray(self.center.world_pos)
        for m in members:
            if np.hypot(*(np.asarray(m.world_pos) - c)) > self.radius_m + 1e-9:
                raise ValueError(f"member {m.id} lies outside radius {self.radius_m} m")
        object.__setattr__(self, "members", members)

    def __len__(self) -> int:
        return len(self.members)


# ---------------------------------------------------------------------------
# Raster file format: binary PGM (values scaled by 255) plus a JSON sidecar
# carrying the georeference.  Writing is canonical so that load->save round
# trips are byte-exact.
# ---------------------------------------------------------------------------

def _sidecar_path(pgm_path: Path) -> Path:
    return pgm_path.with_suffix(".json")


def save_raster(r: RoadRaster, pgm_path) -> None:
    pgm_path = Path(pgm_path)
    data = np.rint(r.values * 255.0).astype(np.uint8)
    header = f"P5\n{r.width} {r.height}\n255\n".encode("ascii")
    pgm_path.write_bytes(header + data.tobytes())
    sidecar = json.dumps(r.geo.to_dict(), sort_keys=True, indent=2) + "\n"
    _sidecar_path(pgm_path).write_text(sidecar, encoding="utf-8")


def load_raster(pgm_path) -> RoadRaster:
    pgm_path = Path(pgm_path)
    raw = pgm_path.read_bytes()
    if not raw.startswith(b"P5"):
        raise ValueError(f"{pgm_path}: not a binary PGM (P5) file")
    # Header: magic, width, height, maxval, each separated by whitespace.
    fields = []
    pos = 2
    while len(fields) < 3:
        while pos < len(raw) and raw[pos : pos + 1].isspace():
            pos += 1
        if raw[pos : pos + 1] == b"#":
            while pos < len(raw) and raw[pos : pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos : pos + 1].isspace():
            pos += 1
        fields.append(raw[start:pos])
    pos += 1  # single whitespace after maxval
    width, height, maxval = (int(f) for f in fields)
    if maxval != 255:
        raise ValueError(f"{pgm_path}: expected maxval 255, got {maxval}")
    data = np.frombuffer(raw, dtype=np.uint8, count=width * height, offset=pos)
    values = data.reshape(height, width).astype(np.float32) / 255.0
    sidecar = _sidecar_path(pgm_path)
    if not sidecar.exists():
        raise ValueError(f"missing georeference sidecar {sidecar}")
    geo = GeoTransform.from_dict(json.loads(sidecar.read_text(encoding="utf-8")))
    return RoadRaster(values, geo)
