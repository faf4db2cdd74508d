"""Road vector ingestion, rasterization, synthetic cities and query noise.

All randomness is drawn from numpy's PCG64 generator seeded with an explicit
64-bit integer, so outputs are reproducible bit for bit across platforms.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

from roadloc.geometry import (
    AffineTransform2D,
    GeoTransform,
    Intersection,
    RoadRaster,
    RoadSegment,
    RoadVectorSet,
    make_intersection,
)


class VectorParseError(ValueError):
    """Malformed road vector file, annotated with the offending location."""


class CityGenerationError(ValueError):
    """Degenerate synthetic city specification."""


# ---------------------------------------------------------------------------
# Vector file format: GeoJSON-like FeatureCollection of LineStrings with a
# "width_m" property.  Coordinates are (east, north) meters.
# ---------------------------------------------------------------------------

def parse_road_vectors(path) -> RoadVectorSet:
    path = Path(path)
    text = path.read_text(encoding="utf-8")
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as e:
        raise VectorParseError(f"{path}: syntax error at line {e.lineno} column {e.colno}: {e.msg}") from e
    if not isinstance(doc, dict) or doc.get("type") != "FeatureCollection":
        raise VectorParseError(f"{path}: expected a FeatureCollection document")
    features = doc.get("features")
    if not isinstance(features, list):
        raise VectorParseError(f"{path}: 'features' must be a list")
    segments = []
    for i, feat in enumerate(features):
        geom = feat.get("geometry") if isinstance(feat, dict) else None
        if not isinstance(geom, dict) or geom.get("type") != "LineString":
            raise VectorParseError(f"{path}: feature {i}: geometry must be a LineString")
        coords = geom.get("coordinates")
        if not isinstance(coords, list) or len(coords) < 2:
            raise VectorParseError(f"{path}: feature {i}: LineString needs >= 2 coordinates")
        try:
            pts = np.asarray(coords, dtype=np.float64)
        except (TypeError, ValueError) as e:
            raise VectorParseError(f"{path}: feature {i}: non-numeric coordinates") from e
        if pts.ndim != 2 or pts.shape[1] != 2 or not np.all(np.isfinite(pts)):
            raise VectorParseError(f"{path}: feature {i}: coordinates must be finite [east, north] pairs")
        props = feat.get("properties") or {}
        width = props.get("width_m")
        if not isinstance(width, (int, float)) or not math.isfinite(width):
            raise VectorParseError(f"{path}: feature {i}: missing numeric 'width_m' property")
        if width <= 0:
            raise VectorParseError(f"{path}: feature {i}: width_m must be > 0, got {width}")
        segments.append(RoadSegment(pts, float(width)))
    return RoadVectorSet(tuple(segments))


def save_road_vectors(vectors: RoadVectorSet, path) -> None:
    features = [
        {
            "type": "Feature",
            "geometry": {"type": "LineString", "coordinates": [[float(e), float(n)] for e, n in seg.points]},
            "properties": {"width_m": seg.width_m},
        }
        for seg in vectors.segments
    ]
    doc = {"type": "FeatureCollection", "features": features}
    Path(path).write_text(json.dumps(doc, sort_keys=True, indent=2) + "\n", encoding="utf-8")


# ---------------------------------------------------------------------------
# Rasterization: binary capsule test against pixel centers.
# ---------------------------------------------------------------------------

def rasterize(vectors: RoadVectorSet, geo: GeoTransform, size) -> RoadRaster:
    """Binary raster: a pixel is road iff its center lies within width_m/2 of
    some segment (inclusive)."""
    if isinstance(size, int):
        width = height = size
    else:
        width, height = size
    if width < 1 or height < 1:
        raise ValueError(f"raster size must be >= 1, got {(width, height)}")
    out = np.zeros((height, width), dtype=bool)
    mpp = geo.meters_per_pixel
    for seg in vectors.segments:
        half = seg.width_m / 2.0
        pad = half / mpp + 1.0
        pts_px = geo.world_to_pixel(seg.points)
        for a_px, b_px, a_w, b_w in zip(pts_px[:-1], pts_px[1:], seg.points[:-1], seg.points[1:]):
            x0 = max(int(math.floor(min(a_px[0], b_px[0]) - pad)), 0)
            x1 = min(int(math.ceil(max(a_px[0], b_px[0]) + pad)) + 1, width)
            y0 = max(int(math.floor(min(a_px[1], b_px[1]) - pad)), 0)
            y1 = min(int(math.ceil(max(a_px[1], b_px[1]) + pad)) + 1, height)
            if x0 >= x1 or y0 >= y1:
                continue
            xs, ys = np.meshgrid(np.arange(x0, x1), np.arange(y0, y1))
            centers = geo.pixel_to_world(np.stack([xs, ys], axis=-1).reshape(-1, 2))
            d2 = _point_segment_sqdist(centers, a_w, b_w)
            hit = (d2 <= half * half).reshape(y1 - y0, x1 - x0)
            out[y0:y1, x0:x1] |= hit
    return RoadRaster(out.astype(np.float32), geo)


def _point_segment_sqdist(points: np.ndarray, a, b) -> np.ndarray:
    ab = np.asarray(b, dtype=np.float64) - np.asarray(a, dtype=np.float64)
    denom = float(ab @ ab)
    ap = points - np.asarray(a, dtype=np.float64)
    if denom == 0.0:
        d = ap
    else:
        t = np.clip((ap @ ab) / denom, 0.0, 1.0)
        d = ap - t[:, None] * ab
    return np.einsum("ij,ij->i", d, d)


# ---------------------------------------------------------------------------
# Intersection derivation from vectors: points where >= 3 distinct road
# directions meet.  Used to build reference databases from arbitrary inputs.
# ---------------------------------------------------------------------------

def derive_intersections(vectors: RoadVectorSet, merge_tol_m: float = 0.5,
                         angle_tol_deg: float = 5.0) -> np.ndarray:
    """World positions (n, 2) of all points where >= 3 road directions meet."""
    segs = []
    for seg in vectors.segments:
        for a, b in zip(seg.points[:-1], seg.points[1:]):
            if not np.allclose(a, b):
                segs.append((a, b))
    if not segs:
        return np.zeros((0, 2))
    a = np.array([s[0] for s in segs])
    b = np.array([s[1] for s in segs])

    nodes = list(a) + list(b)
    nodes += _segment_crossings(a, b)
    nodes = np.asarray(nodes)

    clusters = _cluster_points(nodes, merge_tol_m)
    out = []
    for c in clusters:
        rays = _incident_rays(c, a, b, merge_tol_m)
        if _distinct_directions(rays, angle_tol_deg) >= 3:
            out.append(c)
    if not out:
        return np.zeros((0, 2))
    order = np.lexsort((np.array(out)[:, 0], -np.array(out)[:, 1]))
    return np.asarray(out)[order]


def _segment_crossings(a: np.ndarray, b: np.ndarray) -> list:
    """Proper interior crossing points between all segment pairs."""
    n = len(a)
    lo = np.minimum(a, b)
    hi = np.maximum(a, b)
    out = []
    for i in range(n):
        # Bounding-box prefilter keeps the exact test to overlapping pairs.
        cand = np.nonzero(
            (lo[i + 1 :, 0] <= hi[i, 0]) & (hi[i + 1 :, 0] >= lo[i, 0])
            & (lo[i + 1 :, 1] <= hi[i, 1]) & (hi[i + 1 :, 1] >= lo[i, 1])
        )[0] + i + 1
        for j in cand:
            p = _cross_point(a[i], b[i], a[j], b[j])
            if p is not None:
                out.append(p)
    return out


def _cross_point(p1, p2, p3, p4):
    d1 = p2 - p1
    d2 = p4 - p3
    denom = d1[0] * d2[1] - d1[1] * d2[0]
    if abs(denom) < 1e-12:
        return None
    t = ((p3[0] - p1[0]) * d2[1] - (p3[1] - p1[1]) * d2[0]) / denom
    u = ((p3[0] - p1[0]) * d1[1] - (p3[1] - p1[1]) * d1[0]) / denom
    if 0.0 <= t <= 1.0 and 0.0 <= u <= 1.0:
        return p1 + t * d1
    return None


def _cluster_points(points: np.ndarray, tol: float) -> list:
    """Greedy snap of points within tol of each other; returns cluster means."""
    key = np.round(points / tol).astype(np.int64)
    buckets: dict = {}
    for p, k in zip(points, map(tuple, key)):
        buckets.setdefault(k, []).append(p)
    # Merge adjacent buckets so near-boundary duplicates collapse.
    centers = []
    seen = set()
    for k in sorted(buckets):
        if k in seen:
            continue
        stack = [k]
        group = []
        while stack:
            kk = stack.pop()
            if kk in seen or kk not in buckets:
                continue
            seen.add(kk)
            group.extend(buckets[kk])
            for dx in (-1, 0, 1):
                for dy in (-1, 0, 1):
                    nk = (kk[0] + dx, kk[1] + dy)
                    if nk in buckets and nk not in seen:
                        stack.append(nk)
        centers.append(np.mean(group, axis=0))
    return centers


def _incident_rays(node: np.ndarray, a: np.ndarray, b: np.ndarray, tol: float) -> list:
    """Unit directions of road departures at a node."""
    rays = []
    d2a = np.einsum("ij,ij->i", a - node, a - node)
    d2b = np.einsum("ij,ij->i", b - node, b - node)
    for i in range(len(a)):
        at_a = d2a[i] <= tol * tol
        at_b = d2b[i] <= tol * tol
        if at_a and at_b:
            continue
        if at_a:
            rays.append(b[i] - node)
        elif at_b:
            rays.append(a[i] - node)
        else:
            d2 = _point_segment_sqdist(node[None, :], a[i], b[i])[0]
            if d2 <= tol * tol:
                rays.append(b[i] - a[i])
                rays.append(a[i] - b[i])
    return rays


def _distinct_directions(rays: list, angle_tol_deg: float) -> int:
    if not rays:
        return 0
    angles = sorted(math.atan2(r[0], r[1]) % (2 * math.pi) for r in rays if np.hypot(*r) > 0)
    kept = []
    for t in angles:
        if all(min(abs(t - u), 2 * math.pi - abs(t - u)) > math.radians(angle_tol_deg) for u in kept):
            kept.append(t)
    return len(kept)


# ---------------------------------------------------------------------------
# Synthetic city generation: a perturbed grid street network.
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SyntheticCitySpec:
    """Parameters of a perturbed-grid synthetic city.

    ``irregularity`` in [0, 1] scales three disturbances of the base grid:
    each edge is removed with probability 0.3*irregularity, each cell gains a
    diagonal with probability 0.2*irregularity, and node positions receive
    Gaussian jitter with std 0.12*irregularity*grid_spacing_mean.
    """

    seed: int
    extent_m: float = 2000.0
    grid_spacing_mean: float = 100.0
    grid_spacing_std: float = 0.0
    irregularity: float = 0.3
    road_width_m: float = 7.0

    def __post_init__(self):
        if not 0.0 <= self.irregularity <= 1.0:
            raise ValueError(f"irregularity must be in [0, 1], got {self.irregularity}")
        if self.road_width_m <= 0:
            raise ValueError(f"road_width_m must be > 0, got {self.road_width_m}")
        if self.grid_spacing_mean <= 0:
            raise ValueError(f"grid_spacing_mean must be > 0, got {self.grid_spacing_mean}")

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "extent_m": self.extent_m,
            "grid_spacing_mean": self.grid_spacing_mean,
            "grid_spacing_std": self.grid_spacing_std,
            "irregularity": self.irregularity,
            "road_width_m": self.road_width_m,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SyntheticCitySpec":
        return cls(**d)


CITY_MARGIN_M = 24.0


def default_city_frame(spec: SyntheticCitySpec, meters_per_pixel: float = 1.0):
    """Canonical (GeoTransform, size) raster frame covering a city plus margin."""
    geo = GeoTransform(-CITY_MARGIN_M, spec.extent_m + CITY_MARGIN_M, meters_per_pixel, 0.0)
    size = int(math.ceil((spec.extent_m + 2 * CITY_MARGIN_M) / meters_per_pixel)) + 1
    return geo, size


def _grid_coordinates(rng, extent: float, mean: float, std: float) -> np.ndarray:
    coords = [0.0]
    while coords[-1] < extent - 0.5 * mean:
        step = mean if std == 0 else max(float(rng.normal(mean, std)), 0.3 * mean)
        coords.append(min(coords[-1] + step, extent))
    if extent - coords[-1] > 1e-9:
        coords.append(extent)
    return np.asarray(coords)


def generate_city(spec: SyntheticCitySpec):
    """Perturbed-grid street network.

    Returns (RoadVectorSet, ground_truth) where ground truth intersections are
    exactly the graph nodes with >= 3 incident road directions, positioned in
    the canonical city frame of :func:`default_city_frame`.
    """
    if spec.extent_m < spec.grid_spacing_mean:
        raise CityGenerationError(
            f"extent_m {spec.extent_m} is smaller than grid_spacing_mean {spec.grid_spacing_mean}"
        )
    rng = np.random.default_rng(np.uint64(spec.seed))
    xs = _grid_coordinates(rng, spec.extent_m, spec.grid_spacing_mean, spec.grid_spacing_std)
    ys = _grid_coordinates(rng, spec.extent_m, spec.grid_spacing_mean, spec.grid_spacing_std)
    nx, ny = len(xs), len(ys)
    if nx < 2 or ny < 2:
        raise CityGenerationError("city degenerates to fewer than 2 grid lines")

    nodes = np.stack(np.meshgrid(xs, ys, indexing="ij"), axis=-1).astype(np.float64)
    if spec.irregularity > 0:
        jitter = rng.normal(0.0, 0.12 * spec.irregularity * spec.grid_spacing_mean, size=nodes.shape)
        nodes = nodes + jitter

    edges = []  # pairs of (i, j) node indices
    for i in range(nx):
        for j in range(ny):
            if i + 1 < nx:
                edges.append(((i, j), (i + 1, j)))
            if j + 1 < ny:
                edges.append(((i, j), (i, j + 1)))
    keep = rng.random(len(edges)) >= 0.3 * spec.irregularity
    edges = [e for e, k in zip(edges, keep) if k]

    for i in range(nx - 1):
        for j in range(ny - 1):
            if rng.random() < 0.2 * spec.irregularity:
                if rng.random() < 0.5:
                    edges.append(((i, j), (i + 1, j + 1)))
                else:
                    edges.append(((i + 1, j), (i, j + 1)))

    degree: dict = {}
    segments = []
    for (u, v) in edges:
        pu, pv = nodes[u], nodes[v]
        segments.append(RoadSegment(np.stack([pu, pv]), spec.road_width_m))
        degree[u] = degree.get(u, 0) + 1
        degree[v] = degree.get(v, 0) + 1
    vectors = RoadVectorSet(tuple(segments))

    geo, _ = default_city_frame(spec)
    gt_nodes = [nodes[k] for k in sorted(degree) if degree[k] >= 3]
    order = np.lexsort((
        np.array([p[0] for p in gt_nodes]) if gt_nodes else np.zeros(0),
        np.array([-p[1] for p in gt_nodes]) if gt_nodes else np.zeros(0),
    ))
    ground_truth = []
    for rank, idx in enumerate(order):
        p = gt_nodes[idx]
        px = geo.world_to_pixel(p)
        ground_truth.append(Intersection(rank, (float(px[0]), float(px[1])), (float(p[0]), float(p[1]))))
    return vectors, ground_truth


# ---------------------------------------------------------------------------
# Query perturbation: the stand-in for road detector noise.
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class PerturbationSpec:
    """Noise model applied to a query raster.

    The rigid part (rotation about the raster center plus translation, both in
    pixel space) is returned as the ground-truth transform; jitter, blob and
    pixel dropout model detector error on top of it.
    """

    pixel_dropout: float = 0.05
    blob_dropout_count: float = 3.0
    blob_dropout_radius_px: float = 10.0
    jitter_px: float = 1.0
    rotation_noise_deg: float = 5.0
    translation_noise_px: float = 5.0

    def __post_init__(self):
        if not 0.0 <= self.pixel_dropout <= 1.0:
            raise ValueError(f"pixel_dropout must be in [0, 1], got {self.pixel_dropout}")
        for name in ("blob_dropout_count", "blob_dropout_radius_px", "jitter_px",
                     "rotation_noise_deg", "translation_noise_px"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")

    @classmethod
    def none(cls) -> "PerturbationSpec":
        return cls(0.0, 0.0, 0.0, 0.0, 0.0, 0.0)

    def to_dict(self) -> dict:
        return {
            "pixel_dropout": self.pixel_dropout,
            "blob_dropout_count": self.blob_dropout_count,
            "blob_dropout_radius_px": self.blob_dropout_radius_px,
            "jitter_px": self.jitter_px,
            "rotation_noise_deg": self.rotation_noise_deg,
            "translation_noise_px": self.translation_noise_px,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "PerturbationSpec":
        return cls(**d)


JITTER_CORRELATION_PX = 12.0


def perturb(r: RoadRaster, p: PerturbationSpec, seed: int):
    """Apply the noise model; returns (perturbed raster, true rigid transform).

    The returned transform maps ORIGINAL pixel coordinates to PERTURBED pixel
    coordinates.  The perturbed raster keeps the original georeference: the
    pose offset is exactly what a localization system must recover.
    """
    rng = np.random.default_rng(np.uint64(seed))
    h, w = r.values.shape
    angle = float(rng.normal(0.0, p.rotation_noise_deg)) if p.rotation_noise_deg > 0 else 0.0
    shift = rng.normal(0.0, p.translation_noise_px, size=2) if p.translation_noise_px > 0 else np.zeros(2)
    center = ((w - 1) / 2.0, (h - 1) / 2.0)
    transform = AffineTransform2D.rotation_about(center, angle, translation=tuple(shift))

    values = r.values >= 0.5
    if angle != 0.0 or np.any(shift != 0.0):
        values = _warp_binary(values, transform)

    if p.jitter_px > 0:
        ux = _smooth_noise_field(rng, (h, w), JITTER_CORRELATION_PX) * p.jitter_px
        uy = _smooth_noise_field(rng, (h, w), JITTER_CORRELATION_PX) * p.jitter_px
        gy, gx = np.mgrid[0:h, 0:w]
        sx = np.clip(np.rint(gx - ux).astype(np.int64), 0, w - 1)
        sy = np.clip(np.rint(gy - uy).astype(np.int64), 0, h - 1)
        values = values[sy, sx]

    if p.blob_dropout_count > 0 and p.blob_dropout_radius_px > 0:
        n_blobs = int(rng.poisson(p.blob_dropout_count))
        for _ in range(n_blobs):
            bx = rng.uniform(0, w)
            by = rng.uniform(0, h)
            rad = p.blob_dropout_radius_px
            x0, x1 = max(int(bx - rad) - 1, 0), min(int(bx + rad) + 2, w)
            y0, y1 = max(int(by - rad) - 1, 0), min(int(by + rad) + 2, h)
            if x0 >= x1 or y0 >= y1:
                continue
            yy, xx = np.mgrid[y0:y1, x0:x1]
            disc = (xx - bx) ** 2 + (yy - by) ** 2 <= rad * rad
            region = values[y0:y1, x0:x1].copy()
            region[disc] = False
            values = values.copy()
            values[y0:y1, x0:x1] = region

    if p.pixel_dropout > 0:
        drop = rng.random(values.shape) < p.pixel_dropout
        values = values & ~drop

    return RoadRaster(values.astype(np.float32), r.geo), transform


def _warp_binary(values: np.ndarray, transform: AffineTransform2D) -> np.ndarray:
    """Nearest-neighbor pull-back warp re-binarized at 0.5."""
    h, w = values.shape
    inv = transform.inverse()
    gy, gx = np.mgrid[0:h, 0:w]
    src = inv.apply(np.stack([gx.ravel(), gy.ravel()], axis=1))
    sx = np.rint(src[:, 0]).astype(np.int64)
    sy = np.rint(src[:, 1]).astype(np.int64)
    ok = (sx >= 0) & (sx < w) & (sy >= 0) & (sy < h)
    out = np.zeros(h * w, dtype=bool)
    out[ok] = values[sy[ok], sx[ok]]
    return out.reshape(h, w)


def _smooth_noise_field(rng, shape, correlation_px: float) -> np.ndarray:
    """Gaussian-smoothed white noise rescaled to unit standard deviation."""
    field = rng.standard_normal(shape)
    field = ndimage.gaussian_filter(field, sigma=correlation_px, mode="reflect")
    std = float(field.std())
    if std == 0.0:
        return np.zeros(shape)
    return field / std
