"""End-to-end geolocalization and road enhancement.

For every intersection detected in a query raster: gather its region, shortlist
the k best reference intersections by region distance, align the query region
onto each shortlisted reference region, and keep the accepted alignment with
the smallest Chamfer distance.  The chosen alignment also drives the road
enhancement step, which fuses the registered reference roads into the
estimated road map.
"""

from __future__ import annotations

import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from roadloc.alignment import (
    AlignConfig,
    AlignmentResult,
    AlignmentSide,
    align_prepared,
    distance_transform,
    prepare_alignment_side,
    warp_raster,
)
from roadloc.descriptors import (
    DEFAULT_INNER_RADIUS_M,
    DEFAULT_RINGS,
    DEFAULT_SECTORS,
    DiagonalMetric,
    IntersectionIndex,
    extract_descriptor,
)
from roadloc.detect import DetectionConfig, detect_intersections
from roadloc.geometry import (
    EmptyRegionError,
    GeoTransform,
    Intersection,
    RoadRaster,
    crop_region,
)
from roadloc.ingest import derive_intersections, rasterize
from roadloc.region_match import RegionDescriptorError, candidates, gather_region


@dataclass(frozen=True)
class DescriptorConfig:
    radius_m: float = 60.0
    rings: int = DEFAULT_RINGS
    sectors: int = DEFAULT_SECTORS
    inner_radius_m: float = DEFAULT_INNER_RADIUS_M

    def to_dict(self) -> dict:
        return {
            "radius_m": self.radius_m,
            "rings": self.rings,
            "sectors": self.sectors,
            "inner_radius_m": self.inner_radius_m,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DescriptorConfig":
        return cls(**d)


@dataclass(frozen=True)
class PipelineConfig:
    radius_m: float = 300.0
    k: int = 5
    use_alignment: bool = True
    normalized_sums: bool = False
    seed: int = 0
    workers: int | None = None  # None: one thread per available core
    detection: DetectionConfig = field(default_factory=DetectionConfig)
    descriptor: DescriptorConfig = field(default_factory=DescriptorConfig)
    alignment: AlignConfig = field(default_factory=AlignConfig)

    def to_dict(self) -> dict:
        return {
            "radius_m": self.radius_m,
            "k": self.k,
            "use_alignment": self.use_alignment,
            "normalized_sums": self.normalized_sums,
            "seed": self.seed,
            "workers": self.workers,
            "detection": self.detection.to_dict(),
            "descriptor": self.descriptor.to_dict(),
            "alignment": self.alignment.to_dict(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "PipelineConfig":
        d = dict(d)
        if "detection" in d:
            d["detection"] = DetectionConfig.from_dict(d["detection"])
        if "descriptor" in d:
            d["descriptor"] = DescriptorConfig.from_dict(d["descriptor"])
        if "alignment" in d:
            d["alignment"] = AlignConfig.from_dict(d["alignment"])
        return cls(**d)


@dataclass(frozen=True, eq=False)
class LocalizationResult:
    query_id: int
    query_pixel: tuple
    localized: bool
    reference_id: int | None = None
    transform: object = None
    chamfer: float = float("inf")
    world_estimate: tuple | None = None
    error_m: float | None = None
    candidates_considered: int = 0
    skipped_references: int = 0

    def to_json(self) -> dict:
        return {
            "query_id": self.query_id,
            "query_pixel": list(self.query_pixel),
            "localized": self.localized,
            "reference_id": self.reference_id,
            "transform": self.transform.to_list() if self.transform is not None else None,
            "chamfer": self.chamfer if math.isfinite(self.chamfer) else None,
            "world_estimate": list(self.world_estimate) if self.world_estimate else None,
            "error_m": self.error_m,
            "candidates_considered": self.candidates_considered,
            "skipped_references": self.skipped_references,
        }


# ---------------------------------------------------------------------------
# Reference database: rasters plus the descriptor index over their
# intersections.
# ---------------------------------------------------------------------------

@dataclass(eq=False)
class ReferenceDatabase:
    rasters: list
    index: IntersectionIndex

    def raster_for(self, world_pos) -> RoadRaster:
        for r in self.rasters:
            if r.contains_world(world_pos):
                return r
        raise EmptyRegionError(f"no reference raster covers world position {tuple(world_pos)}")

    def position_of(self, ref_id: int) -> np.ndarray:
        where = np.nonzero(self.index.ids == ref_id)[0]
        if len(where) == 0:
            raise KeyError(f"reference id {ref_id} not in index")
        return self.index.positions[where[0]]


REFERENCE_MARGIN_M = 24.0


def reference_frame_for_vectors(vectors, meters_per_pixel: float = 1.0):
    """Raster frame covering a vector set plus margin."""
    e0, n0, e1, n1 = vectors.bounds()
    geo = GeoTransform(e0 - REFERENCE_MARGIN_M, n1 + REFERENCE_MARGIN_M, meters_per_pixel, 0.0)
    width = int(math.ceil((e1 - e0 + 2 * REFERENCE_MARGIN_M) / meters_per_pixel)) + 1
    height = int(math.ceil((n1 - n0 + 2 * REFERENCE_MARGIN_M) / meters_per_pixel)) + 1
    return geo, (width, height)


def build_reference_database(vector_sets, descriptor: DescriptorConfig | None = None,
                             meters_per_pixel: float = 1.0, metric_margin: float = 1.0,
                             intersections_per_set=None) -> ReferenceDatabase:
    """Rasterize each vector set, locate its intersections (from the provided
    lists or derived from the vector geometry) and extract their descriptors.
    Ids are assigned globally in raster order."""
    descriptor = descriptor or DescriptorConfig()
    rasters = []
    ids = []
    positions = []
    descs = []
    next_id = 0
    for set_idx, vectors in enumerate(vector_sets):
        geo, size = reference_frame_for_vectors(vectors, meters_per_pixel)
        raster = rasterize(vectors, geo, size)
        rasters.append(raster)
        if intersections_per_set is not None:
            world_points = np.asarray(intersections_per_set[set_idx], dtype=np.float64)
        else:
            world_points = derive_intersections(vectors)
        for p in world_points:
            px = geo.world_to_pixel(p)
            inter = Intersection(next_id, (float(px[0]), float(px[1])), (float(p[0]), float(p[1])))
            d = extract_descriptor(raster, inter, descriptor.radius_m, descriptor.rings,
                                   descriptor.sectors, descriptor.inner_radius_m)
            ids.append(next_id)
            positions.append(tuple(p))
            descs.append(d)
            next_id += 1
    if not ids:
        raise ValueError("no reference intersections found in any vector set")
    index = IntersectionIndex(
        np.asarray(ids, dtype=np.int64),
        np.asarray(positions),
        np.stack(descs),
        DiagonalMetric.unit(descs[0].shape[0], metric_margin),
    )
    return ReferenceDatabase(rasters, index)


# ---------------------------------------------------------------------------
# Geolocalization (shortlist, align, re-rank by Chamfer distance).
# ---------------------------------------------------------------------------

class _ReferenceSideCache:
    """Per (reference id, radius) cache of cropped regions and their prepared
    alignment side.  Values are pure functions of the database and config, so
    concurrent duplicate computation is harmless."""

    def __init__(self, db: ReferenceDatabase, cfg: PipelineConfig):
        self.db = db
        self.cfg = cfg
        self._sides: dict = {}

    def get(self, ref_id: int):
        key = ref_id
        side = self._sides.get(key)
        if side is None:
            pos = self.db.position_of(ref_id)
            raster = self.db.raster_for(pos)
            crop = crop_region(raster, pos, self.cfg.radius_m)
            side = prepare_alignment_side(crop, self._align_cfg(crop), seed=self.cfg.seed + 1)
            self._sides[key] = side
        return side

    def _align_cfg(self, crop) -> AlignConfig:
        return _fixed_radius_align_cfg(self.cfg.alignment, self.cfg.radius_m,
                                       crop.geo.meters_per_pixel)


def _fixed_radius_align_cfg(cfg: AlignConfig, radius_m: float, mpp: float) -> AlignConfig:
    """Pin the shape-context outer radius so query and reference sides bin
    identically regardless of crop rounding."""
    if cfg.shape_r_max_px is not None:
        return cfg
    r_max = 0.45 * (2.0 * radius_m / mpp)
    return AlignConfig(**{**cfg.to_dict(), "shape_r_max_px": r_max, "ransac": cfg.ransac})


def attach_query_descriptors(query_raster: RoadRaster, detections, cfg: PipelineConfig):
    out = []
    for det in detections:
        d = extract_descriptor(query_raster, det, cfg.descriptor.radius_m, cfg.descriptor.rings,
                               cfg.descriptor.sectors, cfg.descriptor.inner_radius_m)
        out.append(det.with_descriptor(d))
    return out


def geolocalize(query_raster: RoadRaster, db: ReferenceDatabase, cfg: PipelineConfig,
                metric: DiagonalMetric | None = None,
                query_intersections=None) -> list:
    """Localize every (detected) query intersection against the reference
    database.  Returns LocalizationResults sorted by query id; queries whose
    candidates were all rejected come back flagged unlocalized."""
    metric = metric or db.index.metric
    if query_intersections is None:
        query_intersections = detect_intersections(query_raster, cfg.detection)
    if not query_intersections:
        return []
    if query_intersections[0].descriptor is None:
        query_intersections = attach_query_descriptors(query_raster, query_intersections, cfg)

    align_cfg = _fixed_radius_align_cfg(cfg.alignment, cfg.radius_m,
                                        query_raster.geo.meters_per_pixel)
    cache = _ReferenceSideCache(db, cfg)

    def one(query: Intersection) -> LocalizationResult:
        try:
            region = gather_region(query_intersections, query, cfg.radius_m)
            shortlist = candidates(region, db.index, cfg.radius_m, cfg.k, metric,
                                   cfg.normalized_sums)
        except (RegionDescriptorError, ValueError):
            return LocalizationResult(query.id, query.pixel_pos, False)
        if not cfg.use_alignment:
            ref_id = shortlist.entries[0][0]
            pos = db.position_of(ref_id)
            return LocalizationResult(
                query.id, query.pixel_pos, True, ref_id, None, float("nan"),
                (float(pos[0]), float(pos[1])), None,
                len(shortlist.entries), shortlist.skipped,
            )
        try:
            query_crop = crop_region(query_raster, query.world_pos, cfg.radius_m)
            query_side = prepare_alignment_side(query_crop, align_cfg,
                                                seed=cfg.seed + 1000 + query.id)
        except (EmptyRegionError, ValueError):
            return LocalizationResult(query.id, query.pixel_pos, False,
                                      candidates_considered=len(shortlist.entries),
                                      skipped_references=shortlist.skipped)
        best: tuple | None = None
        for ref_id, _rd in shortlist.entries:
            ref_side = cache.get(ref_id)
            result = align_prepared(query_side, ref_side, align_cfg,
                                    seed=cfg.seed + 7 * query.id + ref_id)
            if result.accepted and (best is None or (result.chamfer, ref_id) < best[:2]):
                best = (result.chamfer, ref_id, result, ref_side)
        if best is None:
            return LocalizationResult(query.id, query.pixel_pos, False,
                                      candidates_considered=len(shortlist.entries),
                                      skipped_references=shortlist.skipped)
        chamfer_val, ref_id, result, ref_side = best
        center_in_crop = query_crop.geo.world_to_pixel(query.world_pos)
        mapped = result.transform.apply(center_in_crop)
        est = ref_side.raster.geo.pixel_to_world(mapped)
        return LocalizationResult(
            query.id, query.pixel_pos, True, ref_id, result.transform, chamfer_val,
            (float(est[0]), float(est[1])), None,
            len(shortlist.entries), shortlist.skipped,
        )

    workers = cfg.workers
    if workers is None:
        import os
        workers = os.cpu_count() or 1
    if workers <= 1 or len(query_intersections) <= 1:
        results = [one(q) for q in query_intersections]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(one, query_intersections))
    return sorted(results, key=lambda r: r.query_id)


def save_results_json(results, path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        json.dump([r.to_json() for r in results], f, indent=2, sort_keys=True)
        f.write("\n")


def save_results_csv(results, path) -> None:
    import csv
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["query_id", "localized", "reference_id", "chamfer",
                    "east_m", "north_m", "error_m"])
        for r in results:
            w.writerow([
                r.query_id, int(r.localized),
                r.reference_id if r.reference_id is not None else "",
                f"{r.chamfer:.6f}" if math.isfinite(r.chamfer) else "",
                f"{r.world_estimate[0]:.4f}" if r.world_estimate else "",
                f"{r.world_estimate[1]:.4f}" if r.world_estimate else "",
                f"{r.error_m:.4f}" if r.error_m is not None else "",
            ])


# ---------------------------------------------------------------------------
# Road enhancement: fuse the aligned reference into the estimated road map.
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class EnhanceConfig:
    dilation_radius_px: float = 4.0
    gaussian_sigma_px: float = 1.0
    ridge_floor: float = 0.05

    def to_dict(self) -> dict:
        return {
            "dilation_radius_px": self.dilation_radius_px,
            "gaussian_sigma_px": self.gaussian_sigma_px,
            "ridge_floor": self.ridge_floor,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "EnhanceConfig":
        return cls(**d)


def _ridge_thin(smoothed: np.ndarray, floor: float) -> np.ndarray:
    """Directional non-maximum suppression: keep pixels that dominate both
    neighbors along one of the four principal directions."""
    p = np.pad(smoothed, 1)
    c = p[1:-1, 1:-1]
    keep = np.zeros_like(c, dtype=bool)
    shifts = (((0, 1), (2, 1)), ((1, 0), (1, 2)), ((0, 0), (2, 2)), ((0, 2), (2, 0)))
    h, w = c.shape
    for (ay, ax), (by, bx) in shifts:
        na = p[ay : ay + h, ax : ax + w]
        nb = p[by : by + h, bx : bx + w]
        keep |= (c > na) & (c >= nb)
        keep_rev = (c >= na) & (c > nb)
        keep |= keep_rev
    return keep & (c > floor)


def _median_half_width(road: np.ndarray) -> float:
    """Half road width estimated from distance-transform maxima along the
    road skeleton ridge."""
    if not road.any():
        return 0.0
    depth = ndimage.distance_transform_edt(road)
    p = np.pad(depth, 1)
    c = p[1:-1, 1:-1]
    horiz = (c >= p[1:-1, :-2]) & (c >= p[1:-1, 2:])
    vert = (c >= p[:-2, 1:-1]) & (c >= p[2:, 1:-1])
    ridge = road & (horiz | vert)
    if not ridge.any():
        return float(np.median(depth[road]))
    return float(np.median(depth[ridge]))


def enhance_roads(estimated: RoadRaster, aligned_reference: RoadRaster,
                  cfg: EnhanceConfig | None = None) -> RoadRaster:
    """Three-step road map cleanup against a registered reference map:
    soft-dilate the estimate and gate the reference with it, Gaussian-smooth
    and thin the product to centerlines, then dilate back to the estimate's
    median road width."""
    cfg = cfg or EnhanceConfig()
    if estimated.values.shape != aligned_reference.values.shape:
        raise ValueError("estimated and reference rasters must share dimensions")
    est_road = estimated.road_mask()
    if est_road.any():
        soft = np.clip(1.0 - distance_transform(estimated) / cfg.dilation_radius_px, 0.0, 1.0)
    else:
        soft = np.zeros(estimated.values.shape)
    product = soft * np.asarray(aligned_reference.values, dtype=np.float64)
    smoothed = ndimage.gaussian_filter(product, sigma=cfg.gaussian_sigma_px)
    thinned = _ridge_thin(smoothed, cfg.ridge_floor)
    if not thinned.any():
        return RoadRaster(np.zeros(estimated.values.shape, dtype=np.float32), estimated.geo)
    half_width = _median_half_width(est_road)
    if half_width <= 0.5:
        return RoadRaster(thinned.astype(np.float32), estimated.geo)
    dist = ndimage.distance_transform_edt(~thinned)
    out = dist <= (half_width - 0.5)
    return RoadRaster(out.astype(np.float32), estimated.geo)


def registered_reference(query_crop: RoadRaster, ref_side_raster: RoadRaster,
                         result: AlignmentResult) -> RoadRaster:
    """Warp the reference region into the query crop frame using an accepted
    alignment (the inverse of its query->reference transform)."""
    if not result.accepted or result.transform is None:
        raise ValueError("registered_reference needs an accepted alignment")
    return warp_raster(ref_side_raster, result.transform.inverse(),
                       query_crop.values.shape, query_crop.geo)
