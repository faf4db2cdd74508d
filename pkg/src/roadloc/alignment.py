"""Geometric alignment of two road rasters.

Pipeline: sample spread-out road points on both sides, describe each point by
a log-polar shape context over the other sampled points, propose
correspondences by chi-square nearest neighbors, fit an affine transform with
RANSAC, then score the registered pair by the symmetrized Chamfer distance
computed on Euclidean distance transforms.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from roadloc.geometry import AffineTransform2D, RoadRaster


class SamplingError(ValueError):
    """No road pixels available to sample."""


class ChamferError(ValueError):
    """Chamfer distance undefined (an empty raster was passed)."""


@dataclass(frozen=True)
class RansacConfig:
    iterations: int = 2000
    inlier_threshold_px: float = 3.0
    min_inliers: int = 10
    seed: int = 0

    def __post_init__(self):
        if self.iterations < 1:
            raise ValueError(f"iterations must be >= 1, got {self.iterations}")
        if self.inlier_threshold_px <= 0:
            raise ValueError(f"inlier_threshold_px must be > 0, got {self.inlier_threshold_px}")

    def to_dict(self) -> dict:
        return {
            "iterations": self.iterations,
            "inlier_threshold_px": self.inlier_threshold_px,
            "min_inliers": self.min_inliers,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RansacConfig":
        return cls(**d)


@dataclass(frozen=True)
class AlignConfig:
    n_points: int = 300
    per_point_k: int = 3
    shape_rings: int = 5
    shape_sectors: int = 12
    shape_r_min_px: float = 8.0
    shape_r_max_px: float | None = None  # None: 0.45 * min(raster side)
    det_min: float = 0.5
    det_max: float = 2.0
    sample_pool: int = 4000
    context_metric: str = "chi2"  # or "euclidean"
    ransac: RansacConfig = field(default_factory=RansacConfig)

    def to_dict(self) -> dict:
        d = {
            "n_points": self.n_points,
            "per_point_k": self.per_point_k,
            "shape_rings": self.shape_rings,
            "shape_sectors": self.shape_sectors,
            "shape_r_min_px": self.shape_r_min_px,
            "shape_r_max_px": self.shape_r_max_px,
            "det_min": self.det_min,
            "det_max": self.det_max,
            "sample_pool": self.sample_pool,
            "context_metric": self.context_metric,
            "ransac": self.ransac.to_dict(),
        }
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "AlignConfig":
        d = dict(d)
        if "ransac" in d:
            d["ransac"] = RansacConfig.from_dict(d["ransac"])
        return cls(**d)


@dataclass(frozen=True, eq=False)
class AlignmentResult:
    transform: AffineTransform2D | None
    inlier_count: int
    chamfer: float
    accepted: bool

    def to_json(self) -> dict:
        return {
            "transform": self.transform.to_list() if self.transform is not None else None,
            "inlier_count": self.inlier_count,
            "chamfer": self.chamfer if math.isfinite(self.chamfer) else None,
            "accepted": self.accepted,
        }

    @classmethod
    def from_json(cls, d: dict) -> "AlignmentResult":
        t = d.get("transform")
        chamfer = d.get("chamfer")
        return cls(
            AffineTransform2D.from_list(t) if t is not None else None,
            int(d["inlier_count"]),
            float(chamfer) if chamfer is not None else float("inf"),
            bool(d["accepted"]),
        )


REJECTED = None  # sentinel alias documented for readers of AlignmentResult


# ---------------------------------------------------------------------------
# Road point sampling: greedy farthest-point spread over a seeded pool.
# ---------------------------------------------------------------------------

def sample_road_points(r: RoadRaster, n: int, seed: int, pool_cap: int = 4000) -> np.ndarray:
    """n road-pixel centers spread by greedy max-min selection after a random
    start.  With more than pool_cap road pixels the selection runs on a seeded
    random subsample for speed.  Returns all road pixels when there are fewer
    than n."""
    ys, xs = np.nonzero(r.road_mask())
    if len(xs) == 0:
        raise SamplingError("raster has no road pixels")
    pts = np.stack([xs, ys], axis=1).astype(np.float64)
    if len(pts) <= n:
        return pts
    rng = np.random.default_rng(np.uint64(seed))
    if len(pts) > pool_cap:
        pool_idx = rng.choice(len(pts), size=pool_cap, replace=False)
        pts = pts[np.sort(pool_idx)]
    chosen = np.empty((n, 2))
    first = int(rng.integers(len(pts)))
    chosen[0] = pts[first]
    d2 = np.sum((pts - pts[first]) ** 2, axis=1)
    for i in range(1, n):
        nxt = int(np.argmax(d2))
        chosen[i] = pts[nxt]
        nd2 = np.sum((pts - pts[nxt]) ** 2, axis=1)
        np.minimum(d2, nd2, out=d2)
    return chosen


# ---------------------------------------------------------------------------
# Shape contexts in the absolute (north-anchored) frame.
# ---------------------------------------------------------------------------

def shape_context(points: np.ndarray, at, r_min: float, r_max: float,
                  rings: int = 5, sectors: int = 12) -> np.ndarray:
    """Log-polar histogram of the positions of ``points`` relative to ``at``,
    normalized to sum 1 (all-zero if nothing falls in [r_min, r_max])."""
    pts = np.asarray(points, dtype=np.float64)
    at = np.asarray(at, dtype=np.float64)
    rel = pts - at
    dist = np.hypot(rel[:, 0], rel[:, 1])
    keep = (dist >= r_min) & (dist <= r_max) & (dist > 0)
    if not keep.any():
        return np.zeros(rings * sectors)
    rel = rel[keep]
    dist = dist[keep]
    log_span = math.log(r_max / r_min)
    ring_idx = np.clip((np.log(dist / r_min) / log_span * rings).astype(np.int64), 0, rings - 1)
    # Pixel frame is north-up: bearing 0 points up (-y), growing clockwise.
    bearing = np.degrees(np.arctan2(rel[:, 0], -rel[:, 1])) % 360.0
    sector_idx = (bearing // (360.0 / sectors)).astype(np.int64) % sectors
    hist = np.bincount(ring_idx * sectors + sector_idx, minlength=rings * sectors).astype(np.float64)
    return hist / hist.sum()


def _shape_contexts_all(points: np.ndarray, r_min: float, r_max: float,
                        rings: int, sectors: int) -> np.ndarray:
    """Shape context of every point against all the others, vectorized."""
    pts = np.asarray(points, dtype=np.float64)
    n = len(pts)
    rel = pts[None, :, :] - pts[:, None, :]
    dist = np.hypot(rel[..., 0], rel[..., 1])
    keep = (dist >= r_min) & (dist <= r_max) & (dist > 0)
    log_span = math.log(r_max / r_min)
    with np.errstate(divide="ignore", invalid="ignore"):
        ring_idx = np.clip((np.log(np.where(dist > 0, dist, 1.0) / r_min) / log_span * rings)
                           .astype(np.int64), 0, rings - 1)
    bearing = np.degrees(np.arctan2(rel[..., 0], -rel[..., 1])) % 360.0
    sector_idx = (bearing // (360.0 / sectors)).astype(np.int64) % sectors
    nbins = rings * sectors
    flat_bin = ring_idx * sectors + sector_idx
    row = np.broadcast_to(np.arange(n)[:, None], (n, n))
    hist = np.bincount((row * nbins + flat_bin)[keep], minlength=n * nbins).astype(np.float64)
    hist = hist.reshape(n, nbins)
    sums = hist.sum(axis=1, keepdims=True)
    np.divide(hist, sums, out=hist, where=sums > 0)
    return hist


def chi2_distances(h1: np.ndarray, h2: np.ndarray, eps: float = 1e-10) -> np.ndarray:
    """Chi-square histogram distances, shape (len(h1), len(h2))."""
    a = np.asarray(h1, dtype=np.float64)
    b = np.asarray(h2, dtype=np.float64)
    out = np.empty((len(a), len(b)))
    chunk = max(1, 4_000_000 // max(b.size, 1))
    for s in range(0, len(a), chunk):
        aa = a[s : s + chunk, None, :]
        num = aa - b[None]
        np.square(num, out=num)
        den = aa + b[None]
        den += eps
        num /= den
        out[s : s + chunk] = num.sum(axis=2)
    out *= 0.5
    return out


def propose_correspondences(src_points, src_contexts, dst_points, dst_contexts,
                            per_point_k: int = 3, metric: str = "chi2"):
    """For every source point, its per_point_k nearest destination contexts.
    Returns (src_xy, dst_xy) arrays of matched coordinates."""
    if len(src_points) == 0 or len(dst_points) == 0:
        raise ValueError("both point sets must be nonempty")
    if metric == "chi2":
        d = chi2_distances(src_contexts, dst_contexts)
    elif metric == "euclidean":
        diff = np.asarray(src_contexts)[:, None, :] - np.asarray(dst_contexts)[None, :, :]
        d = np.einsum("ijk,ijk->ij", diff, diff)
    else:
        raise ValueError(f"unknown context metric {metric!r}")
    k = min(per_point_k, d.shape[1])
    nearest = np.argpartition(d, k - 1, axis=1)[:, :k]
    # Order each row by distance for reproducibility.
    rows = np.arange(d.shape[0])[:, None]
    order = np.argsort(d[rows, nearest], axis=1, kind="stable")
    nearest = nearest[rows, order]
    src_idx = np.repeat(np.arange(len(src_points)), k)
    dst_idx = nearest.ravel()
    return np.asarray(src_points)[src_idx], np.asarray(dst_points)[dst_idx]


# ---------------------------------------------------------------------------
# RANSAC affine estimation.
# ---------------------------------------------------------------------------

def _fit_affine_lstsq(src: np.ndarray, dst: np.ndarray) -> AffineTransform2D:
    a = np.hstack([src, np.ones((len(src), 1))])
    sol, *_ = np.linalg.lstsq(a, dst, rcond=None)
    return AffineTransform2D(sol.T)


def ransac_affine(src: np.ndarray, dst: np.ndarray, cfg: RansacConfig):
    """Robust affine fit from correspondences.

    Per iteration: 3 non-collinear pairs give an exact affine; inliers are
    counted under the reprojection threshold; the best model is refit by least
    squares on its inliers (and inliers recounted under the refit model).
    Returns (AffineTransform2D | None, inlier index array).
    """
    src = np.asarray(src, dtype=np.float64)
    dst = np.asarray(dst, dtype=np.float64)
    n = len(src)
    if n < 3:
        raise ValueError(f"RANSAC needs >= 3 correspondences, got {n}")
    rng = np.random.default_rng(np.uint64(cfg.seed))
    idx = rng.integers(0, n, size=(cfg.iterations, 3))
    distinct = (idx[:, 0] != idx[:, 1]) & (idx[:, 0] != idx[:, 2]) & (idx[:, 1] != idx[:, 2])

    s = src[idx]  # (B, 3, 2)
    d = dst[idx]
    area2 = np.abs(
        (s[:, 1, 0] - s[:, 0, 0]) * (s[:, 2, 1] - s[:, 0, 1])
        - (s[:, 1, 1] - s[:, 0, 1]) * (s[:, 2, 0] - s[:, 0, 0])
    )
    ok = distinct & (area2 > 1e-9)
    if not ok.any():
        return None, np.zeros(0, dtype=np.int64)

    design = np.concatenate([s[ok], np.ones((int(ok.sum()), 3, 1))], axis=2)  # (B', 3, 3)
    params = np.linalg.solve(design, d[ok])  # (B', 3, 2): rows [a11 a21; a12 a22; tx ty]
    thr2 = cfg.inlier_threshold_px ** 2
    src_h = np.hstack([src, np.ones((n, 1))]).astype(np.float32)
    params32 = params.astype(np.float32)
    dst32 = dst.astype(np.float32)

    def _counts(model_sel, point_sel):
        proj = np.einsum("nk,bkj->bnj", src_h[point_sel], params32[model_sel])
        res2 = np.sum((proj - dst32[point_sel][None]) ** 2, axis=2)
        return (res2 <= thr2).sum(axis=1)

    # Two-phase scoring keeps the full-residual pass to a handful of models:
    # all models score a fixed subsample, finalists score every correspondence.
    if n > 240:
        sub = np.linspace(0, n - 1, 160).astype(np.int64)
        coarse = _counts(slice(None), sub)
        finalists = np.argsort(coarse)[::-1][:40]
    else:
        finalists = np.arange(params.shape[0])
    counts = _counts(finalists, slice(None))
    best_local = int(np.argmax(counts))
    if counts[best_local] < max(cfg.min_inliers, 3):
        return None, np.zeros(0, dtype=np.int64)
    best_params = params[finalists[best_local]]

    best_res = np.sum((np.hstack([src, np.ones((n, 1))]) @ best_params - dst) ** 2, axis=1)
    inl = np.nonzero(best_res <= thr2)[0]
    if len(inl) < 3:
        return None, np.zeros(0, dtype=np.int64)
    refit = _fit_affine_lstsq(src[inl], dst[inl])
    final_res = np.sum((refit.apply(src) - dst) ** 2, axis=1)
    final_inl = np.nonzero(final_res <= thr2)[0]
    if len(final_inl) < cfg.min_inliers:
        return None, np.zeros(0, dtype=np.int64)
    return refit, final_inl


# ---------------------------------------------------------------------------
# Distance transform, Chamfer distance, raster warping.
# ---------------------------------------------------------------------------

def distance_transform(r) -> np.ndarray:
    """Exact per-pixel Euclidean distance (in pixels) to the nearest road
    pixel.  A raster with no road pixels yields +inf everywhere."""
    values = r.values if isinstance(r, RoadRaster) else np.asarray(r)
    road = values >= 0.5
    if not road.any():
        return np.full(values.shape, np.inf)
    return ndimage.distance_transform_edt(~road)


def chamfer(a: RoadRaster, b: RoadRaster) -> float:
    """Symmetrized Chamfer distance in pixels between two equally sized
    binary rasters."""
    if a.values.shape != b.values.shape:
        raise ValueError(f"raster shapes differ: {a.values.shape} vs {b.values.shape}")
    mask_a = a.road_mask()
    mask_b = b.road_mask()
    if not mask_a.any() or not mask_b.any():
        raise ChamferError("chamfer distance needs road pixels on both sides")
    edt_a = distance_transform(a)
    edt_b = distance_transform(b)
    return 0.5 * (float(edt_b[mask_a].mean()) + float(edt_a[mask_b].mean()))


def warp_raster(source: RoadRaster, transform: AffineTransform2D, out_shape,
                out_geo=None) -> RoadRaster:
    """Resample ``source`` under ``transform`` (source px -> target px) into a
    target raster: nearest-neighbor pull-back, re-binarized at 0.5."""
    h, w = out_shape
    inv = transform.inverse()
    gy, gx = np.mgrid[0:h, 0:w]
    src = inv.apply(np.stack([gx.ravel(), gy.ravel()], axis=1))
    sx = np.rint(src[:, 0]).astype(np.int64)
    sy = np.rint(src[:, 1]).astype(np.int64)
    ok = (sx >= 0) & (sx < source.width) & (sy >= 0) & (sy < source.height)
    out = np.zeros(h * w, dtype=np.float32)
    vals = np.asarray(source.values) >= 0.5
    out[ok] = vals[sy[ok], sx[ok]].astype(np.float32)
    return RoadRaster(out.reshape(h, w), out_geo if out_geo is not None else source.geo)


# ---------------------------------------------------------------------------
# Full alignment of a query raster onto a reference raster.
# ---------------------------------------------------------------------------

def _centerline_points(raster: RoadRaster) -> np.ndarray:
    """(n, 2) pixel coordinates of road-depth ridge pixels (the centerline
    band of each road)."""
    road = raster.road_mask()
    if not road.any():
        return np.zeros((0, 2))
    depth = ndimage.distance_transform_edt(road)
    p = np.pad(depth, 1)
    c = p[1:-1, 1:-1]
    horiz = (c >= p[1:-1, :-2]) & (c >= p[1:-1, 2:])
    vert = (c >= p[:-2, 1:-1]) & (c >= p[2:, 1:-1])
    ys, xs = np.nonzero(road & (horiz | vert))
    return np.stack([xs, ys], axis=1).astype(np.float64)


def _icp_polish(transform: AffineTransform2D, query: RoadRaster, reference: RoadRaster,
                threshold_px: float, min_pairs: int, seed: int, max_points: int = 1500):
    """Refine an affine fit by matching query road centerline pixels to the
    nearest reference centerline pixel under the current model and refitting
    least squares.  The match gate shrinks coarse-to-fine so edge points stay
    in the fit while residual scale or rotation error is still large.
    Returns (transform, pair count); falls back to the input model when the
    match set degenerates."""
    src = _centerline_points(query)
    ref_center = _centerline_points(reference)
    if len(src) < max(min_pairs, 3) or len(ref_center) < max(min_pairs, 3):
        return transform, 0
    if len(src) > max_points:
        rng = np.random.default_rng(np.uint64(seed))
        src = src[np.sort(rng.choice(len(src), size=max_points, replace=False))]
    ref_mask = np.zeros(reference.values.shape, dtype=bool)
    ref_mask[ref_center[:, 1].astype(np.int64), ref_center[:, 0].astype(np.int64)] = True
    _, nearest = ndimage.distance_transform_edt(~ref_mask, return_indices=True)
    h, w = reference.values.shape
    best = transform
    count = 0
    factors = (4.0, 3.0, 2.0, 1.5) + (1.0,) * 30
    for factor in factors:
        thr2 = (factor * threshold_px) ** 2
        mapped = best.apply(src)
        xi = np.clip(np.rint(mapped[:, 0]).astype(np.int64), 0, w - 1)
        yi = np.clip(np.rint(mapped[:, 1]).astype(np.int64), 0, h - 1)
        tgt = np.stack([nearest[1, yi, xi], nearest[0, yi, xi]], axis=1).astype(np.float64)
        res2 = np.sum((mapped - tgt) ** 2, axis=1)
        keep = res2 <= thr2
        if keep.sum() < max(min_pairs, 3):
            break
        try:
            refit = _fit_affine_lstsq(src[keep], tgt[keep])
        except np.linalg.LinAlgError:
            break
        if not np.all(np.isfinite(refit.matrix)):
            break
        delta = float(np.max(np.abs(refit.matrix - best.matrix)))
        best = refit
        count = int(keep.sum())
        if factor == 1.0 and delta < 1e-4:
            break
    return best, count


@dataclass(frozen=True, eq=False)
class AlignmentSide:
    """Sampled points plus shape contexts of one raster, reusable across the
    alignments this raster participates in."""

    raster: RoadRaster
    points: np.ndarray
    contexts: np.ndarray
    edt: np.ndarray


def _context_radius(cfg: AlignConfig, raster: RoadRaster) -> float:
    if cfg.shape_r_max_px is not None:
        return cfg.shape_r_max_px
    return 0.45 * min(raster.values.shape)


def prepare_alignment_side(raster: RoadRaster, cfg: AlignConfig, seed: int) -> AlignmentSide:
    """Sample spread road points and compute their shape contexts once."""
    pts = sample_road_points(raster, cfg.n_points, seed=seed, pool_cap=cfg.sample_pool)
    r_max = _context_radius(cfg, raster)
    ctx = _shape_contexts_all(pts, cfg.shape_r_min_px, r_max, cfg.shape_rings, cfg.shape_sectors)
    return AlignmentSide(raster, pts, ctx, distance_transform(raster))


def align_prepared(query_side: AlignmentSide, reference_side: AlignmentSide,
                   cfg: AlignConfig, seed: int) -> AlignmentResult:
    pairs_src, pairs_dst = propose_correspondences(
        query_side.points, query_side.contexts,
        reference_side.points, reference_side.contexts,
        cfg.per_point_k, cfg.context_metric,
    )
    if len(pairs_src) < 3:
        return AlignmentResult(None, 0, float("inf"), False)
    ransac_cfg = RansacConfig(cfg.ransac.iterations, cfg.ransac.inlier_threshold_px,
                              cfg.ransac.min_inliers, seed + 2)
    transform, inliers = ransac_affine(pairs_src, pairs_dst, ransac_cfg)
    if transform is None:
        return AlignmentResult(None, 0, float("inf"), False)
    query, reference = query_side.raster, reference_side.raster
    transform, polished = _icp_polish(transform, query, reference,
                                      cfg.ransac.inlier_threshold_px, cfg.ransac.min_inliers,
                                      seed=seed + 3)
    support = max(polished, 0) or len(inliers)
    if support < cfg.ransac.min_inliers:
        return AlignmentResult(transform, support, float("inf"), False)
    det = abs(transform.det)
    if not cfg.det_min <= det <= cfg.det_max:
        return AlignmentResult(transform, support, float("inf"), False)
    registered = warp_raster(query, transform, reference.values.shape, reference.geo)
    mask = registered.road_mask()
    if not mask.any():
        return AlignmentResult(transform, support, float("inf"), False)
    score = 0.5 * (float(reference_side.edt[mask].mean())
                   + float(distance_transform(registered)[reference.road_mask()].mean()))
    return AlignmentResult(transform, support, score, True)


def align(query: RoadRaster, reference: RoadRaster, cfg: AlignConfig,
          seed: int | None = None) -> AlignmentResult:
    """Estimate the affine registration of ``query`` onto ``reference`` and
    score it by the Chamfer distance of the registered pair.  A failed or
    degenerate fit comes back rejected with chamfer = +inf."""
    seed = cfg.ransac.seed if seed is None else seed
    if (_context_radius(cfg, query) != _context_radius(cfg, reference)
            and cfg.shape_r_max_px is None):
        r_max = 0.45 * min(min(query.values.shape), min(reference.values.shape))
        cfg = AlignConfig(**{**cfg.to_dict(), "shape_r_max_px": r_max,
                             "ransac": cfg.ransac})
    try:
        query_side = prepare_alignment_side(query, cfg, seed=seed)
        reference_side = prepare_alignment_side(reference, cfg, seed=seed + 1)
    except SamplingError:
        return AlignmentResult(None, 0, float("inf"), False)
    return align_prepared(query_side, reference_side, cfg, seed=seed)


def save_alignment_json(result: AlignmentResult, path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        json.dump(result.to_json(), f, indent=2, sort_keys=True)
        f.write("\n")
