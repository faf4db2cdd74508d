"""Intersection detection on binary road rasters.

The detector skeletonizes the roads (Zhang-Suen thinning), scores candidate
locations on a sparse grid by counting distinct skeleton branches crossing a
window boundary, densifies the score map by bilinear interpolation and runs
greedy non-maxima suppression with quadratic sub-pixel refinement.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

from roadloc.geometry import GeoTransform, Intersection, RoadRaster, make_intersection


@dataclass(frozen=True)
class DetectionConfig:
    grid_stride_px: int = 10
    nms_radius_px: float = 15.0
    score_threshold: float = 0.5
    branch_window_px: int = 12

    def __post_init__(self):
        if self.grid_stride_px < 1:
            raise ValueError(f"grid_stride_px must be >= 1, got {self.grid_stride_px}")
        if self.nms_radius_px <= 0:
            raise ValueError(f"nms_radius_px must be > 0, got {self.nms_radius_px}")
        if not 0.0 <= self.score_threshold <= 1.0:
            raise ValueError(f"score_threshold must be in [0, 1], got {self.score_threshold}")
        if self.branch_window_px < 2:
            raise ValueError(f"branch_window_px must be >= 2, got {self.branch_window_px}")

    def to_dict(self) -> dict:
        return {
            "grid_stride_px": self.grid_stride_px,
            "nms_radius_px": self.nms_radius_px,
            "score_threshold": self.score_threshold,
            "branch_window_px": self.branch_window_px,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DetectionConfig":
        return cls(**d)


@dataclass(frozen=True, eq=False)
class ScoreMap:
    values: np.ndarray
    geo: GeoTransform
    grid_stride_px: int = 1

    def __post_init__(self):
        v = np.ascontiguousarray(np.asarray(self.values, dtype=np.float32))
        v.flags.writeable = False
        object.__setattr__(self, "values", v)


# ---------------------------------------------------------------------------
# Zhang-Suen thinning.
# ---------------------------------------------------------------------------

def _neighbors(img: np.ndarray):
    """The 8 neighbors p2..p9 (N, NE, E, SE, S, SW, W, NW) of every pixel."""
    z = np.zeros_like(img)
    p = np.pad(img, 1)
    n = p[0:-2, 1:-1]
    ne = p[0:-2, 2:]
    e = p[1:-1, 2:]
    se = p[2:, 2:]
    s = p[2:, 1:-1]
    sw = p[2:, 0:-2]
    w = p[1:-1, 0:-2]
    nw = p[0:-2, 0:-2]
    return n, ne, e, se, s, sw, w, nw


def skeletonize(r: RoadRaster) -> RoadRaster:
    """One-pixel-wide topology-preserving skeleton via Zhang-Suen thinning.

    Each pass removes boundary pixels p with 2 <= B(p) <= 6 neighbors, exactly
    one 0->1 transition around the 8-ring, and the dual 3-neighbor conditions
    of the two sub-iterations; iteration stops when a full pass removes
    nothing.  Input must be binary.
    """
    vals = np.asarray(r.values)
    if not np.all((vals == 0.0) | (vals == 1.0)):
        raise ValueError("skeletonize expects a binary raster")
    img = vals.astype(np.uint8)
    while True:
        removed = 0
        for step in (0, 1):
            n, ne, e, se, s, sw, w, nw = _neighbors(img)
            ring = [n, ne, e, se, s, sw, w, nw]
            b = sum(ring)
            transitions = sum(
                ((ring[i] == 0) & (ring[(i + 1) % 8] == 1)).astype(np.uint8) for i in range(8)
            )
            if step == 0:
                c1 = (n * e * s) == 0
                c2 = (e * s * w) == 0
            else:
                c1 = (n * e * w) == 0
                c2 = (n * s * w) == 0
            kill = (img == 1) & (b >= 2) & (b <= 6) & (transitions == 1) & c1 & c2
            removed += int(kill.sum())
            img[kill] = 0
        if removed == 0:
            break
    return RoadRaster(img.astype(np.float32), r.geo)


def _skeleton_degree(skel: np.ndarray) -> np.ndarray:
    """8-neighborhood degree of every skeleton pixel (zero elsewhere)."""
    kernel = np.ones((3, 3), dtype=np.uint8)
    kernel[1, 1] = 0
    deg = ndimage.convolve(skel.astype(np.uint8), kernel, mode="constant", cval=0)
    return deg * (skel > 0)


def skeleton_branch_count(skel: np.ndarray) -> np.ndarray:
    """Branches leaving each skeleton pixel: the number of 0->1 transitions
    around the ordered 8-neighbor ring (crossing number).  Endpoints give 1,
    line pixels 2, junction pixels >= 3."""
    img = (np.asarray(skel) > 0).astype(np.uint8)
    ring = list(_neighbors(img))
    rises = sum(((ring[i] == 0) & (ring[(i + 1) % 8] == 1)).astype(np.uint8) for i in range(8))
    return rises * img


def prune_skeleton(skel: np.ndarray, iterations: int) -> np.ndarray:
    """Remove endpoint pixels (degree <= 1) ``iterations`` times; kills spurs."""
    out = skel.astype(np.uint8).copy()
    for _ in range(iterations):
        deg = _skeleton_degree(out)
        tips = (out > 0) & (deg <= 1)
        if not tips.any():
            break
        out[tips] = 0
    return out


# ---------------------------------------------------------------------------
# Grid-stride branch scoring.
# ---------------------------------------------------------------------------

def _ring_offsets(radius: int) -> np.ndarray:
    """Perimeter pixel offsets of the (2r+1)^2 window, ordered cyclically."""
    top = [(dx, -radius) for dx in range(-radius, radius + 1)]
    right = [(radius, dy) for dy in range(-radius + 1, radius + 1)]
    bottom = [(dx, radius) for dx in range(radius - 1, -radius - 1, -1)]
    left = [(-radius, dy) for dy in range(radius - 1, -radius, -1)]
    return np.asarray(top + right + bottom + left, dtype=np.int64)


def _branch_counts(skel: np.ndarray, xs: np.ndarray, ys: np.ndarray, radius: int) -> np.ndarray:
    """Number of distinct skeleton arcs crossing the window boundary at each
    (xs x ys) grid node, chunked to bound memory."""
    offsets = _ring_offsets(radius)
    padded = np.pad(skel.astype(bool), radius)
    gy, gx = np.meshgrid(ys, xs, indexing="ij")
    flat_x = (gx.ravel() + radius)[:, None] + offsets[:, 0][None, :]
    flat_y = (gy.ravel() + radius)[:, None] + offsets[:, 1][None, :]
    counts = np.empty(flat_x.shape[0], dtype=np.int32)
    chunk = max(1, 8_000_000 // offsets.shape[0])
    for start in range(0, flat_x.shape[0], chunk):
        sl = slice(start, start + chunk)
        ring = padded[flat_y[sl], flat_x[sl]]
        rises = ring & ~np.roll(ring, 1, axis=1)
        c = rises.sum(axis=1)
        full = ring.all(axis=1)
        c[full] = 1
        counts[sl] = c
    return counts.reshape(len(ys), len(xs))


def _bilinear_upsample(coarse: np.ndarray, xs: np.ndarray, ys: np.ndarray, shape) -> np.ndarray:
    """Dense map from samples at grid coordinates (xs, ys); edges extend."""
    h, w = shape
    fx = np.interp(np.arange(w), xs, np.arange(len(xs)))
    fy = np.interp(np.arange(h), ys, np.arange(len(ys)))
    x0 = np.clip(np.floor(fx).astype(int), 0, len(xs) - 2) if len(xs) > 1 else np.zeros(w, int)
    y0 = np.clip(np.floor(fy).astype(int), 0, len(ys) - 2) if len(ys) > 1 else np.zeros(h, int)
    tx = fx - x0
    ty = fy - y0
    if len(xs) == 1:
        tx = np.zeros(w)
    if len(ys) == 1:
        ty = np.zeros(h)
    c00 = coarse[np.ix_(y0, x0)]
    c01 = coarse[np.ix_(y0, np.minimum(x0 + 1, len(xs) - 1))]
    c10 = coarse[np.ix_(np.minimum(y0 + 1, len(ys) - 1), x0)]
    c11 = coarse[np.ix_(np.minimum(y0 + 1, len(ys) - 1), np.minimum(x0 + 1, len(xs) - 1))]
    return ((1 - ty)[:, None] * ((1 - tx) * c00 + tx * c01)
            + ty[:, None] * ((1 - tx) * c10 + tx * c11))


def score_intersections(r: RoadRaster, cfg: DetectionConfig,
                        skeleton: RoadRaster | None = None) -> ScoreMap:
    """Dense intersection score map in [0, 1].

    At every grid-stride node the score is the branch count beyond two (a
    through-road), clipped to [0, 1], attenuated by a Gaussian in the distance
    to the nearest high-degree skeleton pixel; the dense map is filled by
    bilinear interpolation between the grid samples.
    """
    skel_r = skeleton if skeleton is not None else skeletonize(r)
    skel = np.asarray(skel_r.values) > 0.5
    pruned = prune_skeleton(skel, cfg.branch_window_px // 2)
    branch_px = skeleton_branch_count(pruned) >= 3

    h, w = skel.shape
    xs = np.arange(0, w, cfg.grid_stride_px)
    ys = np.arange(0, h, cfg.grid_stride_px)

    if branch_px.any():
        d3 = ndimage.distance_transform_edt(~branch_px)
    else:
        d3 = np.full((h, w), np.inf)
    sigma = 0.6 * cfg.branch_window_px
    with np.errstate(over="ignore"):
        prox = np.exp(-(d3[np.ix_(ys, xs)] ** 2) / (2.0 * sigma * sigma))

    arcs = _branch_counts(pruned, xs, ys, cfg.branch_window_px)
    raw = np.clip(arcs - 2, 0, 1).astype(np.float64)
    coarse = raw * prox
    dense = _bilinear_upsample(coarse, xs, ys, (h, w))
    return ScoreMap(np.clip(dense, 0.0, 1.0), r.geo, cfg.grid_stride_px)


# ---------------------------------------------------------------------------
# Non-maxima suppression with quadratic sub-pixel refinement.
# ---------------------------------------------------------------------------

def _quadratic_offset(patch: np.ndarray) -> np.ndarray:
    """Peak offset in [-1, 1]^2 from a 3x3 neighborhood, or (0, 0) if the fit
    is degenerate."""
    gx = (patch[1, 2] - patch[1, 0]) / 2.0
    gy = (patch[2, 1] - patch[0, 1]) / 2.0
    hxx = patch[1, 2] - 2.0 * patch[1, 1] + patch[1, 0]
    hyy = patch[2, 1] - 2.0 * patch[1, 1] + patch[0, 1]
    hxy = (patch[2, 2] - patch[2, 0] - patch[0, 2] + patch[0, 0]) / 4.0
    det = hxx * hyy - hxy * hxy
    if det <= 1e-12 or hxx >= 0:
        return np.zeros(2)
    off = np.linalg.solve(np.array([[hxx, hxy], [hxy, hyy]]), -np.array([gx, gy]))
    return np.clip(off, -1.0, 1.0)


def nms_detect(score: ScoreMap, cfg: DetectionConfig) -> list:
    """Detections: grid local maxima above threshold, kept greedily in
    descending score order while suppressing anything within nms_radius_px."""
    stride = cfg.grid_stride_px
    coarse = np.asarray(score.values, dtype=np.float64)[::stride, ::stride]
    ny, nx = coarse.shape
    pad = np.pad(coarse, 1, constant_values=-1.0)
    is_max = np.ones_like(coarse, dtype=bool)
    for dy in (-1, 0, 1):
        for dx in (-1, 0, 1):
            if dx == 0 and dy == 0:
                continue
            is_max &= coarse >= pad[1 + dy : 1 + dy + ny, 1 + dx : 1 + dx + nx]
    cand = np.argwhere(is_max & (coarse > cfg.score_threshold))
    if len(cand) == 0:
        return []
    scores = coarse[cand[:, 0], cand[:, 1]]
    order = np.lexsort((cand[:, 1], cand[:, 0], -scores))
    cand = cand[order]
    scores = scores[order]

    positions = []
    for (cy, cx) in cand:
        if 1 <= cy < ny - 1 and 1 <= cx < nx - 1:
            off = _quadratic_offset(coarse[cy - 1 : cy + 2, cx - 1 : cx + 2])
        else:
            off = np.zeros(2)
        positions.append(np.array([(cx + off[0]) * stride, (cy + off[1]) * stride]))
    positions = np.asarray(positions)

    kept: list[int] = []
    r2 = cfg.nms_radius_px ** 2
    for i in range(len(cand)):
        p = positions[i]
        if all((p[0] - positions[j][0]) ** 2 + (p[1] - positions[j][1]) ** 2 >= r2 for j in kept):
            kept.append(i)

    detections = []
    for rank, i in enumerate(kept):
        detections.append(
            make_intersection(score.geo, tuple(positions[i]), id=rank,
                              score=float(np.clip(scores[i], 0.0, 1.0)))
        )
    return detections


def detect_intersections(r: RoadRaster, cfg: DetectionConfig,
                         skeleton: RoadRaster | None = None) -> list:
    return nms_detect(score_intersections(r, cfg, skeleton=skeleton), cfg)


# ---------------------------------------------------------------------------
# CSV export of detections.
# ---------------------------------------------------------------------------

def save_detections_csv(detections, path) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["id", "x_px", "y_px", "east_m", "north_m", "score"])
        for d in detections:
            w.writerow([d.id, f"{d.pixel_pos[0]:.4f}", f"{d.pixel_pos[1]:.4f}",
                        f"{d.world_pos[0]:.4f}", f"{d.world_pos[1]:.4f}", f"{d.score:.6f}"])


def load_detections_csv(path) -> list:
    out = []
    with open(path, newline="") as f:
        for row in csv.DictReader(f):
            out.append(Intersection(
                int(row["id"]),
                (float(row["x_px"]), float(row["y_px"])),
                (float(row["east_m"]), float(row["north_m"])),
                float(row["score"]),
            ))
    return out
