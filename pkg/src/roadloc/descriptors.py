"""Intersection descriptors, metric learning and the reference index.

A descriptor is a log-polar histogram of road-pixel density around an
intersection: rings geometrically spaced between an inner radius and the
descriptor radius, sectors anchored to north (sector 0 is centered on north,
angles grow clockwise).  Distances are weighted squared Euclidean with a
learnable nonnegative diagonal weight vector; the weights are fit by gradient
descent on the contrastive loss
    L = 1/2 * y * d + 1/2 * (1 - y) * max(m - d, 0)
over labeled descriptor pairs (y = 1 for the same intersection).
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from roadloc.geometry import Intersection, RoadRaster


class IndexFormatError(ValueError):
    """Unreadable or incompatible descriptor index file."""


@dataclass(frozen=True, eq=False)
class DiagonalMetric:
    """Nonnegative per-dimension weights for squared Euclidean distances."""

    weights: np.ndarray
    margin: float = 1.0

    def __post_init__(self):
        w = np.ascontiguousarray(np.asarray(self.weights, dtype=np.float64))
        if w.ndim != 1:
            raise ValueError("weights must be a vector")
        if np.any(w < 0) or not np.all(np.isfinite(w)):
            raise ValueError("weights must be finite and >= 0")
        if not self.margin > 0:
            raise ValueError(f"margin must be > 0, got {self.margin}")
        w.flags.writeable = False
        object.__setattr__(self, "weights", w)

    @classmethod
    def unit(cls, dim: int, margin: float = 1.0) -> "DiagonalMetric":
        return cls(np.ones(dim), margin)

    def distance(self, a: np.ndarray, b: np.ndarray) -> float:
        diff = np.asarray(a, dtype=np.float64) - np.asarray(b, dtype=np.float64)
        return float((diff * diff) @ self.weights)


def weighted_sqdist(a: np.ndarray, b: np.ndarray, weights: np.ndarray) -> np.ndarray:
    """All-pairs weighted squared Euclidean distances, shape (len(a), len(b))."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    diff = a[:, None, :] - b[None, :, :]
    return (diff * diff) @ np.asarray(weights, dtype=np.float64)


@dataclass(frozen=True, eq=False)
class LabeledPair:
    a: np.ndarray
    b: np.ndarray
    y: int

    def __post_init__(self):
        if self.y not in (0, 1):
            raise ValueError(f"label must be 0 or 1, got {self.y}")


# ---------------------------------------------------------------------------
# Descriptor extraction.
# ---------------------------------------------------------------------------

DEFAULT_RINGS = 5
DEFAULT_SECTORS = 12
DEFAULT_INNER_RADIUS_M = 8.0


def extract_descriptor(r: RoadRaster, center: Intersection, radius_m: float,
                       rings: int = DEFAULT_RINGS, sectors: int = DEFAULT_SECTORS,
                       inner_radius_m: float = DEFAULT_INNER_RADIUS_M) -> np.ndarray:
    """L2-normalized log-polar road-density histogram around an intersection.

    Bins hold road-pixel coverage (pixel count times pixel area over bin
    area).  Pixels closer than inner_radius_m are skipped; the neighborhood of
    an empty descriptor comes back as the all-zero vector.
    """
    if not r.contains_world(center.world_pos):
        raise ValueError(f"intersection {center.id} lies outside the raster")
    if radius_m <= inner_radius_m:
        raise ValueError(f"radius_m must exceed inner_radius_m ({inner_radius_m})")
    cx, cy = r.geo.world_to_pixel(center.world_pos)
    rad_px = radius_m / r.geo.meters_per_pixel
    x0 = max(int(np.floor(cx - rad_px)) - 1, 0)
    x1 = min(int(np.ceil(cx + rad_px)) + 2, r.width)
    y0 = max(int(np.floor(cy - rad_px)) - 1, 0)
    y1 = min(int(np.ceil(cy + rad_px)) + 2, r.height)
    window = np.asarray(r.values)[y0:y1, x0:x1] >= 0.5
    ry, rx = np.nonzero(window)
    if len(rx) == 0:
        return np.zeros(rings * sectors)
    px = np.stack([rx + x0, ry + y0], axis=1).astype(np.float64)
    world = r.geo.pixel_to_world(px)
    de = world[:, 0] - center.world_pos[0]
    dn = world[:, 1] - center.world_pos[1]
    dist = np.hypot(de, dn)
    keep = (dist >= inner_radius_m) & (dist <= radius_m)
    if not keep.any():
        return np.zeros(rings * sectors)
    de, dn, dist = de[keep], dn[keep], dist[keep]

    log_span = np.log(radius_m / inner_radius_m)
    ring_idx = np.clip((np.log(dist / inner_radius_m) / log_span * rings).astype(np.int64),
                       0, rings - 1)
    bearing = np.degrees(np.arctan2(de, dn)) % 360.0
    sector_width = 360.0 / sectors
    sector_idx = ((bearing + sector_width / 2.0) // sector_width).astype(np.int64) % sectors

    counts = np.bincount(ring_idx * sectors + sector_idx, minlength=rings * sectors).astype(np.float64)
    edges = inner_radius_m * np.exp(log_span * np.arange(rings + 1) / rings)
    areas = np.pi * (edges[1:] ** 2 - edges[:-1] ** 2) / sectors
    density = counts * (r.geo.meters_per_pixel ** 2) / np.repeat(areas, sectors)
    norm = np.linalg.norm(density)
    return density / norm if norm > 0 else density


def descriptor_is_empty(d: np.ndarray) -> bool:
    return not np.any(np.asarray(d) != 0)


# ---------------------------------------------------------------------------
# Contrastive loss over the diagonal metric.
# ---------------------------------------------------------------------------

def contrastive_loss(pair: LabeledPair, metric: DiagonalMetric) -> float:
    d = metric.distance(pair.a, pair.b)
    return 0.5 * pair.y * d + 0.5 * (1 - pair.y) * max(metric.margin - d, 0.0)


def loss_gradient(pair: LabeledPair, metric: DiagonalMetric) -> np.ndarray:
    """d(loss)/d(weights) for one labeled pair."""
    diff = np.asarray(pair.a, dtype=np.float64) - np.asarray(pair.b, dtype=np.float64)
    sq = diff * diff
    if pair.y == 1:
        return 0.5 * sq
    d = float(sq @ metric.weights)
    if d < metric.margin:
        return -0.5 * sq
    return np.zeros_like(sq)


@dataclass(frozen=True)
class FinetuneConfig:
    learning_rate: float = 1.0
    epochs: int = 300
    margin: float = 1.0

    def to_dict(self) -> dict:
        return {"learning_rate": self.learning_rate, "epochs": self.epochs, "margin": self.margin}

    @classmethod
    def from_dict(cls, d: dict) -> "FinetuneConfig":
        return cls(**d)


def finetune_metric(pairs, cfg: FinetuneConfig) -> DiagonalMetric:
    """Batch gradient descent on the mean contrastive loss from unit weights.

    Weights are clamped to >= 0 after every step; the best weights seen are
    returned, so the final mean loss never exceeds the initial one.
    """
    if not pairs:
        raise ValueError("finetune_metric needs at least one pair")
    labels = {p.y for p in pairs}
    if labels != {0, 1}:
        raise ValueError("finetune_metric needs both positive and negative pairs")
    sq = np.stack([
        (np.asarray(p.a, dtype=np.float64) - np.asarray(p.b, dtype=np.float64)) ** 2
        for p in pairs
    ])
    y = np.array([p.y for p in pairs], dtype=np.float64)
    m = cfg.margin
    w = np.ones(sq.shape[1])

    def mean_loss(weights):
        d = sq @ weights
        return float(np.mean(0.5 * y * d + 0.5 * (1 - y) * np.maximum(m - d, 0.0)))

    best_w = w.copy()
    best_loss = mean_loss(w)
    for _ in range(cfg.epochs):
        d = sq @ w
        active = ((1 - y) * (d < m)).astype(np.float64)
        grad = np.mean(0.5 * y[:, None] * sq - 0.5 * active[:, None] * sq, axis=0)
        w = np.maximum(w - cfg.learning_rate * grad, 0.0)
        loss = mean_loss(w)
        if loss < best_loss:
            best_loss = loss
            best_w = w.copy()
    return DiagonalMetric(best_w, m)


# ---------------------------------------------------------------------------
# Exact k-nearest-neighbor index with binary persistence.
# ---------------------------------------------------------------------------

_MAGIC = b"RLIX"
_VERSION = 1


@dataclass(eq=False)
class IntersectionIndex:
    """Reference database: descriptors plus world positions, scanned exactly.

    Entries with all-zero descriptors are stored but marked unusable; region
    queries skip them.
    """

    ids: np.ndarray
    positions: np.ndarray
    descriptors: np.ndarray
    metric: DiagonalMetric
    _member_cache: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        self.ids = np.ascontiguousarray(np.asarray(self.ids, dtype=np.int64))
        self.positions = np.ascontiguousarray(np.asarray(self.positions, dtype=np.float64))
        self.descriptors = np.ascontiguousarray(np.asarray(self.descriptors, dtype=np.float64))
        n = len(self.ids)
        if self.positions.shape != (n, 2):
            raise ValueError("positions must have shape (n, 2)")
        if self.descriptors.shape[0] != n:
            raise ValueError("descriptor count must match id count")
        if len(np.unique(self.ids)) != n:
            raise ValueError("ids must be unique")

    def __len__(self) -> int:
        return len(self.ids)

    @property
    def dim(self) -> int:
        return self.descriptors.shape[1]

    def usable_mask(self) -> np.ndarray:
        return np.any(self.descriptors != 0.0, axis=1)

    def region_member_table(self, radius_m: float) -> list:
        """Per-entry arrays of usable entry indices within radius_m (the entry
        itself included when usable).  Cached per radius."""
        key = round(float(radius_m), 9)
        if key not in self._member_cache:
            usable = self.usable_mask()
            d2 = (
                (self.positions[:, None, 0] - self.positions[None, :, 0]) ** 2
                + (self.positions[:, None, 1] - self.positions[None, :, 1]) ** 2
            )
            within = d2 <= radius_m * radius_m
            within &= usable[None, :]
            self._member_cache[key] = [np.nonzero(row)[0] for row in within]
        return self._member_cache[key]


def knn_query(index: IntersectionIndex, query: np.ndarray, metric: DiagonalMetric, k: int):
    """Exact k nearest entries as (id, distance) pairs, ascending by
    (distance, id).  k beyond the index size returns the whole index sorted."""
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    if len(index) == 0:
        raise ValueError("index is empty")
    q = np.asarray(query, dtype=np.float64)
    diff = index.descriptors - q[None, :]
    dists = (diff * diff) @ metric.weights
    order = np.lexsort((index.ids, dists))[: min(k, len(index))]
    return [(int(index.ids[i]), float(dists[i])) for i in order]


def save_index(index: IntersectionIndex, path) -> None:
    """Versioned little-endian binary: magic, version, dim, count, margin,
    weights[dim], then per entry (id: i64, east: f64, north: f64, desc[dim])."""
    path = Path(path)
    with open(path, "wb") as f:
        f.write(_MAGIC)
        f.write(struct.pack("<HIQ", _VERSION, index.dim, len(index)))
        f.write(struct.pack("<d", index.metric.margin))
        f.write(index.metric.weights.astype("<f8").tobytes())
        for i in range(len(index)):
            f.write(struct.pack("<qdd", int(index.ids[i]),
                                float(index.positions[i, 0]), float(index.positions[i, 1])))
            f.write(index.descriptors[i].astype("<f8").tobytes())


def load_index(path) -> IntersectionIndex:
    path = Path(path)
    raw = path.read_bytes()
    if raw[:4] != _MAGIC:
        raise IndexFormatError(f"{path}: not a descriptor index file")
    version, dim, count = struct.unpack_from("<HIQ", raw, 4)
    if version != _VERSION:
        raise IndexFormatError(f"{path}: unsupported index version {version} (expected {_VERSION})")
    off = 4 + struct.calcsize("<HIQ")
    (margin,) = struct.unpack_from("<d", raw, off)
    off += 8
    weights = np.frombuffer(raw, dtype="<f8", count=dim, offset=off).copy()
    off += 8 * dim
    record = struct.calcsize("<qdd") + 8 * dim
    if len(raw) - off != record * count:
        raise IndexFormatError(f"{path}: truncated index (expected {record * count} record bytes)")
    ids = np.empty(count, dtype=np.int64)
    positions = np.empty((count, 2))
    descriptors = np.empty((count, dim))
    for i in range(count):
        ids[i], positions[i, 0], positions[i, 1] = struct.unpack_from("<qdd", raw, off)
        off += struct.calcsize("<qdd")
        descriptors[i] = np.frombuffer(raw, dtype="<f8", count=dim, offset=off)
        off += 8 * dim
    return IntersectionIndex(ids, positions, descriptors, DiagonalMetric(weights, margin))
