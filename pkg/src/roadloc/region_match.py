"""Region matching: score a query intersection against every reference.

The distance between two regions is the symmetrized sum of one-nearest-
neighbor descriptor distances between their member intersections:
    s_t = sum over query members of the min distance into the reference set,
    s_l = the reverse sum,
    d   = (s_t + s_l) / 2.
Sums are kept raw by default; the optional ``normalized`` flag divides each
directed sum by its region's member count.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from roadloc.descriptors import (
    DiagonalMetric,
    IntersectionIndex,
    descriptor_is_empty,
    weighted_sqdist,
)
from roadloc.geometry import Intersection, Region


class RegionDescriptorError(ValueError):
    """A region has no member with a usable descriptor."""


@dataclass(frozen=True)
class RegionDistance:
    s_t: float
    s_l: float

    def __post_init__(self):
        if self.s_t < 0 or self.s_l < 0:
            raise ValueError("directed sums must be >= 0")

    @property
    def d(self) -> float:
        return (self.s_t + self.s_l) / 2.0


@dataclass(frozen=True)
class CandidateList:
    """Up to k reference candidates for one query, ascending by (d, id)."""

    query_id: int
    entries: tuple  # of (reference id, RegionDistance)
    skipped: int = 0

    def __post_init__(self):
        object.__setattr__(self, "entries", tuple(self.entries))
        ds = [e[1].d for e in self.entries]
        if ds != sorted(ds):
            raise ValueError("candidate entries must ascend by distance")

    def ids(self) -> list:
        return [e[0] for e in self.entries]

    def to_json(self) -> dict:
        return {
            "query_id": self.query_id,
            "skipped": self.skipped,
            "entries": [
                {"reference_id": rid, "s_t": rd.s_t, "s_l": rd.s_l, "d": rd.d}
                for rid, rd in self.entries
            ],
        }


def gather_region(all_intersections, center: Intersection, radius_m: float) -> Region:
    """All intersections within radius_m of the center (center included)."""
    c = np.asarray(center.world_pos)
    members = [
        i for i in all_intersections
        if np.hypot(i.world_pos[0] - c[0], i.world_pos[1] - c[1]) <= radius_m
    ]
    if center not in members:
        members.append(center)
    return Region(center, radius_m, tuple(members))


def _usable_descriptors(region: Region) -> np.ndarray:
    descs = [
        m.descriptor for m in region.members
        if m.descriptor is not None and not descriptor_is_empty(m.descriptor)
    ]
    if not descs:
        raise RegionDescriptorError(
            f"region around intersection {region.center.id} has no usable descriptors"
        )
    return np.stack(descs)


def region_distance(rt: Region, rl: Region, metric: DiagonalMetric,
                    normalized: bool = False) -> RegionDistance:
    """Symmetrized 1NN descriptor distance between two regions' members."""
    qt = _usable_descriptors(rt)
    ql = _usable_descriptors(rl)
    mat = weighted_sqdist(qt, ql, metric.weights)
    s_t = float(mat.min(axis=1).sum())
    s_l = float(mat.min(axis=0).sum())
    if normalized:
        s_t /= mat.shape[0]
        s_l /= mat.shape[1]
    return RegionDistance(s_t, s_l)


def candidates(query_region: Region, index: IntersectionIndex, radius_m: float,
               k: int, metric: DiagonalMetric, normalized: bool = False) -> CandidateList:
    """The k reference intersections with the smallest region distance to the
    query region, evaluated against every index entry; ties break on ascending
    reference id.  References whose region has no usable descriptor are
    skipped and counted."""
    if len(index) == 0:
        raise ValueError("reference index is empty")
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    q = _usable_descriptors(query_region)
    full = weighted_sqdist(q, index.descriptors, metric.weights)  # (m, N)
    reverse_min = full.min(axis=0)  # 1NN of each reference descriptor into the query set
    table = index.region_member_table(radius_m)

    ref_ids = []
    dists = []
    sums = []
    skipped = 0
    for j in range(len(index)):
        members = table[j]
        if len(members) == 0:
            skipped += 1
            continue
        sub = full[:, members]
        s_t = float(sub.min(axis=1).sum())
        s_l = float(reverse_min[members].sum())
        if normalized:
            s_t /= sub.shape[0]
            s_l /= len(members)
        rd = RegionDistance(s_t, s_l)
        ref_ids.append(int(index.ids[j]))
        dists.append(rd.d)
        sums.append(rd)
    if not ref_ids:
        raise RegionDescriptorError("every reference region was empty")
    order = np.lexsort((np.asarray(ref_ids), np.asarray(dists)))[: min(k, len(ref_ids))]
    entries = tuple((ref_ids[i], sums[i]) for i in order)
    return CandidateList(query_region.center.id, entries, skipped)


def save_candidates_json(candidate_lists, path) -> None:
    doc = [c.to_json() for c in candidate_lists]
    with open(path, "w", encoding="utf-8") as f:
        json.dump(doc, f, indent=2, sort_keys=True)
        f.write("\n")
