"""Two-city benchmark harness: build, localize, score, report.

Protocol: geometry and descriptor weights are tuned on city A only; every
query comes from a perturbed render of city B; the reference index spans both
cities.  A detected query intersection is tied to its ground-truth node by
forward-mapping the node through the known rigid perturbation; localization
error compares the world estimate of a query pixel against the exact inverse
rigid mapping of that pixel.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field

import numpy as np

from roadloc.alignment import warp_raster
from roadloc.descriptors import (
    DiagonalMetric,
    FinetuneConfig,
    LabeledPair,
    finetune_metric,
)
from roadloc.detect import detect_intersections
from roadloc.geometry import Intersection, RoadRaster, crop_region
from roadloc.ingest import (
    PerturbationSpec,
    SyntheticCitySpec,
    generate_city,
    perturb,
    rasterize,
)
from roadloc.pipeline import (
    EnhanceConfig,
    PipelineConfig,
    ReferenceDatabase,
    attach_query_descriptors,
    build_reference_database,
    enhance_roads,
    geolocalize,
    reference_frame_for_vectors,
    registered_reference,
)


@dataclass(frozen=True)
class BenchmarkConfig:
    seed: int = 0
    extent_m: float = 1600.0
    grid_spacing_mean: float = 100.0
    grid_spacing_std: float = 10.0
    irregularity: float = 0.35
    road_width_m: float = 7.0
    city_gap_m: float = 600.0
    match_tolerance_px: float = 6.0
    query_limit: int | None = None
    perturbation: PerturbationSpec = field(default_factory=PerturbationSpec)

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "extent_m": self.extent_m,
            "grid_spacing_mean": self.grid_spacing_mean,
            "grid_spacing_std": self.grid_spacing_std,
            "irregularity": self.irregularity,
            "road_width_m": self.road_width_m,
            "city_gap_m": self.city_gap_m,
            "match_tolerance_px": self.match_tolerance_px,
            "query_limit": self.query_limit,
            "perturbation": self.perturbation.to_dict(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "BenchmarkConfig":
        d = dict(d)
        if "perturbation" in d:
            d["perturbation"] = PerturbationSpec.from_dict(d["perturbation"])
        return cls(**d)


@dataclass(eq=False)
class Benchmark:
    """One seeded two-city instance with all truth bookkeeping."""

    config: BenchmarkConfig
    db: ReferenceDatabase
    clean_b: RoadRaster
    query_raster: RoadRaster
    true_transform: object
    queries: list  # detected query intersections (descriptors attached)
    truth_ref_id: dict  # query id -> reference id of its ground-truth node
    train_pairs: list  # labeled descriptor pairs from city A

    def true_world_of_pixel(self, pixel) -> np.ndarray:
        """Exact world position of a query-raster pixel via the inverse of the
        rigid perturbation."""
        src = self.true_transform.inverse().apply(np.asarray(pixel, dtype=np.float64))
        return self.query_raster.geo.pixel_to_world(src)

    def localization_error_m(self, result) -> float | None:
        if not result.localized or result.world_estimate is None:
            return None
        truth = self.true_world_of_pixel(result.query_pixel)
        return float(np.hypot(result.world_estimate[0] - truth[0],
                              result.world_estimate[1] - truth[1]))


def _match_detections_to_nodes(detections, node_px: np.ndarray, tol_px: float) -> dict:
    """Greedy nearest matching (by ascending distance) of detections to
    projected ground-truth nodes; returns {detection id -> node row}."""
    if len(detections) == 0 or len(node_px) == 0:
        return {}
    det_pos = np.array([d.pixel_pos for d in detections])
    d2 = ((det_pos[:, None, 0] - node_px[None, :, 0]) ** 2
          + (det_pos[:, None, 1] - node_px[None, :, 1]) ** 2)
    order = np.dstack(np.unravel_index(np.argsort(d2, axis=None), d2.shape))[0]
    used_det: set = set()
    used_node: set = set()
    out: dict = {}
    tol2 = tol_px * tol_px
    for di, ni in order:
        if d2[di, ni] > tol2:
            break
        if di in used_det or ni in used_node:
            continue
        used_det.add(int(di))
        used_node.add(int(ni))
        out[detections[di].id] = int(ni)
    return out


def _training_pairs(clean_raster: RoadRaster, gt_nodes, id_offset: int, db: ReferenceDatabase,
                    cfg: BenchmarkConfig, pipe: PipelineConfig, seed: int,
                    negatives_per_positive: int = 2) -> list:
    """Contrastive pairs from city A: a perturbed render is detected and
    matched back to the clean nodes; matched descriptor pairs are positives,
    descriptors of the nearest other nodes are negatives."""
    perturbed, transform = perturb(clean_raster, cfg.perturbation, seed=seed)
    detections = detect_intersections(perturbed, pipe.detection)
    detections = attach_query_descriptors(perturbed, detections, pipe)
    node_world = np.array([g.world_pos for g in gt_nodes])
    node_px = transform.apply(clean_raster.geo.world_to_pixel(node_world))
    matches = _match_detections_to_nodes(detections, node_px, cfg.match_tolerance_px)
    by_id = {d.id: d for d in detections}
    pairs = []
    for det_id, node_row in sorted(matches.items()):
        det = by_id[det_id]
        if det.descriptor is None or not det.descriptor.any():
            continue
        ref_desc = db.index.descriptors[id_offset + node_row]
        pairs.append(LabeledPair(det.descriptor, ref_desc, 1))
        others = np.hypot(*(node_world - node_world[node_row]).T)
        others[node_row] = np.inf
        for neighbor in np.argsort(others)[:negatives_per_positive]:
            pairs.append(LabeledPair(det.descriptor, db.index.descriptors[id_offset + int(neighbor)], 0))
    return pairs


def make_benchmark(cfg: BenchmarkConfig, pipe: PipelineConfig) -> Benchmark:
    """Generate cities A and B, index both, perturb B and detect queries."""
    spec_a = SyntheticCitySpec(cfg.seed * 1000 + 1, cfg.extent_m, cfg.grid_spacing_mean,
                               cfg.grid_spacing_std, cfg.irregularity, cfg.road_width_m)
    spec_b = SyntheticCitySpec(cfg.seed * 1000 + 2, cfg.extent_m, cfg.grid_spacing_mean,
                               cfg.grid_spacing_std, cfg.irregularity, cfg.road_width_m)
    vec_a, gt_a = generate_city(spec_a)
    vec_b, gt_b = generate_city(spec_b)
    shift = cfg.extent_m + cfg.city_gap_m
    vec_b = vec_b.translated(shift, 0.0)
    gt_b = [Intersection(g.id, g.pixel_pos, (g.world_pos[0] + shift, g.world_pos[1]), g.score)
            for g in gt_b]

    db = build_reference_database(
        [vec_a, vec_b],
        descriptor=pipe.descriptor,
        intersections_per_set=[[g.world_pos for g in gt_a], [g.world_pos for g in gt_b]],
    )
    clean_a, clean_b = db.rasters

    query_raster, transform = perturb(clean_b, cfg.perturbation, seed=cfg.seed * 1000 + 3)
    detections = detect_intersections(query_raster, pipe.detection)
    detections = attach_query_descriptors(query_raster, detections, pipe)

    node_world = np.array([g.world_pos for g in gt_b])
    node_px = transform.apply(clean_b.geo.world_to_pixel(node_world))
    matches = _match_detections_to_nodes(detections, node_px, cfg.match_tolerance_px)
    offset_b = len(gt_a)
    queries = [d for d in detections if d.id in matches]
    if cfg.query_limit is not None:
        queries = queries[: cfg.query_limit]
    truth_ref_id = {d.id: offset_b + matches[d.id] for d in queries}

    train_pairs = _training_pairs(clean_a, gt_a, 0, db, cfg, pipe, seed=cfg.seed * 1000 + 4)
    return Benchmark(cfg, db, clean_b, query_raster, transform, queries, truth_ref_id, train_pairs)


def finetuned_metric(benchmark: Benchmark, finetune: FinetuneConfig | None = None) -> DiagonalMetric:
    finetune = finetune or FinetuneConfig(learning_rate=2.0, epochs=400, margin=1.0)
    return finetune_metric(benchmark.train_pairs, finetune)


# ---------------------------------------------------------------------------
# Scoring.
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class RunScores:
    recognition_strict: float   # correct id over all matched queries
    recognition_lenient: float  # correct id over localized queries
    localized_fraction: float
    errors_m: tuple             # localization errors of localized queries

    def error_quantile(self, q: float) -> float:
        if not self.errors_m:
            return float("nan")
        return float(np.quantile(np.asarray(self.errors_m), q))


def score_run(benchmark: Benchmark, results) -> RunScores:
    total = 0
    correct = 0
    localized = 0
    errors = []
    for r in results:
        truth = benchmark.truth_ref_id.get(r.query_id)
        if truth is None:
            continue
        total += 1
        if r.localized:
            localized += 1
            if r.reference_id == truth:
                correct += 1
            err = benchmark.localization_error_m(r)
            if err is not None:
                errors.append(err)
    if total == 0:
        raise ValueError("no scored queries")
    return RunScores(
        recognition_strict=correct / total,
        recognition_lenient=correct / localized if localized else 0.0,
        localized_fraction=localized / total,
        errors_m=tuple(errors),
    )


def run_benchmark(benchmark: Benchmark, pipe: PipelineConfig,
                  metric: DiagonalMetric | None = None) -> RunScores:
    results = geolocalize(benchmark.query_raster, benchmark.db, pipe, metric=metric,
                          query_intersections=benchmark.queries)
    return score_run(benchmark, results)


def f_measure(predicted: np.ndarray, truth: np.ndarray) -> float:
    """Pixelwise F-measure between binary masks."""
    p = np.asarray(predicted, dtype=bool)
    t = np.asarray(truth, dtype=bool)
    tp = float(np.logical_and(p, t).sum())
    fp = float(np.logical_and(p, ~t).sum())
    fn = float(np.logical_and(~p, t).sum())
    if 2 * tp + fp + fn == 0:
        return 0.0
    return 2 * tp / (2 * tp + fp + fn)


def enhancement_gain(benchmark: Benchmark, pipe: PipelineConfig,
                     enhance: EnhanceConfig | None = None,
                     metric: DiagonalMetric | None = None,
                     max_samples: int = 10) -> tuple:
    """Mean road F-measure before and after enhancement over localized query
    regions, against the rigidly remapped clean city (never the ground-truth
    match: the reference region is whatever localization chose)."""
    enhance = enhance or EnhanceConfig()
    results = geolocalize(benchmark.query_raster, benchmark.db, pipe, metric=metric,
                          query_intersections=benchmark.queries)
    gt_full = warp_raster(benchmark.clean_b, benchmark.true_transform,
                          benchmark.query_raster.values.shape, benchmark.query_raster.geo)
    before, after = [], []
    by_id = {q.id: q for q in benchmark.queries}
    for r in results:
        if len(before) >= max_samples:
            break
        if not r.localized or r.transform is None:
            continue
        q = by_id[r.query_id]
        query_crop = crop_region(benchmark.query_raster, q.world_pos, pipe.radius_m)
        gt_crop = crop_region(gt_full, q.world_pos, pipe.radius_m)
        ref_pos = benchmark.db.position_of(r.reference_id)
        ref_raster = benchmark.db.raster_for(ref_pos)
        ref_crop = crop_region(ref_raster, ref_pos, pipe.radius_m)
        from roadloc.alignment import AlignmentResult
        aligned = registered_reference(query_crop, ref_crop,
                                       AlignmentResult(r.transform, 0, r.chamfer, True))
        enhanced = enhance_roads(query_crop, aligned, enhance)
        before.append(f_measure(query_crop.road_mask(), gt_crop.road_mask()))
        after.append(f_measure(enhanced.road_mask(), gt_crop.road_mask()))
    if not before:
        return float("nan"), float("nan")
    return float(np.mean(before)), float(np.mean(after))


# ---------------------------------------------------------------------------
# Full evaluation sweep and report.
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class EvalConfig:
    radii_m: tuple = (100.0, 200.0, 300.0, 500.0)
    seeds: tuple = (0, 1, 2)
    alignment_radius_m: float = 100.0
    localization_radius_m: float = 300.0
    error_bin_edges_m: tuple = (0.0, 0.5, 1.0, 1.5, 2.0, 2.5, 5.0, 10.0, 50.0)
    enhance_samples: int = 8
    benchmark: BenchmarkConfig = field(default_factory=BenchmarkConfig)
    finetune: FinetuneConfig = field(default_factory=lambda: FinetuneConfig(2.0, 400, 1.0))

    def to_dict(self) -> dict:
        return {
            "radii_m": list(self.radii_m),
            "seeds": list(self.seeds),
            "alignment_radius_m": self.alignment_radius_m,
            "localization_radius_m": self.localization_radius_m,
            "error_bin_edges_m": list(self.error_bin_edges_m),
            "enhance_samples": self.enhance_samples,
            "benchmark": self.benchmark.to_dict(),
            "finetune": self.finetune.to_dict(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "EvalConfig":
        d = dict(d)
        for key in ("radii_m", "seeds", "error_bin_edges_m"):
            if key in d:
                d[key] = tuple(d[key])
        if "benchmark" in d:
            d["benchmark"] = BenchmarkConfig.from_dict(d["benchmark"])
        if "finetune" in d:
            d["finetune"] = FinetuneConfig.from_dict(d["finetune"])
        return cls(**d)


@dataclass(eq=False)
class EvalReport:
    radii_m: list
    curves: dict          # variant name -> mean strict recognition per radius
    per_seed_curves: dict  # variant name -> list (per seed) of per-radius rates
    alignment_check: dict  # radius, rates with / without alignment
    error_histogram: dict  # bin edges, counts, fractions
    enhancement: dict      # f_before, f_after
    seeds: list

    def to_json(self) -> dict:
        return {
            "radii_m": self.radii_m,
            "curves": self.curves,
            "per_seed_curves": self.per_seed_curves,
            "alignment_check": self.alignment_check,
            "error_histogram": self.error_histogram,
            "enhancement": self.enhancement,
            "seeds": self.seeds,
        }

    @classmethod
    def from_json(cls, d: dict) -> "EvalReport":
        return cls(d["radii_m"], d["curves"], d["per_seed_curves"], d["alignment_check"],
                   d["error_histogram"], d["enhancement"], d["seeds"])


def evaluate(cfg: EvalConfig, pipe: PipelineConfig) -> EvalReport:
    """Sweep region radius and the metric / alignment toggles over seeded
    two-city benchmarks; gather recognition curves, the localization error
    distribution and the enhancement gain."""
    variants = {"unit_metric": [], "finetuned_metric": []}
    align_on, align_off = [], []
    all_errors = []
    localized_fracs = []
    f_before_all, f_after_all = [], []

    for seed in cfg.seeds:
        bench_cfg = BenchmarkConfig(**{**cfg.benchmark.to_dict(), "seed": seed,
                                       "perturbation": cfg.benchmark.perturbation})
        bench = make_benchmark(bench_cfg, pipe)
        tuned = finetuned_metric(bench, cfg.finetune)
        unit = DiagonalMetric.unit(bench.db.index.dim, cfg.finetune.margin)

        unit_curve, tuned_curve = [], []
        for radius in cfg.radii_m:
            sweep_pipe = PipelineConfig(**{**pipe.to_dict(), "radius_m": radius,
                                           "use_alignment": False,
                                           "detection": pipe.detection,
                                           "descriptor": pipe.descriptor,
                                           "alignment": pipe.alignment})
            unit_curve.append(run_benchmark(bench, sweep_pipe, metric=unit).recognition_strict)
            tuned_curve.append(run_benchmark(bench, sweep_pipe, metric=tuned).recognition_strict)
        variants["unit_metric"].append(unit_curve)
        variants["finetuned_metric"].append(tuned_curve)

        base = pipe.to_dict()
        align_pipe = PipelineConfig(**{**base, "radius_m": cfg.alignment_radius_m,
                                       "use_alignment": True, "detection": pipe.detection,
                                       "descriptor": pipe.descriptor, "alignment": pipe.alignment})
        noalign_pipe = PipelineConfig(**{**base, "radius_m": cfg.alignment_radius_m,
                                         "use_alignment": False, "detection": pipe.detection,
                                         "descriptor": pipe.descriptor, "alignment": pipe.alignment})
        align_on.append(run_benchmark(bench, align_pipe, metric=tuned).recognition_strict)
        align_off.append(run_benchmark(bench, noalign_pipe, metric=tuned).recognition_strict)

        loc_pipe = PipelineConfig(**{**base, "radius_m": cfg.localization_radius_m,
                                     "use_alignment": True, "detection": pipe.detection,
                                     "descriptor": pipe.descriptor, "alignment": pipe.alignment})
        scores = run_benchmark(bench, loc_pipe, metric=tuned)
        all_errors.extend(scores.errors_m)
        localized_fracs.append(scores.localized_fraction)

        fb, fa = enhancement_gain(bench, loc_pipe, metric=tuned, max_samples=cfg.enhance_samples)
        if not math.isnan(fb):
            f_before_all.append(fb)
            f_after_all.append(fa)

    edges = np.asarray(cfg.error_bin_edges_m)
    errors = np.asarray(all_errors) if all_errors else np.zeros(0)
    hist, _ = np.histogram(errors, bins=edges)
    overflow = int((errors > edges[-1]).sum())
    within = float((errors <= 2.5).sum() / len(errors)) if len(errors) else float("nan")

    def mean_curve(rows):
        return [float(np.mean([row[i] for row in rows])) for i in range(len(cfg.radii_m))]

    return EvalReport(
        radii_m=list(cfg.radii_m),
        curves={name: mean_curve(rows) for name, rows in variants.items()},
        per_seed_curves={name: [list(map(float, row)) for row in rows]
                         for name, rows in variants.items()},
        alignment_check={
            "radius_m": cfg.alignment_radius_m,
            "with_alignment": float(np.mean(align_on)),
            "without_alignment": float(np.mean(align_off)),
            "per_seed_with": list(map(float, align_on)),
            "per_seed_without": list(map(float, align_off)),
        },
        error_histogram={
            "bin_edges_m": [float(e) for e in edges],
            "counts": [int(c) for c in hist],
            "overflow": overflow,
            "n_errors": int(len(errors)),
            "fraction_within_2_5m": within,
            "mean_localized_fraction": float(np.mean(localized_fracs)) if localized_fracs else 0.0,
            "errors_m": [float(e) for e in errors],
        },
        enhancement={
            "f_before": float(np.mean(f_before_all)) if f_before_all else float("nan"),
            "f_after": float(np.mean(f_after_all)) if f_after_all else float("nan"),
        },
        seeds=list(cfg.seeds),
    )


# ---------------------------------------------------------------------------
# Report files.
# ---------------------------------------------------------------------------

def save_report(report: EvalReport, out_dir) -> None:
    from pathlib import Path
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / "report.json", "w", encoding="utf-8") as f:
        json.dump(report.to_json(), f, indent=2, sort_keys=True)
        f.write("\n")
    with open(out_dir / "recognition_rate.csv", "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["radius_m"] + list(report.curves))
        for i, r in enumerate(report.radii_m):
            w.writerow([r] + [f"{report.curves[name][i]:.6f}" for name in report.curves])
    with open(out_dir / "error_histogram.csv", "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["bin_low_m", "bin_high_m", "count"])
        edges = report.error_histogram["bin_edges_m"]
        for lo, hi, c in zip(edges[:-1], edges[1:], report.error_histogram["counts"]):
            w.writerow([lo, hi, c])
        w.writerow([edges[-1], "inf", report.error_histogram["overflow"]])


def load_report(path) -> EvalReport:
    with open(path, encoding="utf-8") as f:
        return EvalReport.from_json(json.load(f))


def plot_report(report: EvalReport, out_path) -> None:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, axes = plt.subplots(2, 2, figsize=(11, 8))
    ax = axes[0, 0]
    for name, curve in sorted(report.curves.items()):
        ax.plot(report.radii_m, [100 * v for v in curve], marker="o", label=name)
    ac = report.alignment_check
    ax.plot([ac["radius_m"]], [100 * ac["with_alignment"]], marker="*", markersize=14,
            linestyle="none", label="with alignment")
    ax.set_xlabel("region radius (m)")
    ax.set_ylabel("recognition rate (%)")
    ax.set_ylim(0, 102)
    ax.legend(fontsize=8)
    ax.set_title("intersection identification vs region radius")

    ax = axes[0, 1]
    errors = report.error_histogram.get("errors_m", [])
    if errors:
        ax.hist(errors, bins=report.error_histogram["bin_edges_m"], edgecolor="black")
    ax.axvline(2.5, color="red", linestyle="--", label="2.5 m")
    ax.set_xlabel("localization error (m)")
    ax.set_ylabel("queries")
    ax.legend(fontsize=8)
    frac = report.error_histogram.get("fraction_within_2_5m", float("nan"))
    ax.set_title(f"error distribution ({100 * frac:.1f}% within 2.5 m)")

    ax = axes[1, 0]
    if errors:
        xs = np.sort(errors)
        ax.plot(xs, np.arange(1, len(xs) + 1) / len(xs))
    ax.axvline(2.5, color="red", linestyle="--")
    ax.set_xlabel("localization error (m)")
    ax.set_ylabel("cumulative fraction")
    ax.set_title("error CDF")

    ax = axes[1, 1]
    enh = report.enhancement
    ax.bar(["before", "after"], [enh.get("f_before", float("nan")),
                                 enh.get("f_after", float("nan"))], color=["gray", "seagreen"])
    ax.set_ylim(0, 1.0)
    ax.set_ylabel("road F-measure")
    ax.set_title("road enhancement")

    fig.tight_layout()
    fig.savefig(out_path, metadata={})
    plt.close(fig)
