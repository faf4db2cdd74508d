import math

import numpy as np
import pytest

from roadloc.alignment import (
    AlignConfig,
    ChamferError,
    RansacConfig,
    SamplingError,
    align,
    chamfer,
    chi2_distances,
    distance_transform,
    propose_correspondences,
    ransac_affine,
    sample_road_points,
    shape_context,
    warp_raster,
    _shape_contexts_all,
)
from roadloc.geometry import AffineTransform2D, GeoTransform, RoadRaster, crop_region
from roadloc.ingest import SyntheticCitySpec, default_city_frame, generate_city, rasterize

GEO = GeoTransform(0.0, 0.0, 1.0, 0.0)


def _raster_from_points(points, n=64):
    v = np.zeros((n, n), dtype=np.float32)
    for x, y in points:
        v[int(y), int(x)] = 1.0
    return RoadRaster(v, GEO)


def _city_crop(seed=3, extent=600.0, radius=200.0):
    spec = SyntheticCitySpec(seed=seed, extent_m=extent, irregularity=0.3)
    vectors, _ = generate_city(spec)
    geo, size = default_city_frame(spec)
    r = rasterize(vectors, geo, size)
    center = geo.pixel_to_world((size / 2, size / 2))
    return crop_region(r, center, radius)


# -- sampling ---------------------------------------------------------------

def test_sample_returns_all_when_few():
    pts = [(3, 4), (10, 20), (30, 30)]
    r = _raster_from_points(pts)
    got = sample_road_points(r, 10, seed=0)
    assert sorted(map(tuple, got.astype(int))) == sorted(pts)


def test_sample_single_point():
    r = _raster_from_points([(5, 6), (20, 21), (40, 10)])
    got = sample_road_points(r, 1, seed=1)
    assert got.shape == (1, 2)
    assert r.values[int(got[0, 1]), int(got[0, 0])] == 1.0


def test_sample_zero_road_raises():
    r = RoadRaster(np.zeros((16, 16), dtype=np.float32), GEO)
    with pytest.raises(SamplingError):
        sample_road_points(r, 5, seed=0)


def test_sample_spread_beats_uniform():
    crop = _city_crop()
    n = 100

    def min_pairwise(pts):
        d = np.hypot(pts[:, None, 0] - pts[None, :, 0], pts[:, None, 1] - pts[None, :, 1])
        np.fill_diagonal(d, np.inf)
        return float(d.min())

    ys, xs = np.nonzero(crop.road_mask())
    all_pts = np.stack([xs, ys], axis=1).astype(float)
    fps_vals, uni_vals = [], []
    for seed in range(20):
        fps_vals.append(min_pairwise(sample_road_points(crop, n, seed=seed)))
        rng = np.random.default_rng(seed)
        uni = all_pts[rng.choice(len(all_pts), size=n, replace=False)]
        uni_vals.append(min_pairwise(uni))
    assert np.mean(fps_vals) >= 0.5 * np.mean(uni_vals)
    assert np.mean(fps_vals) > np.mean(uni_vals)  # spread sampling should win outright


def test_sample_deterministic():
    crop = _city_crop()
    a = sample_road_points(crop, 50, seed=9)
    b = sample_road_points(crop, 50, seed=9)
    assert np.array_equal(a, b)


# -- shape contexts ----------------------------------------------------------

def test_shape_context_single_neighbor_due_east():
    r_min, r_max = 4.0, 64.0
    mid = math.sqrt(r_min * r_max)
    h = shape_context(np.array([[10.0 + mid, 10.0]]), (10.0, 10.0), r_min, r_max)
    assert h.sum() == pytest.approx(1.0)
    assert np.count_nonzero(h) == 1
    hist = h.reshape(5, 12)
    ring, sector = np.argwhere(hist == 1.0)[0]
    assert sector == 3  # due east = bearing 90 deg -> fourth 30-degree sector


def test_shape_context_excludes_beyond_rmax():
    at = (0.0, 0.0)
    pts = np.array([[10.0, 0.0], [500.0, 0.0]])
    h = shape_context(pts, at, 4.0, 64.0)
    assert h.sum() == pytest.approx(1.0)
    assert np.count_nonzero(h) == 1
    none = shape_context(np.array([[500.0, 0.0]]), at, 4.0, 64.0)
    assert np.all(none == 0)


def test_shape_context_matches_naive_double_loop():
    rng = np.random.default_rng(12)
    pts = rng.uniform(0, 100, size=(50, 2))
    r_min, r_max, rings, sectors = 5.0, 60.0, 5, 12
    batched = _shape_contexts_all(pts, r_min, r_max, rings, sectors)
    for i in range(len(pts)):
        naive = np.zeros(rings * sectors)
        for j in range(len(pts)):
            if i == j:
                continue
            dx, dy = pts[j] - pts[i]
            dist = math.hypot(dx, dy)
            if dist < r_min or dist > r_max:
                continue
            ring = min(int(math.log(dist / r_min) / math.log(r_max / r_min) * rings), rings - 1)
            bearing = math.degrees(math.atan2(dx, -dy)) % 360.0
            sector = int(bearing // 30.0) % sectors
            naive[ring * sectors + sector] += 1
        if naive.sum() > 0:
            naive /= naive.sum()
        single = shape_context(pts, pts[i], r_min, r_max, rings, sectors)
        assert np.allclose(batched[i], naive, atol=1e-12)
        assert np.allclose(single, naive, atol=1e-12)


def test_chi2_matches_naive():
    rng = np.random.default_rng(13)
    a = rng.random((10, 16))
    a /= a.sum(axis=1, keepdims=True)
    b = rng.random((8, 16))
    b /= b.sum(axis=1, keepdims=True)
    got = chi2_distances(a, b)
    eps = 1e-10
    for i in range(10):
        for j in range(8):
            naive = 0.5 * np.sum((a[i] - b[j]) ** 2 / (a[i] + b[j] + eps))
            assert got[i, j] == pytest.approx(naive)


def test_propose_identity_rank_one():
    rng = np.random.default_rng(14)
    pts = rng.uniform(0, 200, size=(60, 2))
    ctx = _shape_contexts_all(pts, 5.0, 120.0, 5, 12)
    src_xy, dst_xy = propose_correspondences(pts, ctx, pts, ctx, per_point_k=1)
    assert len(src_xy) == 60
    assert np.allclose(src_xy, dst_xy)


# -- RANSAC -------------------------------------------------------------------

def test_ransac_recovers_exact_affine():
    rng = np.random.default_rng(15)
    truth = AffineTransform2D(np.array([[0.97, -0.12, 30.0], [0.10, 1.02, -12.0]]))
    src = rng.uniform(0, 300, size=(40, 2))
    dst = truth.apply(src)
    est, inliers = ransac_affine(src, dst, RansacConfig(iterations=200, seed=3))
    assert est is not None
    assert len(inliers) == 40
    assert np.max(np.abs(est.matrix - truth.matrix)) < 1e-6


def test_ransac_identity():
    rng = np.random.default_rng(16)
    pts = rng.uniform(0, 100, size=(20, 2))
    est, _ = ransac_affine(pts, pts, RansacConfig(iterations=100, seed=0))
    assert np.max(np.abs(est.matrix - AffineTransform2D.identity().matrix)) < 1e-9


def test_ransac_with_outliers_over_seeds():
    truth = AffineTransform2D.rotation_about((100, 100), 8.0, translation=(15.0, -9.0))
    errs = []
    for seed in range(20):
        rng = np.random.default_rng(100 + seed)
        src = rng.uniform(0, 200, size=(200, 2))
        dst = truth.apply(src)
        n_out = 60  # 30% outliers
        out_idx = rng.choice(200, size=n_out, replace=False)
        dst[out_idx] = rng.uniform(0, 200, size=(n_out, 2))
        est, inliers = ransac_affine(src, dst, RansacConfig(iterations=500, seed=seed))
        assert est is not None
        clean = np.setdiff1d(np.arange(200), out_idx)
        reproj = np.linalg.norm(est.apply(src[clean]) - truth.apply(src[clean]), axis=1)
        errs.append(float(reproj.mean()))
    assert np.mean(errs) < 0.5


def test_ransac_monotone_in_added_inliers():
    truth = AffineTransform2D(np.array([[1.01, 0.05, 5.0], [-0.04, 0.99, 2.0]]))
    for seed in range(5):
        rng = np.random.default_rng(200 + seed)
        src = rng.uniform(0, 150, size=(80, 2))
        dst = truth.apply(src)
        bad = rng.choice(80, size=20, replace=False)
        dst[bad] += rng.uniform(20, 60, size=(20, 2))
        cfg = RansacConfig(iterations=400, seed=seed)
        _, base_inl = ransac_affine(src, dst, cfg)
        extra = rng.uniform(0, 150, size=(30, 2))
        src2 = np.vstack([src, extra])
        dst2 = np.vstack([dst, truth.apply(extra)])
        _, more_inl = ransac_affine(src2, dst2, cfg)
        assert len(more_inl) >= len(base_inl)


def test_ransac_rejects_when_no_consensus():
    rng = np.random.default_rng(17)
    src = rng.uniform(0, 100, size=(30, 2))
    dst = rng.uniform(0, 100, size=(30, 2))
    est, inliers = ransac_affine(src, dst, RansacConfig(iterations=50, min_inliers=25, seed=1))
    assert est is None and len(inliers) == 0


# -- distance transform and chamfer -------------------------------------------

def test_edt_three_four_five():
    v = np.zeros((8, 8), dtype=np.float32)
    v[0, 0] = 1.0
    d = distance_transform(RoadRaster(v, GEO))
    assert d[4, 3] == pytest.approx(5.0)
    assert d[0, 0] == 0.0


def test_edt_all_road_zero():
    d = distance_transform(RoadRaster(np.ones((6, 6), dtype=np.float32), GEO))
    assert np.all(d == 0.0)


def test_edt_empty_is_infinite():
    d = distance_transform(RoadRaster(np.zeros((4, 4), dtype=np.float32), GEO))
    assert np.all(np.isinf(d))


def test_edt_matches_brute_force():
    rng = np.random.default_rng(18)
    for _ in range(5):
        v = (rng.random((64, 64)) < 0.05).astype(np.float32)
        if not v.any():
            v[10, 10] = 1.0
        d = distance_transform(RoadRaster(v, GEO))
        ys, xs = np.nonzero(v)
        gy, gx = np.mgrid[0:64, 0:64]
        d2 = (gx.ravel()[:, None] - xs[None, :]) ** 2 + (gy.ravel()[:, None] - ys[None, :]) ** 2
        brute = np.sqrt(d2.min(axis=1)).reshape(64, 64)
        assert np.array_equal(d, brute)


def test_chamfer_identical_zero():
    crop = _city_crop()
    assert chamfer(crop, crop) == 0.0


def test_chamfer_single_pixels():
    a = _raster_from_points([(10, 10)])
    b = _raster_from_points([(15, 10)])
    assert chamfer(a, b) == pytest.approx(5.0)


def test_chamfer_symmetric_random():
    rng = np.random.default_rng(19)
    for _ in range(100):
        va = (rng.random((24, 24)) < 0.1).astype(np.float32)
        vb = (rng.random((24, 24)) < 0.1).astype(np.float32)
        if not va.any() or not vb.any():
            continue
        a, b = RoadRaster(va, GEO), RoadRaster(vb, GEO)
        assert chamfer(a, b) == pytest.approx(chamfer(b, a))


def test_chamfer_empty_raises():
    a = _raster_from_points([(1, 1)])
    b = RoadRaster(np.zeros((64, 64), dtype=np.float32), GEO)
    with pytest.raises(ChamferError):
        chamfer(a, b)


def test_chamfer_zero_iff_equal_road_sets():
    rng = np.random.default_rng(20)
    va = (rng.random((20, 20)) < 0.2).astype(np.float32)
    a = RoadRaster(va, GEO)
    assert chamfer(a, RoadRaster(va.copy(), GEO)) == 0.0
    vb = va.copy()
    vb[5, 5] = 1.0 - vb[5, 5]
    if vb.any():
        assert chamfer(a, RoadRaster(vb, GEO)) > 0.0


# -- full alignment ------------------------------------------------------------

def test_align_identity():
    crop = _city_crop()
    res = align(crop, crop, AlignConfig(n_points=200), seed=5)
    assert res.accepted
    assert res.chamfer <= 0.5


def test_align_known_transform():
    crop = _city_crop(seed=8, extent=700.0, radius=220.0)
    truth = AffineTransform2D.rotation_about(
        (crop.width / 2, crop.height / 2), 5.0, translation=(20.0, 7.0)
    )
    query = warp_raster(crop, truth, crop.values.shape)
    res = align(query, crop, AlignConfig(n_points=250), seed=11)
    assert res.accepted
    assert res.chamfer <= 1.0
    rng = np.random.default_rng(0)
    probe = rng.uniform(50, crop.width - 50, size=(200, 2))
    reproj = np.linalg.norm(res.transform.apply(probe) - truth.inverse().apply(probe), axis=1)
    assert reproj.mean() <= 1.0


def test_align_result_json_round_trip():
    from roadloc.alignment import AlignmentResult
    res = AlignmentResult(AffineTransform2D.identity(), 42, 1.25, True)
    back = AlignmentResult.from_json(res.to_json())
    assert np.array_equal(back.transform.matrix, res.transform.matrix)
    assert back.inlier_count == 42 and back.chamfer == 1.25 and back.accepted
    rej = AlignmentResult(None, 0, float("inf"), False)
    back = AlignmentResult.from_json(rej.to_json())
    assert back.transform is None and math.isinf(back.chamfer) and not back.accepted
