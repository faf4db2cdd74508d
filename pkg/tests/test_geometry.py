import numpy as np
import pytest

from roadloc.geometry import (
    AffineTransform2D,
    EmptyRegionError,
    GeoTransform,
    Intersection,
    Region,
    RoadRaster,
    crop_region,
    load_raster,
    make_intersection,
    save_raster,
)


def test_identity_geo_maps_origin():
    geo = GeoTransform(0.0, 0.0, 1.0, 0.0)
    assert np.allclose(geo.pixel_to_world((0.0, 0.0)), (0.0, 0.0))


def test_pure_translation_north_up():
    # Row 0 is the northernmost row: +y moves south.
    geo = GeoTransform(100.0, 200.0, 1.0, 0.0)
    east, north = geo.pixel_to_world((10.0, 5.0))
    assert east == pytest.approx(110.0)
    assert north == pytest.approx(195.0)


def test_rotation_round_trip():
    geo = GeoTransform(0.0, 0.0, 2.0, 90.0)
    w = geo.pixel_to_world((1.0, 0.0))
    assert np.hypot(*w) == pytest.approx(2.0)
    assert np.allclose(geo.world_to_pixel(w), (1.0, 0.0), atol=1e-12)


def test_round_trip_random_transforms():
    rng = np.random.default_rng(0)
    for _ in range(1000):
        geo = GeoTransform(
            origin_east=float(rng.uniform(-1e4, 1e4)),
            origin_north=float(rng.uniform(-1e4, 1e4)),
            meters_per_pixel=float(rng.uniform(0.1, 10.0)),
            rotation_deg=float(rng.uniform(-180.0, 179.99)),
        )
        p = rng.uniform(-5e3, 5e3, size=2)
        back = geo.world_to_pixel(geo.pixel_to_world(p))
        assert np.max(np.abs(back - p)) < 1e-9


def test_geo_validation():
    with pytest.raises(ValueError):
        GeoTransform(0, 0, 0.0, 0)
    with pytest.raises(ValueError):
        GeoTransform(0, 0, 1.0, 180.0)


def test_raster_validation():
    geo = GeoTransform(0, 0)
    with pytest.raises(ValueError):
        RoadRaster(np.full((4, 4), 1.5), geo)
    with pytest.raises(ValueError):
        RoadRaster(np.zeros((0, 3)), geo)
    r = RoadRaster(np.zeros((3, 3)), geo)
    with pytest.raises(ValueError):
        r.values[0, 0] = 1.0  # immutable after construction


def _checker_raster(n=20):
    v = np.zeros((n, n), dtype=np.float32)
    v[::3, :] = 1.0
    v[:, ::4] = 1.0
    return RoadRaster(v, GeoTransform(50.0, 80.0, 1.0, 0.0))


def test_crop_full_extent_matches_original():
    r = _checker_raster()
    center = r.geo.pixel_to_world((r.width / 2, r.height / 2))
    crop = crop_region(r, center, radius_m=r.width)
    # Overlapping area must agree with the source pixel for pixel.
    for yq in range(crop.height):
        for xq in range(crop.width):
            src = crop.geo.pixel_to_world((xq, yq))
            sx, sy = np.rint(r.geo.world_to_pixel(src)).astype(int)
            if 0 <= sx < r.width and 0 <= sy < r.height:
                assert crop.values[yq, xq] == r.values[sy, sx]
            else:
                assert crop.values[yq, xq] == 0.0


def test_crop_fully_outside_raises():
    r = _checker_raster()
    with pytest.raises(EmptyRegionError):
        crop_region(r, (-500.0, -500.0), radius_m=10.0)


def test_crop_half_overlap_zero_fill_oracle():
    r = _checker_raster(16)
    # Center on the west edge of the raster: half of the window is outside.
    center = r.geo.pixel_to_world((0.0, 8.0))
    crop = crop_region(r, center, radius_m=4.0)
    assert crop.width == 8 and crop.height == 8
    # Direct index arithmetic oracle.
    cx, cy = np.rint(r.geo.world_to_pixel(center)).astype(int)
    x0, y0 = cx - 4, cy - 4
    for yq in range(8):
        for xq in range(8):
            sx, sy = x0 + xq, y0 + yq
            want = r.values[sy, sx] if (0 <= sx < r.width and 0 <= sy < r.height) else 0.0
            assert crop.values[yq, xq] == want


def test_crop_preserves_georeference():
    rng = np.random.default_rng(7)
    for _ in range(50):
        geo = GeoTransform(
            float(rng.uniform(-100, 100)),
            float(rng.uniform(-100, 100)),
            float(rng.uniform(0.5, 3.0)),
            float(rng.uniform(-180, 179.9)),
        )
        r = RoadRaster(np.zeros((40, 40), dtype=np.float32), geo)
        center = geo.pixel_to_world(rng.uniform(5, 35, size=2))
        crop = crop_region(r, center, radius_m=8.0 * geo.meters_per_pixel)
        side = crop.width
        center_px_world = crop.geo.pixel_to_world((side // 2, side // 2))
        err_px = np.abs(crop.geo.world_to_pixel(center) - np.array([side // 2, side // 2]))
        assert np.max(err_px) <= 0.5 + 1e-9
        assert np.hypot(*(np.asarray(center_px_world) - np.asarray(center))) <= 0.75 * geo.meters_per_pixel


def test_intersection_world_pixel_consistency():
    geo = GeoTransform(10.0, 20.0, 2.0, 30.0)
    i = make_intersection(geo, (3.25, 7.5), id=4, score=0.8)
    world = geo.pixel_to_world((3.25, 7.5))
    assert np.hypot(*(np.asarray(i.world_pos) - world)) < 1e-6


def test_region_membership_validation():
    geo = GeoTransform(0, 0)
    a = make_intersection(geo, (0, 0), id=0)
    b = make_intersection(geo, (3, 4), id=1)
    Region(a, 5.0, (a, b))
    with pytest.raises(ValueError):
        Region(a, 4.9, (a, b))
    with pytest.raises(ValueError):
        Region(a, 5.0, (b,))


def test_affine_transform_basics():
    t = AffineTransform2D.rotation_about((10.0, 10.0), 90.0, translation=(1.0, 2.0))
    p = np.array([12.0, 10.0])
    q = t.apply(p)
    assert np.allclose(q, (11.0, 14.0))
    assert np.allclose(t.inverse().apply(q), p)
    assert t.det == pytest.approx(1.0)
    u = AffineTransform2D.from_list(t.to_list())
    assert np.allclose(u.matrix, t.matrix)


def test_affine_composition():
    rng = np.random.default_rng(3)
    for _ in range(20):
        a = AffineTransform2D(rng.normal(size=(2, 3)))
        b = AffineTransform2D(rng.normal(size=(2, 3)))
        p = rng.normal(size=(5, 2))
        assert np.allclose(a.then(b).apply(p), b.apply(a.apply(p)), atol=1e-9)


def test_pgm_round_trip_byte_exact(tmp_path):
    rng = np.random.default_rng(11)
    values = (rng.random((13, 17)) < 0.4).astype(np.float32)
    r = RoadRaster(values, GeoTransform(-4.5, 99.0, 0.5, 12.0))
    p1 = tmp_path / "a.pgm"
    save_raster(r, p1)
    r2 = load_raster(p1)
    assert np.array_equal(r.values, r2.values)
    assert r2.geo == r.geo
    p2 = tmp_path / "b.pgm"
    save_raster(r2, p2)
    assert p1.read_bytes() == p2.read_bytes()
    assert p1.with_suffix(".json").read_bytes() == p2.with_suffix(".json").read_bytes()


def test_load_raster_missing_sidecar(tmp_path):
    p = tmp_path / "x.pgm"
    save_raster(RoadRaster(np.zeros((2, 2)), GeoTransform(0, 0)), p)
    p.with_suffix(".json").unlink()
    with pytest.raises(ValueError):
        load_raster(p)
