"""Road-map geolocalization by intersection matching and geometric alignment."""

from roadloc.geometry import (
    AffineTransform2D,
    EmptyRegionError,
    GeoTransform,
    Intersection,
    Region,
    RoadRaster,
    RoadSegment,
    RoadVectorSet,
    crop_region,
    load_raster,
    make_intersection,
    save_raster,
)

__version__ = "0.1.0"
