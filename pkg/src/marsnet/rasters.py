"""Gridded raster types and the per-modality band derivation operators.

Everything downstream (label rasterization, patch extraction, prediction
mosaics) runs on a single north-up metric grid. A small equirectangular
projection anchored at a reference lon/lat maps geographic coordinates to
grid meters, which is accurate enough at the few-kilometer extents this
package targets and keeps the geometry math dependency-free.

Conventions, used consistently across the package:
  * raster data is (bands, height, width), row 0 at the north edge
  * one nodata plane per raster (a pixel is valid or not across all bands);
    band-specific invalid values are carried as NaN in the data itself
  * pixel centers sit at origin + (index + 0.5) * pixel_size
"""

from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

logger = logging.getLogger(__name__)

# meters per degree of latitude; longitude is scaled by cos(reference latitude)
M_PER_DEG = 111_320.0

MODALITY_ORDER = ("sentinel2", "sentinel1", "palsar2", "ancillary")
EXPECTED_BAND_COUNTS = {"sentinel2": 17, "sentinel1": 9, "palsar2": 4, "ancillary": 4}

S2_SPECTRAL_BANDS = (
    "B1", "B2", "B3", "B4", "B5", "B6", "B7", "B8", "B8A", "B9", "B11", "B12",
)
S2_COMPOSITE_BANDS = S2_SPECTRAL_BANDS + (
    "NDVI_median", "EVI_median", "NDVI_max", "NDVI_min", "NDVI_diff",
)
S1_SCENE_BANDS = ("VV", "VH", "VH_VV")
PALSAR_BANDS = ("HH", "HV", "HV_HH", "incidence_angle")
ANCILLARY_BANDS = ("elevation", "slope", "longitude", "latitude")

# index positions inside S2_SPECTRAL_BANDS
_BLUE, _RED, _NIR = 1, 3, 7


def meters_per_degree_lon(lat_deg: float) -> float:
    return M_PER_DEG * math.cos(math.radians(lat_deg))


@dataclass(frozen=True)
class GridGeometry:
    """North-up grid in local equirectangular meters.

    origin_x/origin_y are the projected coordinates of the grid's top-left
    *corner*; y decreases down the rows. ref_lon/ref_lat anchor the local
    projection: projected (0, 0) is at that geographic point.
    """

    origin_x: float
    origin_y: float
    pixel_size: float
    width: int
    height: int
    ref_lon: float = 0.0
    ref_lat: float = 0.0

    def __post_init__(self):
        if self.pixel_size <= 0:
            raise ValueError(f"pixel_size must be positive, got {self.pixel_size}")
        if self.width < 1 or self.height < 1:
            raise ValueError(f"grid must be at least 1x1, got {self.width}x{self.height}")
        if not -90.0 < self.ref_lat < 90.0:
            raise ValueError(f"ref_lat out of range: {self.ref_lat}")

    @property
    def shape(self) -> tuple[int, int]:
        return (self.height, self.width)

    def lonlat_to_xy(self, lon, lat):
        x = (np.asarray(lon, dtype=np.float64) - self.ref_lon) * meters_per_degree_lon(self.ref_lat)
        y = (np.asarray(lat, dtype=np.float64) - self.ref_lat) * M_PER_DEG
        return x, y

    def xy_to_lonlat(self, x, y):
        lon = np.asarray(x, dtype=np.float64) / meters_per_degree_lon(self.ref_lat) + self.ref_lon
        lat = np.asarray(y, dtype=np.float64) / M_PER_DEG + self.ref_lat
        return lon, lat

    def pixel_center_xy(self, row, col):
        x = self.origin_x + (np.asarray(col, dtype=np.float64) + 0.5) * self.pixel_size
        y = self.origin_y - (np.asarray(row, dtype=np.float64) + 0.5) * self.pixel_size
        return x, y

    def xy_to_rowcol(self, x, y):
        """Fractional pixel indices; (0, 0) is the center of the top-left pixel."""
        col = (np.asarray(x, dtype=np.float64) - self.origin_x) / self.pixel_size - 0.5
        row = (self.origin_y - np.asarray(y, dtype=np.float64)) / self.pixel_size - 0.5
        return row, col

    def lonlat_to_rowcol(self, lon, lat):
        return self.xy_to_rowcol(*self.lonlat_to_xy(lon, lat))

    def pixel_center_lonlat(self, row, col):
        return self.xy_to_lonlat(*self.pixel_center_xy(row, col))

    def same_anchor(self, other: "GridGeometry") -> bool:
        return self.ref_lon == other.ref_lon and self.ref_lat == other.ref_lat

    def to_dict(self) -> dict:
        return {
            "origin_x": self.origin_x,
            "origin_y": self.origin_y,
            "pixel_size": self.pixel_size,
            "width": self.width,
            "height": self.height,
            "ref_lon": self.ref_lon,
            "ref_lat": self.ref_lat,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "GridGeometry":
        return cls(**{k: d[k] for k in (
            "origin_x", "origin_y", "pixel_size", "width", "height", "ref_lon", "ref_lat")})


@dataclass(eq=False)
class Raster:
    """A band stack on a grid with a shared per-pixel validity plane."""

    geometry: GridGeometry
    data: np.ndarray
    nodata: np.ndarray = field(default=None)  # type: ignore[assignment]

    def __post_init__(self):
        self.data = np.asarray(self.data)
        if self.data.ndim != 3:
            raise ValueError(f"raster data must be (bands, height, width), got shape {self.data.shape}")
        if self.data.shape[1:] != (self.geometry.height, self.geometry.width):
            raise ValueError(
                f"data shape {self.data.shape[1:]} does not match grid "
                f"{(self.geometry.height, self.geometry.width)}")
        if self.nodata is None:
            self.nodata = np.zeros(self.data.shape[1:], dtype=bool)
        else:
            self.nodata = np.asarray(self.nodata, dtype=bool)
            if self.nodata.shape != self.data.shape[1:]:
                raise ValueError(f"nodata shape {self.nodata.shape} does not match data")

    @property
    def bands(self) -> int:
        return self.data.shape[0]


@dataclass
class ModalityStack:
    """A named, band-count-checked input stack for one sensor modality."""

    modality: str
    raster: Raster
    band_names: list[str]

    def __post_init__(self):
        if self.modality not in EXPECTED_BAND_COUNTS:
            raise ValueError(f"unknown modality '{self.modality}', expected one of {MODALITY_ORDER}")
        expected = EXPECTED_BAND_COUNTS[self.modality]
        if self.raster.bands != expected:
            raise ValueError(
                f"modality '{self.modality}' expects {expected} bands, got {self.raster.bands}")
        if len(self.band_names) != self.raster.bands:
            raise ValueError(
                f"modality '{self.modality}': {len(self.band_names)} band names "
                f"for {self.raster.bands} bands")


def dn_to_gamma0(dn):
    """Radar backscatter in dB from digital numbers: 10*log10(DN^2) - 83.

    Non-positive DN has no defined backscatter and comes back as NaN.
    Scalars in, scalar out; arrays in, array out.
    """
    arr = np.asarray(dn, dtype=np.float64)
    out = np.full(arr.shape, np.nan)
    valid = arr > 0
    out[valid] = 10.0 * np.log10(arr[valid] ** 2) - 83.0
    if np.isscalar(dn) or arr.ndim == 0:
        return float(out)
    return out


def gamma0_raster(raster: Raster) -> Raster:
    """Apply the DN -> gamma0 conversion to every band; DN <= 0 becomes nodata."""
    data = dn_to_gamma0(raster.data)
    bad = ~(raster.data > 0)
    nodata = raster.nodata | bad.any(axis=0)
    return Raster(raster.geometry, data, nodata)


def disk_kernel(radius_m: float, pixel_size: float) -> np.ndarray:
    """Boolean footprint of pixels whose centers lie within radius_m."""
    n = int(math.floor(radius_m / pixel_size))
    yy, xx = np.mgrid[-n:n + 1, -n:n + 1]
    return (yy.astype(np.float64) ** 2 + xx.astype(np.float64) ** 2) * pixel_size ** 2 <= radius_m ** 2


def speckle_filter(raster: Raster, radius_m: float = 50.0) -> Raster:
    """Circular focal mean over valid pixels, the usual boxcar-style despeckle.

    Pixels outside the grid and invalid pixels are excluded from each window
    mean. Output pixels keep their input validity; a valid pixel whose window
    contains no valid samples (cannot happen while the pixel itself is valid,
    but guarded anyway) becomes nodata.
    """
    if radius_m < raster.geometry.pixel_size:
        raise ValueError(
            f"speckle radius {radius_m} m is smaller than one pixel "
            f"({raster.geometry.pixel_size} m)")
    kernel = disk_kernel(radius_m, raster.geometry.pixel_size).astype(np.float64)
    out = np.empty_like(raster.data, dtype=np.float64)
    nodata = raster.nodata.copy()
    for b in range(raster.bands):
        band = raster.data[b].astype(np.float64)
        valid = ~raster.nodata & np.isfinite(band)
        vals = np.where(valid, band, 0.0)
        sums = ndimage.convolve(vals, kernel, mode="constant", cval=0.0)
        counts = ndimage.convolve(valid.astype(np.float64), kernel, mode="constant", cval=0.0)
        with np.errstate(invalid="ignore", divide="ignore"):
            out[b] = np.where(counts > 0, sums / counts, np.nan)
        nodata |= counts == 0
    return Raster(raster.geometry, out, nodata)


def temporal_percentiles(series: list[Raster], levels=(10, 50, 90)) -> Raster:
    """Per-pixel, per-band percentiles across a scene time series.

    Linear interpolation between order statistics. Band order of the result
    is band-major: all levels of input band 0, then band 1, and so on.
    A pixel with zero valid observations in every band becomes nodata.
    """
    if not series:
        raise ValueError("temporal_percentiles needs at least one scene")
    geom = series[0].geometry
    bands = series[0].bands
    for r in series[1:]:
        if r.geometry != geom:
            raise ValueError("scenes must share one grid geometry")
        if r.bands != bands:
            raise ValueError("scenes must share a band count")
    stack = np.stack([
        np.where(r.nodata[None, :, :] | ~np.isfinite(r.data), np.nan, r.data)
        for r in series
    ])  # (scenes, bands, h, w)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", category=RuntimeWarning)
        pct = np.nanpercentile(stack, list(levels), axis=0, method="linear")
    out = np.empty((bands * len(levels), geom.height, geom.width), dtype=np.float64)
    for b in range(bands):
        for i in range(len(levels)):
            out[b * len(levels) + i] = pct[i, b]
    nodata = np.all(~np.isfinite(out), axis=0)
    return Raster(geom, out, nodata)


def percentile_band_names(base_names, levels=(10, 50, 90)) -> list[str]:
    return [f"{name}_p{level}" for name in base_names for level in levels]


def sentinel1_composite(scenes: list[Raster], levels=(10, 50, 90)):
    """Despeckled C-band composite: {VV, VH, VH/VV} x percentile levels.

    Each scene is a 2-band (VV, VH) raster in linear power. The ratio is
    computed per scene before compositing; VV <= 0 leaves the ratio NaN for
    that scene. Returns (raster, band names).
    """
    enriched = []
    for scene in scenes:
        if scene.bands != 2:
            raise ValueError(f"expected 2-band (VV, VH) scenes, got {scene.bands} bands")
        vv, vh = scene.data[0], scene.data[1]
        with np.errstate(invalid="ignore", divide="ignore"):
            ratio = np.where(vv > 0, vh / vv, np.nan)
        enriched.append(Raster(scene.geometry, np.stack([vv, vh, ratio]), scene.nodata))
    composite = temporal_percentiles(enriched, levels)
    return composite, percentile_band_names(S1_SCENE_BANDS, levels)


def _vegetation_indices(scene_data: np.ndarray):
    red = scene_data[_RED]
    nir = scene_data[_NIR]
    blue = scene_data[_BLUE]
    with np.errstate(invalid="ignore", divide="ignore"):
        ndvi_den = nir + red
        ndvi = np.where(ndvi_den != 0, (nir - red) / ndvi_den, np.nan)
        evi_den = nir + 6.0 * red - 7.5 * blue + 1.0
        evi = np.where(evi_den != 0, 2.5 * (nir - red) / evi_den, np.nan)
    return ndvi, evi


def optical_composite(scenes: list[Raster]):
    """17-band optical composite from 12-band surface reflectance scenes.

    Bands: per-band temporal medians of the 12 spectral bands, then median
    NDVI, median EVI, NDVI max, NDVI min, and NDVI max - min. Index
    denominators of zero leave NaN in the index bands; a pixel valid in no
    scene at all becomes nodata. Returns (raster, band names).
    """
    if not scenes:
        raise ValueError("optical_composite needs at least one scene")
    geom = scenes[0].geometry
    for scene in scenes:
        if scene.bands != len(S2_SPECTRAL_BANDS):
            raise ValueError(
                f"expected {len(S2_SPECTRAL_BANDS)}-band scenes in order "
                f"{S2_SPECTRAL_BANDS}, got {scene.bands} bands")
        if scene.geometry != geom:
            raise ValueError("scenes must share one grid geometry")
    spectral = []
    ndvis = []
    evis = []
    valid_counts = np.zeros(geom.shape, dtype=np.int64)
    for scene in scenes:
        masked = np.where(scene.nodata[None, :, :] | ~np.isfinite(scene.data), np.nan, scene.data)
        spectral.append(masked)
        ndvi, evi = _vegetation_indices(masked)
        ndvis.append(ndvi)
        evis.append(evi)
        valid_counts += ~scene.nodata
    spectral = np.stack(spectral)  # (scenes, 12, h, w)
    ndvis = np.stack(ndvis)
    evis = np.stack(evis)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", category=RuntimeWarning)
        med = np.nanmedian(spectral, axis=0)
        ndvi_med = np.nanmedian(ndvis, axis=0)
        evi_med = np.nanmedian(evis, axis=0)
        ndvi_max = np.nanmax(ndvis, axis=0)
        ndvi_min = np.nanmin(ndvis, axis=0)
    data = np.concatenate([
        med,
        ndvi_med[None], evi_med[None], ndvi_max[None], ndvi_min[None],
        (ndvi_max - ndvi_min)[None],
    ])
    nodata = valid_counts == 0
    return Raster(geom, data, nodata), list(S2_COMPOSITE_BANDS)


def slope_from_dem(dem: Raster) -> Raster:
    """Terrain slope in degrees via central differences (one-sided at edges)."""
    if dem.bands != 1:
        raise ValueError(f"expected single-band DEM, got {dem.bands} bands")
    band = np.where(dem.nodata, np.nan, dem.data[0].astype(np.float64))
    gy, gx = np.gradient(band, dem.geometry.pixel_size)
    slope = np.degrees(np.arctan(np.hypot(gx, gy)))
    return Raster(dem.geometry, slope[None], ~np.isfinite(slope))


def coordinate_grids(geometry: GridGeometry):
    """Per-pixel centroid longitude and latitude as a 2-band raster."""
    rows, cols = np.mgrid[0:geometry.height, 0:geometry.width]
    lon, lat = geometry.pixel_center_lonlat(rows, cols)
    return Raster(geometry, np.stack([lon, lat])), ["longitude", "latitude"]


def _catmull_rom_weights(t: np.ndarray):
    """Weights for support points at offsets -1, 0, 1, 2; t in [0, 1)."""
    t2 = t * t
    t3 = t2 * t
    return (
        0.5 * (-t3 + 2.0 * t2 - t),
        0.5 * (3.0 * t3 - 5.0 * t2 + 2.0),
        0.5 * (-3.0 * t3 + 4.0 * t2 + t),
        0.5 * (t3 - t2),
    )


def resample_bicubic(source: Raster, target: GridGeometry) -> Raster:
    """Catmull-Rom bicubic resampling of source onto the target grid.

    The 4x4 support stencil is edge-clamped. A target pixel becomes nodata if
    its sample point falls outside the source extent or if any of its 16
    support pixels is nodata.
    """
    if not source.geometry.same_anchor(target):
        raise ValueError("source and target grids use different geographic anchors")
    sg = source.geometry
    rows, cols = np.mgrid[0:target.height, 0:target.width]
    x, y = target.pixel_center_xy(rows, cols)
    v, u = sg.xy_to_rowcol(x, y)
    outside = (u < -0.5) | (u > sg.width - 0.5) | (v < -0.5) | (v > sg.height - 0.5)

    i0 = np.floor(v).astype(np.int64)
    j0 = np.floor(u).astype(np.int64)
    ty = v - i0
    tx = u - j0
    wy = _catmull_rom_weights(ty)
    wx = _catmull_rom_weights(tx)
    row_idx = [np.clip(i0 + k, 0, sg.height - 1) for k in (-1, 0, 1, 2)]
    col_idx = [np.clip(j0 + k, 0, sg.width - 1) for k in (-1, 0, 1, 2)]

    out = np.zeros((source.bands, target.height, target.width), dtype=np.float64)
    support_nodata = np.zeros((target.height, target.width), dtype=bool)
    for a in range(4):
        for b in range(4):
            support_nodata |= source.nodata[row_idx[a], col_idx[b]]
            w = wy[a] * wx[b]
            out += w[None] * source.data[:, row_idx[a], col_idx[b]]
    nodata = outside | support_nodata
    out[:, nodata] = np.nan
    return Raster(target, out, nodata)


def footprint_pixels(geometry: GridGeometry, lon: float, lat: float, radius_m: float):
    """Grid pixels whose centers fall within radius_m of a point.

    Distances are measured on the local equirectangular plane evaluated at the
    *point's* latitude, so footprints near the grid edge are treated the same
    as interior ones. Returns (rows, cols, dist2_m2) as flat arrays; all empty
    when the point's disk misses the grid entirely.
    """
    m_lon = meters_per_degree_lon(lat)
    row_f, col_f = geometry.lonlat_to_rowcol(lon, lat)
    span = int(math.ceil(radius_m / geometry.pixel_size)) + 1
    r0 = max(0, int(math.floor(row_f)) - span)
    r1 = min(geometry.height - 1, int(math.ceil(row_f)) + span)
    c0 = max(0, int(math.floor(col_f)) - span)
    c1 = min(geometry.width - 1, int(math.ceil(col_f)) + span)
    if r0 > r1 or c0 > c1:
        empty = np.empty(0, dtype=np.int64)
        return empty, empty.copy(), np.empty(0, dtype=np.float64)
    rows, cols = np.mgrid[r0:r1 + 1, c0:c1 + 1]
    lon_c, lat_c = geometry.pixel_center_lonlat(rows, cols)
    dx = (lon_c - lon) * m_lon
    dy = (lat_c - lat) * M_PER_DEG
    d2 = dx * dx + dy * dy
    keep = d2 <= radius_m ** 2
    return rows[keep].astype(np.int64), cols[keep].astype(np.int64), d2[keep]


def point_sampler(raster: Raster, band: int = 0, fill: float = float("nan")):
    """Nearest-pixel lookup function (lon, lat) -> band value.

    Points off the grid or on nodata pixels return `fill`.
    """
    geom = raster.geometry
    data = raster.data[band]
    nodata = raster.nodata

    def sample(lon: float, lat: float) -> float:
        row, col = geom.lonlat_to_rowcol(lon, lat)
        r = int(math.floor(row + 0.5))
        c = int(math.floor(col + 0.5))
        if not (0 <= r < geom.height and 0 <= c < geom.width) or nodata[r, c]:
            return fill
        return float(data[r, c])

    return sample


def assemble_stacks(rasters: dict[str, Raster], band_names: dict[str, list[str]]) -> dict[str, ModalityStack]:
    """Validate and order per-modality rasters into named input stacks.

    Checks canonical band counts per modality and a shared grid geometry;
    errors name the offending modality. Output dict follows the canonical
    modality order restricted to the modalities given.
    """
    unknown = set(rasters) - set(MODALITY_ORDER)
    if unknown:
        raise ValueError(f"unknown modalities: {sorted(unknown)}")
    if not rasters:
        raise ValueError("no modalities given")
    stacks: dict[str, ModalityStack] = {}
    geom = None
    for name in MODALITY_ORDER:
        if name not in rasters:
            continue
        raster = rasters[name]
        if geom is None:
            geom = raster.geometry
        elif raster.geometry != geom:
            raise ValueError(f"modality '{name}' grid does not match the other modalities")
        if name not in band_names:
            raise ValueError(f"modality '{name}' is missing band names")
        stacks[name] = ModalityStack(name, raster, list(band_names[name]))
    total = sum(s.raster.bands for s in stacks.values())
    logger.debug("assembled %d modalities, %d bands total", len(stacks), total)
    return stacks
