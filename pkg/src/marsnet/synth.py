"""Deterministic synthetic world for desk-scale runs of the whole pipeline.

The generator builds a smooth canopy height field and derives every input
from it through documented closed-form responses plus seeded noise:

  * optical scenes: 12 reflectance bands linear in normalized height, with
    red falling and NIR rising so NDVI grows with canopy height
  * C-band radar scenes: VV/VH linear power rising with height
  * L-band radar: digital numbers rising with height, generated on a coarse
    25 m grid and bicubically resampled to exercise the resampler
  * ancillary: an independent smooth DEM (slope derived from it) plus the
    coordinate bands
  * footprints: a jittered lattice with rh98 = (height - b) / a so the field
    calibration recovers (a, b) = (0.73, 7.86); lower RH levels are monotone
    fractions of the profile
  * field plots: tree lists whose top-10 mean equals a*rh98 + b plus noise

Every screening rule gets planted violators, each failing exactly one rule,
recorded per rule in `planted` so tests can assert the cascade drops exactly
what was planted. All randomness flows from one seed through named child
streams, so equal seeds give byte-equal worlds.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .gedi import RH_LEVELS, FieldPlot, FootprintRecord
from .rasters import (
    ANCILLARY_BANDS,
    PALSAR_BANDS,
    GridGeometry,
    ModalityStack,
    Raster,
    assemble_stacks,
    coordinate_grids,
    gamma0_raster,
    optical_composite,
    resample_bicubic,
    sentinel1_composite,
    slope_from_dem,
    speckle_filter,
)

logger = logging.getLogger(__name__)

# the linear law the field calibration is expected to recover
HEIGHT_FROM_RH98_SLOPE = 0.73
HEIGHT_FROM_RH98_INTERCEPT = 7.86

# reflectance response per optical band: (base, gain) applied to normalized height
_S2_RESPONSES = (
    (0.08, 0.01), (0.06, 0.01), (0.08, 0.02), (0.16, -0.10),  # B1 B2 B3 B4
    (0.18, 0.02), (0.22, 0.05), (0.26, 0.08), (0.22, 0.25),   # B5 B6 B7 B8
    (0.24, 0.24), (0.12, 0.05), (0.22, -0.08), (0.16, -0.06),  # B8A B9 B11 B12
)

_RH_BASE_FRACTIONS = {60: 0.40, 65: 0.46, 70: 0.53, 75: 0.60,
                      80: 0.68, 85: 0.76, 90: 0.85, 95: 0.93, 98: 1.0}

VIOLATION_KINDS = ("quality", "degraded", "daytime", "beam",
                   "sensitivity_low", "sensitivity_high", "ndvi_consistency")


@dataclass
class SynthWorld:
    """Generation parameters. Sizes are in 10 m pixels unless noted."""

    seed: int = 0
    width: int = 256
    height: int = 256
    pixel_size: float = 10.0
    ref_lon: float = 12.5
    ref_lat: float = 48.2
    footprint_spacing_px: int = 6
    footprint_diameter_m: float = 25.0
    n_field_plots: int = 24
    n_optical_scenes: int = 5
    n_sar_scenes: int = 6
    height_range: tuple[float, float] = (5.0, 35.0)
    violation_fraction: float = 0.03    # per planted violation kind

    def validate(self) -> None:
        if self.width < 128 or self.height < 128:
            raise ValueError("synthetic worlds start at 128x128 pixels (two patch rows)")
        if self.footprint_spacing_px < 2:
            raise ValueError("footprint spacing must be at least 2 pixels")
        if self.n_field_plots < 2:
            raise ValueError("need at least 2 field plots for calibration")
        if self.n_optical_scenes < 1 or self.n_sar_scenes < 1:
            raise ValueError("need at least one scene per sensor")
        lo, hi = self.height_range
        if not 0 < lo < hi:
            raise ValueError(f"height range must be 0 < low < high, got {self.height_range}")

    def to_dict(self) -> dict:
        d = {k: getattr(self, k) for k in (
            "seed", "width", "height", "pixel_size", "ref_lon", "ref_lat",
            "footprint_spacing_px", "footprint_diameter_m", "n_field_plots",
            "n_optical_scenes", "n_sar_scenes", "violation_fraction")}
        d["height_range"] = list(self.height_range)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SynthWorld":
        d = dict(d)
        d["height_range"] = tuple(d["height_range"])
        return cls(**d)


@dataclass
class SynthDataset:
    world: SynthWorld
    grid: GridGeometry
    stacks: dict[str, ModalityStack]
    band_names: dict[str, list[str]]
    footprints: list[FootprintRecord]
    plots: list[FieldPlot]
    forest_mask: Raster
    ndvi: Raster
    true_height: Raster
    planted: dict[str, list[str]] = field(default_factory=dict)


def _smooth_field(rng: np.random.Generator, shape, sigma_px: float) -> np.ndarray:
    """Unit-range smooth random field in [0, 1]."""
    noise = rng.normal(size=shape)
    sm = ndimage.gaussian_filter(noise, sigma=sigma_px)
    lo, hi = sm.min(), sm.max()
    return (sm - lo) / (hi - lo)


def _rh_profile(rng: np.random.Generator, rh98: float) -> dict[int, float]:
    """A monotone RH profile ending exactly at rh98.

    Levels below 98 sit at rh98 minus a descending share of the profile
    scale, which keeps the profile non-decreasing whatever the sign of rh98.
    """
    fracs = np.array([_RH_BASE_FRACTIONS[l] for l in RH_LEVELS])
    jitter = rng.uniform(-0.02, 0.02, size=len(RH_LEVELS) - 1)
    fracs = np.concatenate([np.sort(np.clip(fracs[:-1] + jitter, 0.05, 0.985)), [1.0]])
    scale = max(rh98, 2.0)
    return {level: float(rh98 - (1.0 - frac) * scale)
            for level, frac in zip(RH_LEVELS, fracs)}


def _nearest_values(plane: np.ndarray, rows: np.ndarray, cols: np.ndarray) -> np.ndarray:
    r = np.clip(np.floor(rows + 0.5).astype(np.int64), 0, plane.shape[0] - 1)
    c = np.clip(np.floor(cols + 0.5).astype(np.int64), 0, plane.shape[1] - 1)
    return plane[r, c]


def _optical_scenes(rng, grid, h_norm, n_scenes) -> list[Raster]:
    scenes = []
    for _ in range(n_scenes):
        scene_gain = 1.0 + rng.normal(0.0, 0.01)
        bands = []
        for base, gain in _S2_RESPONSES:
            band = (base + gain * h_norm) * scene_gain + rng.normal(0.0, 0.008, h_norm.shape)
            bands.append(np.clip(band, 0.001, 1.0))
        scenes.append(Raster(grid, np.stack(bands)))
    return scenes


def _sar_scenes(rng, grid, h_norm, n_scenes) -> list[Raster]:
    scenes = []
    for _ in range(n_scenes):
        vv = 0.020 + 0.040 * h_norm + rng.normal(0.0, 0.004, h_norm.shape)
        vh = 0.008 + 0.030 * h_norm + rng.normal(0.0, 0.003, h_norm.shape)
        scenes.append(Raster(grid, np.stack([
            np.clip(vv, 1e-4, None), np.clip(vh, 1e-4, None)])))
    return scenes


def _palsar_stack(rng, grid: GridGeometry, heights: np.ndarray,
                  height_range) -> Raster:
    """L-band bands generated at 25 m and bicubically resampled to the grid."""
    coarse_px = 25.0
    extent_x = grid.width * grid.pixel_size
    extent_y = grid.height * grid.pixel_size
    coarse = GridGeometry(
        origin_x=grid.origin_x, origin_y=grid.origin_y, pixel_size=coarse_px,
        width=int(math.ceil(extent_x / coarse_px)) + 2,
        height=int(math.ceil(extent_y / coarse_px)) + 2,
        ref_lon=grid.ref_lon, ref_lat=grid.ref_lat)
    rows_c, cols_c = np.mgrid[0:coarse.height, 0:coarse.width]
    x_c, y_c = coarse.pixel_center_xy(rows_c, cols_c)
    rows_f, cols_f = grid.xy_to_rowcol(x_c, y_c)
    h_coarse = _nearest_values(heights, rows_f, cols_f)
    lo, hi = height_range
    h_norm = (h_coarse - lo) / (hi - lo)

    dn_hh = np.clip(1800.0 + 2200.0 * h_norm + rng.normal(0.0, 80.0, h_norm.shape), 1.0, None)
    dn_hv = np.clip(1200.0 + 2600.0 * h_norm + rng.normal(0.0, 80.0, h_norm.shape), 1.0, None)
    gamma = gamma0_raster(Raster(coarse, np.stack([dn_hh, dn_hv])))
    ratio = gamma.data[1] / gamma.data[0]      # both strictly negative dB here
    incidence = 34.0 + 4.0 * (cols_c / max(coarse.width - 1, 1)) \
        + rng.normal(0.0, 0.2, h_norm.shape)
    coarse_raster = Raster(coarse, np.stack([gamma.data[0], gamma.data[1], ratio, incidence]),
                           gamma.nodata)
    return resample_bicubic(coarse_raster, grid)


def generate(world: SynthWorld) -> SynthDataset:
    """Build the full synthetic dataset; equal worlds generate equal bytes."""
    world.validate()
    root = np.random.default_rng(world.seed)
    (terrain_rng, forest_rng, optical_rng, sar_rng, palsar_rng,
     dem_rng, footprint_rng, plot_rng) = root.spawn(8)

    grid = GridGeometry(
        origin_x=0.0, origin_y=0.0, pixel_size=world.pixel_size,
        width=world.width, height=world.height,
        ref_lon=world.ref_lon, ref_lat=world.ref_lat)
    shape = (world.height, world.width)
    lo, hi = world.height_range

    heights = lo + (hi - lo) * _smooth_field(terrain_rng, shape, sigma_px=10.0)
    h_norm = (heights - lo) / (hi - lo)
    forest_field = _smooth_field(forest_rng, shape, sigma_px=14.0)
    forest = forest_field > np.quantile(forest_field, 0.15)

    s2_scenes = _optical_scenes(optical_rng, grid, h_norm, world.n_optical_scenes)
    s2_raster, s2_names = optical_composite(s2_scenes)

    s1_scenes = [speckle_filter(s) for s in _sar_scenes(sar_rng, grid, h_norm,
                                                        world.n_sar_scenes)]
    s1_raster, s1_names = sentinel1_composite(s1_scenes)

    palsar_raster = _palsar_stack(palsar_rng, grid, heights, world.height_range)

    dem = Raster(grid, (600.0 + 150.0 * _smooth_field(dem_rng, shape, 16.0))[None])
    slope = slope_from_dem(dem)
    coords, _ = coordinate_grids(grid)
    ancillary = Raster(grid, np.concatenate([dem.data, slope.data, coords.data]))

    band_names = {
        "sentinel2": list(s2_names),
        "sentinel1": list(s1_names),
        "palsar2": list(PALSAR_BANDS),
        "ancillary": list(ANCILLARY_BANDS),
    }
    stacks = assemble_stacks(
        {"sentinel2": s2_raster, "sentinel1": s1_raster,
         "palsar2": palsar_raster, "ancillary": ancillary},
        band_names)

    ndvi_index = s2_names.index("NDVI_median")
    ndvi_raster = Raster(grid, s2_raster.data[ndvi_index][None].copy(), s2_raster.nodata.copy())
    ndvi_plane = ndvi_raster.data[0]

    footprints, planted = _footprints(
        world, grid, heights, forest, ndvi_plane, footprint_rng)
    plots = _field_plots(world, footprints, planted, plot_rng)

    logger.info("synthetic world: %d footprints (%d planted violators), %d plots",
                len(footprints), sum(len(v) for v in planted.values()), len(plots))
    return SynthDataset(
        world=world, grid=grid, stacks=stacks, band_names=band_names,
        footprints=footprints, plots=plots,
        forest_mask=Raster(grid, forest.astype(np.float32)[None]),
        ndvi=ndvi_raster,
        true_height=Raster(grid, heights[None]),
        planted=planted)


def _footprints(world, grid, heights, forest, ndvi_plane, rng):
    spacing = world.footprint_spacing_px
    row_centers = np.arange(spacing // 2, world.height - 1, spacing, dtype=np.float64)
    col_centers = np.arange(spacing // 2, world.width - 1, spacing, dtype=np.float64)

    positions = []
    for r in row_centers:
        for c in col_centers:
            rf = r + rng.uniform(-0.35, 0.35) * spacing
            cf = c + rng.uniform(-0.35, 0.35) * spacing
            positions.append((rf, cf))
    n = len(positions)
    rows = np.array([p[0] for p in positions])
    cols = np.array([p[1] for p in positions])
    lon, lat = grid.pixel_center_lonlat(rows, cols)
    h_true = _nearest_values(heights, rows, cols)
    on_forest = _nearest_values(forest.astype(np.float64), rows, cols) > 0.5
    ndvi_here = _nearest_values(ndvi_plane, rows, cols)

    # plant each violation kind on its own chunk of forest-positioned
    # footprints so each planted record fails exactly one screening rule
    forest_idx = np.flatnonzero(on_forest)
    forest_idx = forest_idx[rng.permutation(forest_idx.size)]
    per_kind = max(2, int(round(world.violation_fraction * forest_idx.size)))
    if per_kind * len(VIOLATION_KINDS) > forest_idx.size // 2:
        raise ValueError("world too small for the requested violation fraction")
    violation_of: dict[int, str] = {}
    planted: dict[str, list[str]] = {kind: [] for kind in VIOLATION_KINDS}
    planted["non_forest"] = []
    cursor = 0
    for kind in VIOLATION_KINDS:
        for idx in forest_idx[cursor:cursor + per_kind]:
            violation_of[int(idx)] = kind
        cursor += per_kind

    records = []
    for i in range(n):
        fid = f"F{i:05d}"
        kind = violation_of.get(i)
        cover = float(np.clip(ndvi_here[i] + rng.normal(0.0, 0.015), 0.0, 1.0))
        rh98 = (h_true[i] - HEIGHT_FROM_RH98_INTERCEPT) / HEIGHT_FROM_RH98_SLOPE \
            + rng.normal(0.0, 0.25)
        sensitivity = float(rng.uniform(0.98, 1.0) if cover >= 0.8
                            else rng.uniform(0.95, 1.0))
        beam = "power"
        quality_ok, degraded, daytime = True, False, False

        if kind == "quality":
            quality_ok = False
        elif kind == "degraded":
            degraded = True
        elif kind == "daytime":
            daytime = True
        elif kind == "beam":
            beam = "coverage"
        elif kind == "sensitivity_low":
            cover = min(cover, 0.75)
            sensitivity = float(rng.uniform(0.90, 0.945))
        elif kind == "sensitivity_high":
            cover = float(min(max(cover, 0.82), 1.0))
            sensitivity = float(rng.uniform(0.952, 0.979))
        elif kind == "ndvi_consistency":
            cover = float(np.clip(
                ndvi_here[i] - 0.55 if ndvi_here[i] >= 0.58 else ndvi_here[i] + 0.55,
                0.0, 1.0))
            sensitivity = 0.99
        if kind:
            planted[kind].append(fid)
        elif not on_forest[i]:
            planted["non_forest"].append(fid)

        records.append(FootprintRecord(
            footprint_id=fid, lon=float(lon[i]), lat=float(lat[i]),
            rh=_rh_profile(rng, float(rh98)),
            sensitivity=sensitivity, canopy_cover=cover, beam=beam,
            quality_ok=quality_ok, degraded=degraded, daytime=daytime,
            acquired_month=int(rng.integers(1, 13))))
    return records, planted


def _field_plots(world, footprints, planted, rng):
    flagged = {fid for ids in planted.values() for fid in ids}
    clean = [r for r in footprints if r.footprint_id not in flagged]
    if len(clean) < world.n_field_plots:
        raise ValueError(
            f"only {len(clean)} clean footprints for {world.n_field_plots} plots")
    chosen = rng.choice(len(clean), size=world.n_field_plots, replace=False)
    plots = []
    for k, idx in enumerate(sorted(int(i) for i in chosen)):
        record = clean[idx]
        dominant = HEIGHT_FROM_RH98_SLOPE * record.rh[98] \
            + HEIGHT_FROM_RH98_INTERCEPT + rng.normal(0.0, 0.35)
        top = rng.normal(dominant, 0.8, size=10)
        top = top - top.mean() + dominant          # top-10 mean is exactly the target
        top = np.maximum(top, 0.5)
        n_low = int(rng.integers(15, 46))
        low_hi = 0.95 * float(top.min())
        low_lo = max(0.4, 0.4 * low_hi)
        understory = rng.uniform(low_lo, max(low_hi, low_lo + 0.1), size=n_low)
        plots.append(FieldPlot(
            plot_id=f"P{k:03d}",
            lon=record.lon + rng.normal(0.0, 1e-5),
            lat=record.lat + rng.normal(0.0, 1e-5),
            tree_heights=[float(h) for h in np.concatenate([top, understory])],
            matched_footprint_id=record.footprint_id))
    return plots
