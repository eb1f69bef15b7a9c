"""Spaceborne LiDAR footprint handling: screening, field calibration, labels.

A footprint arrives with relative-height (RH) percentiles, acquisition flags,
and beam sensitivity. Four screens run in a fixed order, each consuming the
survivors of the previous one:

  1. quality:            usable algorithm result, night, undegraded, power beam
  2. sensitivity/cover:  sparse canopy (cover < 0.8) needs sensitivity >= 0.95,
                         dense canopy needs >= 0.98; both boundaries inclusive
  3. NDVI consistency:   |cover - NDVI| must not exceed the population
                         mean + one (population) standard deviation
  4. forest mask:        footprint center must land on mapped forest

Surviving RH98 values are converted to dominant height with a linear model
fit against field plots (y = slope * rh98 + intercept) and rasterized onto
the working grid for use as sparse regression labels.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass

import numpy as np

from .metrics import MetricsReport, ols_fit, regression_metrics
from .rasters import GridGeometry, Raster, footprint_pixels

logger = logging.getLogger(__name__)

RH_LEVELS = (60, 65, 70, 75, 80, 85, 90, 95, 98)

FIELD_STATISTICS = ("max", "top5_mean", "top10_mean", "top15_mean", "top20_mean", "all_mean")

BEAM_KINDS = ("power", "coverage")


@dataclass
class FootprintRecord:
    """One LiDAR footprint with its RH profile and screening attributes."""

    footprint_id: str
    lon: float
    lat: float
    rh: dict[int, float]          # level -> meters, all of RH_LEVELS present
    sensitivity: float
    canopy_cover: float
    beam: str                     # "power" or "coverage"
    quality_ok: bool
    degraded: bool
    daytime: bool
    acquired_month: int

    def __post_init__(self):
        missing = [l for l in RH_LEVELS if l not in self.rh]
        if missing:
            raise ValueError(f"footprint {self.footprint_id}: missing RH levels {missing}")
        values = [self.rh[l] for l in RH_LEVELS]
        for a, b in zip(values, values[1:]):
            if b < a:
                raise ValueError(
                    f"footprint {self.footprint_id}: RH values must be non-decreasing in level")
        if not 0.0 <= self.sensitivity <= 1.0:
            raise ValueError(f"footprint {self.footprint_id}: sensitivity out of [0, 1]")
        if not 0.0 <= self.canopy_cover <= 1.0:
            raise ValueError(f"footprint {self.footprint_id}: canopy cover out of [0, 1]")
        if self.beam not in BEAM_KINDS:
            raise ValueError(f"footprint {self.footprint_id}: beam must be one of {BEAM_KINDS}")
        if not 1 <= self.acquired_month <= 12:
            raise ValueError(f"footprint {self.footprint_id}: month out of range")


@dataclass
class FieldPlot:
    """A ground inventory plot, optionally matched to one footprint."""

    plot_id: str
    lon: float
    lat: float
    tree_heights: list[float]
    matched_footprint_id: str | None = None

    def __post_init__(self):
        if not self.tree_heights:
            raise ValueError(f"plot {self.plot_id}: needs at least one tree height")
        if any(h <= 0 for h in self.tree_heights):
            raise ValueError(f"plot {self.plot_id}: tree heights must be positive")


@dataclass
class CalibrationModel:
    """Linear RH98 -> dominant height model with its fit diagnostics."""

    slope: float
    intercept: float
    r2: float | None
    rrmse_pct: float | None
    n: int

    def to_dict(self) -> dict:
        return {"slope": self.slope, "intercept": self.intercept,
                "r2": self.r2, "rrmse_pct": self.rrmse_pct, "n": self.n}


# ---------------------------------------------------------------------------
# screening


def quality_filter(records) -> list[FootprintRecord]:
    """Keep night-time, undegraded, good-quality power-beam footprints."""
    return [r for r in records
            if r.quality_ok and not r.degraded and not r.daytime and r.beam == "power"]


def sensitivity_cover_filter(records) -> list[FootprintRecord]:
    """Cover-dependent sensitivity screen; both thresholds are inclusive."""
    kept = []
    for r in records:
        needed = 0.98 if r.canopy_cover >= 0.8 else 0.95
        if r.sensitivity >= needed:
            kept.append(r)
    return kept


def ndvi_consistency_filter(records, ndvi_at) -> list[FootprintRecord]:
    """Drop footprints whose cover disagrees with optical NDVI.

    d = |cover - NDVI(lon, lat)|; a record is kept when d <= mean(d) + std(d)
    over the records reaching this screen (population std). Records whose
    NDVI lookup is non-finite are dropped and excluded from the statistics.
    With fewer than 2 finite distances the screen cannot be calibrated and
    passes everything through with a warning.
    """
    records = list(records)
    dists = np.array([abs(r.canopy_cover - ndvi_at(r.lon, r.lat)) for r in records],
                     dtype=np.float64)
    finite = np.isfinite(dists)
    if finite.sum() < 2:
        warnings.warn("NDVI consistency screen has fewer than 2 usable records; passing all through")
        return records
    threshold = float(dists[finite].mean() + dists[finite].std(ddof=0))
    return [r for r, d in zip(records, dists) if np.isfinite(d) and d <= threshold]


def forest_mask_filter(records, forest_at) -> list[FootprintRecord]:
    """Keep footprints whose center lands on mapped forest."""
    return [r for r in records if bool(forest_at(r.lon, r.lat))]


@dataclass
class FilterReport:
    kept: list[FootprintRecord]
    dropped: list[tuple[str, str]]        # (footprint_id, stage name)
    stage_counts: dict[str, int]          # records *remaining* after each stage


def apply_filters(records, ndvi_at=None, forest_at=None) -> FilterReport:
    """Run the screening cascade in order, tracking which stage dropped what.

    The NDVI and forest stages are skipped when their lookup is not given.
    """
    stages: list[tuple[str, object]] = [
        ("quality", quality_filter),
        ("sensitivity_cover", sensitivity_cover_filter),
    ]
    if ndvi_at is not None:
        stages.append(("ndvi_consistency", lambda rs: ndvi_consistency_filter(rs, ndvi_at)))
    if forest_at is not None:
        stages.append(("forest_mask", lambda rs: forest_mask_filter(rs, forest_at)))

    current = list(records)
    total = len(current)
    dropped: list[tuple[str, str]] = []
    stage_counts: dict[str, int] = {}
    for name, fn in stages:
        survivors = fn(current)
        kept_ids = {r.footprint_id for r in survivors}
        dropped.extend((r.footprint_id, name) for r in current if r.footprint_id not in kept_ids)
        stage_counts[name] = len(survivors)
        current = survivors
    logger.info("screening kept %d of %d footprints", len(current), total)
    return FilterReport(kept=current, dropped=dropped, stage_counts=stage_counts)


# ---------------------------------------------------------------------------
# field statistics and calibration


def field_statistic(tree_heights, statistic: str) -> tuple[float, bool]:
    """A plot-level dominant-height statistic.

    "topK_mean" averages the K tallest trees; a plot with fewer than K trees
    uses all of them and is flagged (second return value True).
    """
    heights = sorted(tree_heights, reverse=True)
    if statistic == "max":
        return heights[0], False
    if statistic == "all_mean":
        return float(np.mean(heights)), False
    if statistic.startswith("top") and statistic.endswith("_mean"):
        k = int(statistic[3:-5])
        short = len(heights) < k
        return float(np.mean(heights[:k])), short
    raise ValueError(f"unknown field statistic '{statistic}', expected one of {FIELD_STATISTICS}")


def matched_pairs(plots, records, statistic: str = "top10_mean", level: int = 98):
    """(rh_value, field_value) pairs for plots matched to a footprint.

    Returns (pairs, short_plot_ids): pairs in plot order, and the ids of
    plots whose statistic had to fall back to fewer trees than requested.
    """
    by_id = {r.footprint_id: r for r in records}
    pairs: list[tuple[float, float]] = []
    short: list[str] = []
    for plot in plots:
        if plot.matched_footprint_id is None:
            continue
        record = by_id.get(plot.matched_footprint_id)
        if record is None:
            continue
        value, flagged = field_statistic(plot.tree_heights, statistic)
        if flagged:
            short.append(plot.plot_id)
        pairs.append((record.rh[level], value))
    return pairs, short


@dataclass
class RhFieldTable:
    """Per (RH level, field statistic) agreement table.

    cells maps (level, statistic) to a MetricsReport where "predicted" is the
    per-cell least-squares line evaluated at the RH values, i.e. the table
    scores how well each RH level linearly explains each field statistic.
    """

    levels: tuple[int, ...]
    statistics: tuple[str, ...]
    cells: dict[tuple[int, str], MetricsReport]
    short_plots: dict[str, list[str]]

    def best_cell(self) -> tuple[int, str]:
        scored = {k: v.r2 for k, v in self.cells.items() if v.r2 is not None}
        if not scored:
            raise ValueError("no cell has a defined r2")
        return max(scored, key=scored.get)


def rh_field_correlation(plots, records, levels=RH_LEVELS,
                         statistics=FIELD_STATISTICS) -> RhFieldTable:
    """Score every RH level against every field statistic on matched plots."""
    cells: dict[tuple[int, str], MetricsReport] = {}
    short_plots: dict[str, list[str]] = {}
    n_pairs = None
    for statistic in statistics:
        for level in levels:
            pairs, short = matched_pairs(plots, records, statistic, level)
            if len(pairs) < 2:
                raise ValueError(
                    f"rh_field_correlation needs at least 2 matched plots, got {len(pairs)}")
            n_pairs = len(pairs)
            rh = np.array([p[0] for p in pairs])
            fld = np.array([p[1] for p in pairs])
            slope, intercept = ols_fit(rh, fld)
            cells[(level, statistic)] = regression_metrics(fld, slope * rh + intercept)
        short_plots[statistic] = short
    logger.info("rh/field table over %s matched plots", n_pairs)
    return RhFieldTable(tuple(levels), tuple(statistics), cells, short_plots)


def fit_calibration(pairs) -> CalibrationModel:
    """Fit dominant height = slope * rh98 + intercept from (rh98, field) pairs."""
    if len(pairs) < 2:
        raise ValueError(f"calibration needs at least 2 pairs, got {len(pairs)}")
    rh = np.array([p[0] for p in pairs], dtype=np.float64)
    fld = np.array([p[1] for p in pairs], dtype=np.float64)
    slope, intercept = ols_fit(rh, fld)
    report = regression_metrics(fld, slope * rh + intercept)
    return CalibrationModel(slope=slope, intercept=intercept,
                            r2=report.r2, rrmse_pct=report.rrmse_pct, n=len(pairs))


def apply_calibration(model: CalibrationModel, rh98):
    """Dominant height in meters for scalar or array RH98."""
    out = model.slope * np.asarray(rh98, dtype=np.float64) + model.intercept
    if np.isscalar(rh98):
        return float(out)
    return out


# ---------------------------------------------------------------------------
# structure stratification


@dataclass
class GroupSummary:
    """Agreement summary for one canopy-structure group.

    Offsets are reported in both regression directions because the choice of
    axis changes the intercept: `intercept_field_on_rh98` is b in
    field = a * rh98 + b, `intercept_rh98_on_field` is b in
    rh98 = a * field + b. mean_diff_m is mean(rh98 - field).
    """

    label: str
    n: int
    intercept_field_on_rh98: float | None
    intercept_rh98_on_field: float | None
    mean_diff_m: float | None


def stratify_by_rh_ratio(plots, records, threshold: float = 0.9,
                         statistic: str = "top10_mean"):
    """Split matched pairs by the rh80/rh98 profile-shape ratio.

    Pairs with rh98 <= 0 have no usable ratio; they are excluded with a
    warning. Returns (high_group, low_group) where high means
    rh80/rh98 >= threshold (top-heavy profiles). Groups with fewer than two
    pairs report None offsets.
    """
    by_id = {r.footprint_id: r for r in records}
    groups: dict[str, list[tuple[float, float]]] = {"high": [], "low": []}
    excluded = 0
    for plot in plots:
        record = by_id.get(plot.matched_footprint_id) if plot.matched_footprint_id else None
        if record is None:
            continue
        rh98 = record.rh[98]
        if rh98 <= 0:
            excluded += 1
            continue
        value, _ = field_statistic(plot.tree_heights, statistic)
        ratio = record.rh[80] / rh98
        groups["high" if ratio >= threshold else "low"].append((rh98, value))
    if excluded:
        warnings.warn(f"stratification excluded {excluded} pairs with rh98 <= 0")

    def summarize(label: str, pairs) -> GroupSummary:
        n = len(pairs)
        if n < 2:
            return GroupSummary(label, n, None, None,
                                float(np.mean([a - b for a, b in pairs])) if pairs else None)
        rh = np.array([p[0] for p in pairs])
        fld = np.array([p[1] for p in pairs])
        try:
            _, b_fwd = ols_fit(rh, fld)
            _, b_rev = ols_fit(fld, rh)
        except ValueError:
            b_fwd = b_rev = None
        return GroupSummary(label, n, b_fwd, b_rev, float(np.mean(rh - fld)))

    return summarize("rh_ratio_ge_threshold", groups["high"]), \
        summarize("rh_ratio_lt_threshold", groups["low"])


def monthly_summary(records, level: int = 98) -> dict[int, dict[str, float]]:
    """Per acquisition month: count, mean, and population std of one RH level."""
    buckets: dict[int, list[float]] = {}
    for r in records:
        buckets.setdefault(r.acquired_month, []).append(r.rh[level])
    out = {}
    for month in sorted(buckets):
        vals = np.array(buckets[month], dtype=np.float64)
        out[month] = {"n": int(vals.size), "mean": float(vals.mean()),
                      "std": float(vals.std(ddof=0))}
    return out


# ---------------------------------------------------------------------------
# label rasterization


def rasterize_labels(records, calibration: CalibrationModel, geometry: GridGeometry,
                     footprint_diameter_m: float = 25.0):
    """Burn calibrated footprint heights onto the grid as sparse labels.

    A pixel is labeled when its center lies within the footprint disk. Where
    disks overlap, the footprint whose center is nearest wins; exact distance
    ties go to the lexicographically smallest footprint id. Returns
    (label_raster, mask) where mask is a boolean (height, width) array and
    the label raster is nodata off-mask.
    """
    best_dist = np.full((geometry.height, geometry.width), np.inf, dtype=np.float64)
    labels = np.zeros((geometry.height, geometry.width), dtype=np.float64)
    mask = np.zeros((geometry.height, geometry.width), dtype=bool)
    radius = footprint_diameter_m / 2.0
    for record in sorted(records, key=lambda r: r.footprint_id):
        height = apply_calibration(calibration, record.rh[98])
        rows, cols, d2 = footprint_pixels(geometry, record.lon, record.lat, radius)
        if rows.size == 0:
            continue
        better = d2 < best_dist[rows, cols]   # strict: earlier (smaller) id keeps ties
        rows, cols, d2 = rows[better], cols[better], d2[better]
        best_dist[rows, cols] = d2
        labels[rows, cols] = height
        mask[rows, cols] = True
    label_raster = Raster(geometry, labels[None].astype(np.float64), ~mask)
    logger.info("rasterized %d labeled pixels", int(mask.sum()))
    return label_raster, mask


def footprint_eval_points(records, calibration: CalibrationModel):
    """(lon, lat, calibrated height) triples for map evaluation."""
    return [(r.lon, r.lat, apply_calibration(calibration, r.rh[98])) for r in records]
