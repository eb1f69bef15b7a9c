"""Accuracy metrics, ablation orchestration, and map comparison utilities.

The three headline metrics follow one convention throughout the package, and
it is not the textbook one: both the coefficient of determination and the
relative RMSE are computed against the mean of the *predicted* series,

    r2    = 1 - sum((x - y)^2) / sum((x - ybar)^2)
    rmse  = sqrt(mean((x - y)^2))
    rrmse = rmse / ybar * 100        with ybar = mean(y), y = predicted

A conventional r2 (mean of observed in the denominator) is carried alongside
as a cross-check field so the two can never be silently conflated.
"""

from __future__ import annotations

import hashlib
import logging
import math
from dataclasses import dataclass, replace

import numpy as np

from .rasters import Raster, footprint_pixels

logger = logging.getLogger(__name__)


def ols_fit(x, y) -> tuple[float, float]:
    """Least-squares slope and intercept of y = a*x + b.

    Raises ValueError for fewer than 2 points or zero variance in x.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise ValueError("ols_fit expects two equal-length 1-d arrays")
    if x.size < 2:
        raise ValueError(f"ols_fit needs at least 2 points, got {x.size}")
    xm = x.mean()
    ym = y.mean()
    sxx = float(((x - xm) ** 2).sum())
    if sxx == 0.0:
        raise ValueError("ols_fit: zero variance in x")
    slope = float(((x - xm) * (y - ym)).sum()) / sxx
    return slope, float(ym - slope * xm)


@dataclass
class MetricsReport:
    """Bundle of the regression metrics for one observed/predicted pairing.

    Fields that are undefined for the given data (zero denominators, n < 2)
    are None rather than inf/nan. conventional_r2 is the cross-check value
    computed against the observed mean.
    """

    n: int
    rmse: float
    r2: float | None
    rrmse_pct: float | None
    slope: float | None
    intercept: float | None
    conventional_r2: float | None

    def to_dict(self) -> dict:
        return {
            "n": self.n,
            "rmse": self.rmse,
            "r2": self.r2,
            "rrmse_pct": self.rrmse_pct,
            "slope": self.slope,
            "intercept": self.intercept,
            "conventional_r2": self.conventional_r2,
        }


def regression_metrics(observed, predicted) -> MetricsReport:
    """Evaluate the package metric set for paired observed/predicted values.

    slope/intercept describe the least-squares fit predicted = a*observed + b
    (the scatterplot line); they are None when that fit is undefined.
    """
    x = np.asarray(observed, dtype=np.float64).ravel()
    y = np.asarray(predicted, dtype=np.float64).ravel()
    if x.size != y.size:
        raise ValueError(f"length mismatch: {x.size} observed vs {y.size} predicted")
    if x.size == 0:
        raise ValueError("metrics need at least one pair")
    if not (np.isfinite(x).all() and np.isfinite(y).all()):
        raise ValueError("metrics input contains non-finite values")
    n = int(x.size)
    ss_res = float(((x - y) ** 2).sum())
    rmse = math.sqrt(ss_res / n)

    ybar = float(y.mean())
    ss_pred = float(((x - ybar) ** 2).sum())
    r2 = 1.0 - ss_res / ss_pred if n >= 2 and ss_pred > 0 else None
    rrmse = rmse / ybar * 100.0 if ybar != 0 else None

    xbar = float(x.mean())
    ss_obs = float(((x - xbar) ** 2).sum())
    conv_r2 = 1.0 - ss_res / ss_obs if n >= 2 and ss_obs > 0 else None

    try:
        slope, intercept = ols_fit(x, y)
    except ValueError:
        slope, intercept = None, None
    return MetricsReport(n=n, rmse=rmse, r2=r2, rrmse_pct=rrmse,
                         slope=slope, intercept=intercept, conventional_r2=conv_r2)


def footprint_eval(pred_map: Raster, points, diameter_m: float = 25.0):
    """Compare a prediction map against footprint heights.

    points: sequence of (lon, lat, height_m). The map prediction for a
    footprint is the mean over valid map pixels within the footprint disk;
    footprints with no valid pixel are excluded. Returns
    (MetricsReport, n_excluded).
    """
    if pred_map.bands != 1:
        raise ValueError(f"expected a single-band prediction map, got {pred_map.bands} bands")
    data = pred_map.data[0]
    valid = ~pred_map.nodata & np.isfinite(data)
    observed = []
    predicted = []
    excluded = 0
    for lon, lat, height in points:
        rows, cols, _ = footprint_pixels(pred_map.geometry, lon, lat, diameter_m / 2.0)
        if rows.size:
            ok = valid[rows, cols]
            rows, cols = rows[ok], cols[ok]
        if rows.size == 0:
            excluded += 1
            continue
        observed.append(float(height))
        predicted.append(float(data[rows, cols].mean()))
    if not observed:
        raise ValueError("no footprint overlaps a valid map pixel")
    if excluded:
        logger.info("footprint_eval: excluded %d footprints with no valid pixels", excluded)
    return regression_metrics(observed, predicted), excluded


def pixel_eval(predictions, labels, masks) -> MetricsReport:
    """Masked per-pixel metrics over a batch of patches."""
    pred = np.asarray(predictions, dtype=np.float64)
    lab = np.asarray(labels, dtype=np.float64)
    msk = np.asarray(masks, dtype=bool)
    if pred.shape != lab.shape or pred.shape != msk.shape:
        raise ValueError("predictions, labels, and masks must share a shape")
    if not msk.any():
        raise ValueError("mask selects no pixels")
    return regression_metrics(lab[msk], pred[msk])


# ---------------------------------------------------------------------------
# ablation grid


@dataclass
class AblationRow:
    name: str
    config: "object"
    report: MetricsReport | None = None
    failed: bool = False
    error: str | None = None
    split_fingerprint: str = ""


# modality-subset rows, in increasing-information order for the soft check
_MODALITY_ROWS = (
    ("s2", ("sentinel2",)),
    ("s2_s1", ("sentinel2", "sentinel1")),
    ("s2_s1_palsar", ("sentinel2", "sentinel1", "palsar2")),
    ("all_modalities", ("sentinel2", "sentinel1", "palsar2", "ancillary")),
)


def default_ablation_grid(base_config) -> list[tuple[str, "object"]]:
    """The standard 8-run grid: 4 architecture rows x full input, then 4
    modality-subset rows at the base architecture.

    base_config must be a ModelConfig covering all four modalities.
    """
    if set(base_config.input_bands) != {"sentinel2", "sentinel1", "palsar2", "ancillary"}:
        raise ValueError("ablation base config must cover all four modalities")
    grid: list[tuple[str, object]] = [
        ("shared_no_esbc", replace(base_config, encoder_mode="shared", esbc_enabled=False)),
        ("separate_no_esbc", replace(base_config, encoder_mode="separate", esbc_enabled=False)),
        ("shared_esbc", replace(base_config, encoder_mode="shared", esbc_enabled=True)),
        ("sar_shared_esbc", replace(base_config, encoder_mode="sar_shared", esbc_enabled=True)),
    ]
    for name, modalities in _MODALITY_ROWS:
        bands = {m: base_config.input_bands[m] for m in modalities}
        grid.append((name, replace(base_config, input_bands=bands)))
    return grid


def split_fingerprint(train, val, test) -> str:
    """Stable digest of split membership, identifying patches by origin."""
    h = hashlib.sha256()
    for split in (train, val, test):
        h.update(f"n={len(split)};".encode())
        for sample in split:
            r, c = sample.patch_origin
            h.update(f"{r},{c};".encode())
    return h.hexdigest()[:16]


def run_ablation(grid, train_samples, val_samples, test_samples, train_config):
    """Train and evaluate every grid row on one frozen split.

    A row that raises is reported failed (error message kept) without
    aborting the rest. Returns (rows, warnings): rows sorted by descending
    r2 with failures last, warnings from the soft modality-ordering check.
    """
    from .model import build_model          # deferred: keeps this module light
    from .train import predict_patches, train_model

    if not test_samples:
        raise ValueError("ablation needs a non-empty test split")
    fingerprint = split_fingerprint(train_samples, val_samples, test_samples)
    rows: list[AblationRow] = []
    for name, config in grid:
        row = AblationRow(name=name, config=config, split_fingerprint=fingerprint)
        try:
            model = build_model(config)
            train_model(model, train_samples, val_samples, train_config)
            subset = list(config.input_bands)
            preds, labels, masks = predict_patches(model, test_samples, modalities=subset)
            row.report = pixel_eval(preds, labels, masks)
        except Exception as exc:  # noqa: BLE001 - row isolation is the contract
            row.failed = True
            row.error = f"{type(exc).__name__}: {exc}"
            logger.warning("ablation row '%s' failed: %s", name, row.error)
        rows.append(row)

    warnings_out = _modality_ordering_warnings(rows)
    for w in warnings_out:
        logger.warning("%s", w)

    def sort_key(row: AblationRow):
        if row.failed:
            return (2, 0.0)
        if row.report is None or row.report.r2 is None:
            return (1, 0.0)
        return (0, -row.report.r2)

    rows.sort(key=sort_key)
    return rows, warnings_out


def _modality_ordering_warnings(rows) -> list[str]:
    by_name = {r.name: r for r in rows}
    order = [name for name, _ in _MODALITY_ROWS]
    warnings_out = []
    for weaker, stronger in zip(order, order[1:]):
        a, b = by_name.get(weaker), by_name.get(stronger)
        if not a or not b or a.failed or b.failed:
            continue
        if a.report is None or b.report is None:
            continue
        if a.report.r2 is None or b.report.r2 is None:
            continue
        if b.report.r2 < a.report.r2:
            warnings_out.append(
                f"modality ablation ordering: r2({stronger})={b.report.r2:.4f} "
                f"< r2({weaker})={a.report.r2:.4f}")
    return warnings_out


# ---------------------------------------------------------------------------
# height histograms


@dataclass
class HistogramTable:
    bin_edges: np.ndarray     # (k+1,), meters
    counts_a: np.ndarray      # (k,)
    counts_b: np.ndarray
    label_a: str = "map_a"
    label_b: str = "map_b"


def height_histogram(map_a: Raster, map_b: Raster, bin_width: float = 1.0,
                     labels=("map_a", "map_b")) -> HistogramTable:
    """Valid-pixel height histograms of two maps on shared bin edges.

    Bins run from 0 to just past the larger map maximum; each bin is
    half-open [lo, hi) so a value on an edge counts in the upper bin.
    """
    if bin_width <= 0:
        raise ValueError(f"bin_width must be positive, got {bin_width}")
    if map_a.geometry != map_b.geometry:
        raise ValueError("maps must share one grid geometry")
    vals = []
    for m in (map_a, map_b):
        if m.bands != 1:
            raise ValueError("height maps must be single-band")
        v = m.data[0][~m.nodata & np.isfinite(m.data[0])]
        vals.append(v[v >= 0])
    if vals[0].size == 0 and vals[1].size == 0:
        raise ValueError("both maps are empty of valid pixels")
    top = max((v.max() for v in vals if v.size), default=0.0)
    n_bins = int(math.floor(top / bin_width)) + 1
    edges = np.arange(n_bins + 1, dtype=np.float64) * bin_width
    counts_a, _ = np.histogram(vals[0], bins=edges)
    counts_b, _ = np.histogram(vals[1], bins=edges)
    return HistogramTable(edges, counts_a, counts_b, labels[0], labels[1])


def plot_histogram(table: HistogramTable, path) -> None:
    """Side-by-side bar chart of the two count series."""
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    centers = (table.bin_edges[:-1] + table.bin_edges[1:]) / 2.0
    width = float(table.bin_edges[1] - table.bin_edges[0])
    fig, ax = plt.subplots(figsize=(8, 4.5))
    ax.bar(centers - width * 0.2, table.counts_a, width=width * 0.38, label=table.label_a)
    ax.bar(centers + width * 0.2, table.counts_b, width=width * 0.38, label=table.label_b)
    ax.set_xlabel("dominant height (m)")
    ax.set_ylabel("pixels")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120, metadata={"Software": None})
    plt.close(fig)
