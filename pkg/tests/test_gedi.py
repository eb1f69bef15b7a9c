import math

import numpy as np
import pytest

from marsnet import gedi
from marsnet.rasters import GridGeometry

from oracles import metrics_ref, ols_ref


def record(fid="F0", rh98=25.0, sensitivity=0.99, cover=0.5, beam="power",
           quality_ok=True, degraded=False, daytime=False, month=7,
           lon=12.5, lat=48.2):
    """A valid footprint with a linear RH profile ending at rh98."""
    rh = {level: rh98 * level / 98.0 for level in gedi.RH_LEVELS}
    return gedi.FootprintRecord(
        footprint_id=fid, lon=lon, lat=lat, rh=rh, sensitivity=sensitivity,
        canopy_cover=cover, beam=beam, quality_ok=quality_ok, degraded=degraded,
        daytime=daytime, acquired_month=month)


class TestRecordValidation:
    def test_missing_rh_level(self):
        rh = {level: 1.0 for level in gedi.RH_LEVELS if level != 80}
        with pytest.raises(ValueError, match="RH levels"):
            gedi.FootprintRecord("F0", 0, 0, rh, 0.99, 0.5, "power", True, False, False, 7)

    def test_decreasing_rh_rejected(self):
        rh = {level: 10.0 for level in gedi.RH_LEVELS}
        rh[98] = 5.0
        with pytest.raises(ValueError, match="non-decreasing"):
            gedi.FootprintRecord("F0", 0, 0, rh, 0.99, 0.5, "power", True, False, False, 7)

    def test_range_checks(self):
        with pytest.raises(ValueError, match="sensitivity"):
            record(sensitivity=1.5)
        with pytest.raises(ValueError, match="cover"):
            record(cover=-0.1)
        with pytest.raises(ValueError, match="beam"):
            record(beam="full")
        with pytest.raises(ValueError, match="month"):
            record(month=0)

    def test_plot_validation(self):
        with pytest.raises(ValueError):
            gedi.FieldPlot("P0", 0, 0, [])
        with pytest.raises(ValueError):
            gedi.FieldPlot("P0", 0, 0, [5.0, -1.0])


class TestQualityFilter:
    def test_good_record_kept(self):
        assert gedi.quality_filter([record()]) == [record()]

    def test_each_flag_drops(self):
        bads = [record(quality_ok=False), record(degraded=True),
                record(daytime=True), record(beam="coverage")]
        assert gedi.quality_filter(bads) == []

    def test_empty(self):
        assert gedi.quality_filter([]) == []

    def test_idempotent(self):
        records = [record(fid=f"F{i}", daytime=i % 2 == 0) for i in range(6)]
        once = gedi.quality_filter(records)
        assert gedi.quality_filter(once) == once


class TestSensitivityCoverFilter:
    def test_sparse_canopy_threshold(self):
        assert gedi.sensitivity_cover_filter([record(cover=0.70, sensitivity=0.96)])
        assert not gedi.sensitivity_cover_filter([record(cover=0.70, sensitivity=0.94)])

    def test_dense_canopy_threshold(self):
        assert not gedi.sensitivity_cover_filter([record(cover=0.85, sensitivity=0.96)])
        assert gedi.sensitivity_cover_filter([record(cover=0.85, sensitivity=0.99)])

    def test_boundaries_inclusive(self):
        assert gedi.sensitivity_cover_filter([record(cover=0.80, sensitivity=0.98)])
        assert gedi.sensitivity_cover_filter([record(cover=0.79, sensitivity=0.95)])

    def test_order_insensitive_with_quality(self):
        rng = np.random.default_rng(0)
        records = [record(fid=f"F{i}", cover=float(rng.uniform(0, 1)),
                          sensitivity=float(rng.uniform(0.9, 1.0)),
                          daytime=bool(rng.random() < 0.3)) for i in range(40)]
        a = gedi.sensitivity_cover_filter(gedi.quality_filter(records))
        b = gedi.quality_filter(gedi.sensitivity_cover_filter(records))
        assert [r.footprint_id for r in a] == [r.footprint_id for r in b]


class TestNdviConsistencyFilter:
    def test_hand_fixture(self):
        # covers minus NDVI: d = {0, 0, 0, 1}; mu=0.25, population sigma=0.433
        records = [record(fid=f"F{i}", cover=0.5, lon=10.0 + i) for i in range(3)]
        records.append(record(fid="F3", cover=0.0, lon=13.0))
        ndvi_by_lon = {10.0: 0.5, 11.0: 0.5, 12.0: 0.5, 13.0: 1.0}
        kept = gedi.ndvi_consistency_filter(records, lambda lon, lat: ndvi_by_lon[lon])
        assert [r.footprint_id for r in kept] == ["F0", "F1", "F2"]
        d = np.array([0.0, 0.0, 0.0, 1.0])
        assert d.mean() + d.std(ddof=0) == pytest.approx(0.683, abs=5e-4)

    def test_identical_distances_all_kept(self):
        records = [record(fid=f"F{i}", cover=0.6) for i in range(5)]
        kept = gedi.ndvi_consistency_filter(records, lambda lon, lat: 0.3)
        assert len(kept) == 5

    def test_single_record_passes_with_warning(self):
        with pytest.warns(UserWarning, match="fewer than 2"):
            kept = gedi.ndvi_consistency_filter([record()], lambda lon, lat: 0.1)
        assert len(kept) == 1

    def test_nonfinite_ndvi_drops_record_and_stays_out_of_stats(self):
        records = [record(fid="F0", cover=0.5, lon=1.0),
                   record(fid="F1", cover=0.5, lon=2.0),
                   record(fid="F2", cover=0.5, lon=3.0)]

        def ndvi_at(lon, lat):
            return float("nan") if lon == 3.0 else 0.5

        kept = gedi.ndvi_consistency_filter(records, ndvi_at)
        assert [r.footprint_id for r in kept] == ["F0", "F1"]


class TestApplyFilters:
    def _twelve_record_fixture(self):
        """Hand-built mix: 5 survive all four screens, 7 die at known stages."""
        ndvi = {}
        forest = {}
        records = []

        def add(fid, lon, ndvi_value=0.55, on_forest=True, **kw):
            r = record(fid=fid, lon=lon, **kw)
            ndvi[lon] = ndvi_value
            forest[lon] = on_forest
            records.append(r)

        add("K1", 1.0, cover=0.5, sensitivity=0.96, ndvi_value=0.55)   # kept
        add("K2", 2.0, cover=0.6, sensitivity=0.99, ndvi_value=0.62)   # kept
        add("K3", 3.0, cover=0.85, sensitivity=0.98, ndvi_value=0.83)  # kept
        add("K4", 4.0, cover=0.55, sensitivity=0.95, ndvi_value=0.50)  # kept
        add("K5", 5.0, cover=0.70, sensitivity=0.97, ndvi_value=0.73)  # kept
        add("Q1", 6.0, quality_ok=False)                               # quality
        add("Q2", 7.0, daytime=True)                                   # quality
        add("Q3", 8.0, beam="coverage")                                # quality
        add("S1", 9.0, cover=0.5, sensitivity=0.90)                    # sensitivity
        add("S2", 10.0, cover=0.9, sensitivity=0.96)                   # sensitivity
        add("N1", 11.0, cover=0.9, sensitivity=0.99, ndvi_value=0.10)  # ndvi
        add("F1", 12.0, cover=0.5, sensitivity=0.99, ndvi_value=0.55,
            on_forest=False)                                           # forest
        return records, (lambda lon, lat: ndvi[lon]), (lambda lon, lat: forest[lon])

    def test_twelve_record_fixture_exact(self):
        records, ndvi_at, forest_at = self._twelve_record_fixture()
        report = gedi.apply_filters(records, ndvi_at=ndvi_at, forest_at=forest_at)
        assert [r.footprint_id for r in report.kept] == ["K1", "K2", "K3", "K4", "K5"]
        stages = dict(report.dropped)
        assert stages == {"Q1": "quality", "Q2": "quality", "Q3": "quality",
                          "S1": "sensitivity_cover", "S2": "sensitivity_cover",
                          "N1": "ndvi_consistency", "F1": "forest_mask"}
        assert report.stage_counts == {"quality": 9, "sensitivity_cover": 7,
                                       "ndvi_consistency": 6, "forest_mask": 5}

    def test_optional_stages_skipped(self):
        records, _, _ = self._twelve_record_fixture()
        report = gedi.apply_filters(records)
        assert set(report.stage_counts) == {"quality", "sensitivity_cover"}
        assert len(report.kept) == 7

    def test_subset_invariant(self):
        records, ndvi_at, forest_at = self._twelve_record_fixture()
        report = gedi.apply_filters(records, ndvi_at=ndvi_at, forest_at=forest_at)
        ids = {r.footprint_id for r in records}
        assert {r.footprint_id for r in report.kept} <= ids
        assert len(report.kept) + len(report.dropped) == len(records)


class TestFieldStatistics:
    def test_statistics(self):
        heights = list(range(1, 16))                       # 1..15
        assert gedi.field_statistic(heights, "max") == (15, False)
        value, short = gedi.field_statistic(heights, "top10_mean")
        assert value == pytest.approx(np.mean(range(6, 16))) and not short
        value, short = gedi.field_statistic(heights, "all_mean")
        assert value == pytest.approx(8.0) and not short

    def test_short_plot_flagged(self):
        value, short = gedi.field_statistic([4.0, 8.0, 6.0], "top10_mean")
        assert value == pytest.approx(6.0) and short

    def test_unknown_statistic(self):
        with pytest.raises(ValueError, match="statistic"):
            gedi.field_statistic([1.0], "median")


class TestCalibration:
    def test_noiseless_recovery(self):
        rh = np.linspace(5.0, 40.0, 24)
        pairs = [(x, 0.73 * x + 7.86) for x in rh]
        model = gedi.fit_calibration(pairs)
        assert model.slope == pytest.approx(0.73, abs=1e-9)
        assert model.intercept == pytest.approx(7.86, abs=1e-9)
        assert model.r2 == pytest.approx(1.0, abs=1e-12)
        assert model.n == 24

    def test_two_point_fit(self):
        model = gedi.fit_calibration([(0.0, 1.0), (1.0, 3.0)])
        assert model.slope == pytest.approx(2.0) and model.intercept == pytest.approx(1.0)

    def test_matches_normal_equations_oracle(self):
        rng = np.random.default_rng(4)
        x = rng.uniform(5, 40, size=30)
        y = 0.7 * x + 5 + rng.normal(0, 2, size=30)
        model = gedi.fit_calibration(list(zip(x, y)))
        slope, intercept = ols_ref(x, y)
        assert model.slope == pytest.approx(slope, abs=1e-9)
        assert model.intercept == pytest.approx(intercept, abs=1e-9)

    def test_degenerate_inputs(self):
        with pytest.raises(ValueError):
            gedi.fit_calibration([(1.0, 2.0)])
        with pytest.raises(ValueError, match="variance"):
            gedi.fit_calibration([(3.0, 1.0), (3.0, 2.0)])

    def test_apply_calibration(self):
        model = gedi.CalibrationModel(0.73, 7.86, None, None, 0)
        assert gedi.apply_calibration(model, 20.0) == pytest.approx(22.46)
        assert gedi.apply_calibration(model, 0.0) == pytest.approx(7.86)
        identity = gedi.CalibrationModel(1.0, 0.0, None, None, 0)
        x = np.array([3.0, 9.0])
        np.testing.assert_allclose(gedi.apply_calibration(identity, x), x)

    def test_fit_then_apply_roundtrip(self):
        rh = np.linspace(10, 30, 12)
        pairs = [(x, 0.73 * x + 7.86) for x in rh]
        model = gedi.fit_calibration(pairs)
        out = gedi.apply_calibration(model, rh)
        np.testing.assert_allclose(out, [p[1] for p in pairs], rtol=1e-9)


class TestRhFieldTable:
    def _plots_and_records(self):
        """Plots whose top10_mean is exactly linear in rh98 and nothing else.

        RH profiles get a per-record curvature so no other level is an affine
        function of rh98, and the 10 dominant trees are jittered around their
        exact mean so "max" is noisy while "top10_mean" stays noiseless.
        """
        rng = np.random.default_rng(11)
        plots, records = [], []
        for i in range(8):
            rh98 = float(rng.uniform(15, 35))
            curve = float(rng.uniform(0.8, 1.6))
            rh = {level: rh98 * (level / 98.0) ** curve for level in gedi.RH_LEVELS}
            records.append(gedi.FootprintRecord(
                f"F{i}", float(i), 48.2, rh, 0.99, 0.5, "power", True, False, False, 7))
            dominant = 0.73 * rh98 + 7.86
            jitter = rng.normal(0.0, 0.8, size=10)
            jitter -= jitter.mean()
            top10 = list(dominant + jitter)
            understory = list(rng.uniform(2.0, min(top10) - 0.5, size=12))
            plots.append(gedi.FieldPlot(f"P{i}", float(i), 48.2, top10 + understory,
                                        matched_footprint_id=f"F{i}"))
        return plots, records

    def test_noiseless_generation_statistic_is_perfect(self):
        plots, records = self._plots_and_records()
        table = gedi.rh_field_correlation(plots, records)
        cell = table.cells[(98, "top10_mean")]
        assert cell.r2 == pytest.approx(1.0, abs=1e-9)
        assert table.best_cell() == (98, "top10_mean")

    def test_cells_match_least_squares_oracle(self):
        plots, records = self._plots_and_records()
        table = gedi.rh_field_correlation(
            plots, records, levels=(80, 98), statistics=("max", "top10_mean"))
        for (level, stat), cell in table.cells.items():
            rh = [r.rh[level] for r in records]
            fld = [gedi.field_statistic(p.tree_heights, stat)[0] for p in plots]
            slope, intercept = ols_ref(rh, fld)
            pred = [slope * v + intercept for v in rh]
            want = metrics_ref(fld, pred)
            assert cell.r2 == pytest.approx(want["r2"], abs=1e-9)
            assert cell.rrmse_pct == pytest.approx(want["rrmse_pct"], abs=1e-9)

    def test_short_plots_reported(self):
        plots, records = self._plots_and_records()
        plots[0] = gedi.FieldPlot("P0", 0.0, 48.2, [20.0, 22.0],
                                  matched_footprint_id="F0")
        table = gedi.rh_field_correlation(plots, records, levels=(98,),
                                          statistics=("top10_mean",))
        assert table.short_plots["top10_mean"] == ["P0"]


class TestStratification:
    def _fixture(self, offsets=(-1.0, -8.0)):
        """Two groups with built-in rh98 - field offsets.

        Profile shape comes from a power curve: a small exponent keeps the
        energy near the top (rh80/rh98 = 0.96, top-heavy), a large one pushes
        it down (0.54)."""
        plots, records = [], []
        rng = np.random.default_rng(2)
        for i in range(40):
            high = i % 2 == 0
            rh98 = float(rng.uniform(18, 32))
            curve = 0.2 if high else 3.0
            rh = {level: rh98 * (level / 98.0) ** curve for level in gedi.RH_LEVELS}
            records.append(gedi.FootprintRecord(
                f"F{i}", float(i), 48.2, rh, 0.99, 0.5, "power", True, False, False, 7))
            field = rh98 - (offsets[0] if high else offsets[1])
            plots.append(gedi.FieldPlot(f"P{i}", float(i), 48.2, [field] * 12,
                                        matched_footprint_id=f"F{i}"))
        return plots, records

    def test_builtin_offsets_recovered(self):
        plots, records = self._fixture()
        high, low = gedi.stratify_by_rh_ratio(plots, records, threshold=0.9)
        assert high.n == 20 and low.n == 20
        assert high.mean_diff_m == pytest.approx(-1.0, abs=0.1)
        assert low.mean_diff_m == pytest.approx(-8.0, abs=0.1)

    def test_empty_group(self):
        plots, records = self._fixture()
        high, low = gedi.stratify_by_rh_ratio(plots, records, threshold=0.4)
        assert high.n == 40 and low.n == 0
        assert low.mean_diff_m is None and low.intercept_field_on_rh98 is None

    def test_intercepts_match_both_direction_fits(self):
        plots, records = self._fixture()
        high, _ = gedi.stratify_by_rh_ratio(plots, records, threshold=0.9)
        pairs = []
        for p, r in zip(plots, records):
            if r.rh[80] / r.rh[98] >= 0.9:
                pairs.append((r.rh[98], gedi.field_statistic(p.tree_heights, "top10_mean")[0]))
        rh = [a for a, _ in pairs]
        fld = [b for _, b in pairs]
        assert high.intercept_field_on_rh98 == pytest.approx(ols_ref(rh, fld)[1], abs=1e-9)
        assert high.intercept_rh98_on_field == pytest.approx(ols_ref(fld, rh)[1], abs=1e-9)

    def test_zero_rh98_excluded_with_warning(self):
        rh = {level: 0.0 for level in gedi.RH_LEVELS}
        records = [gedi.FootprintRecord("F0", 0.0, 48.2, rh, 0.99, 0.5,
                                        "power", True, False, False, 7)]
        plots = [gedi.FieldPlot("P0", 0.0, 48.2, [10.0] * 12, matched_footprint_id="F0")]
        with pytest.warns(UserWarning, match="rh98 <= 0"):
            high, low = gedi.stratify_by_rh_ratio(plots, records)
        assert high.n == 0 and low.n == 0


class TestMonthlySummary:
    def test_buckets(self):
        records = [record(fid="A", rh98=10.0, month=3),
                   record(fid="B", rh98=20.0, month=3),
                   record(fid="C", rh98=30.0, month=9)]
        out = gedi.monthly_summary(records)
        assert list(out) == [3, 9]
        assert out[3]["n"] == 2 and out[3]["mean"] == pytest.approx(15.0)
        assert out[3]["std"] == pytest.approx(5.0)
        assert out[9]["n"] == 1 and out[9]["std"] == 0.0


class TestRasterizeLabels:
    def _geometry(self, width=16, height=16):
        return GridGeometry(0.0, 0.0, 10.0, width, height, ref_lon=12.5, ref_lat=48.2)

    def _identity(self):
        return gedi.CalibrationModel(1.0, 0.0, None, None, 0)

    def test_centered_footprint_burns_disk(self):
        g = self._geometry()
        lon, lat = g.pixel_center_lonlat(8, 8)
        rec = record(fid="F0", rh98=20.0, lon=float(lon), lat=float(lat))
        labels, mask = gedi.rasterize_labels([rec], self._identity(), g)
        assert mask.sum() == 5 and bool(mask[8, 8])
        assert labels.data[0, 8, 8] == pytest.approx(20.0)
        assert bool(labels.nodata[0, 0]) and not bool(labels.nodata[8, 8])

    def test_zero_footprints(self):
        g = self._geometry()
        labels, mask = gedi.rasterize_labels([], self._identity(), g)
        assert not mask.any() and labels.nodata.all()

    def test_overlap_nearest_center_wins(self):
        from marsnet.rasters import footprint_pixels

        g = self._geometry()
        lon_a, lat_a = g.pixel_center_lonlat(8.0, 7.3)
        lon_b, lat_b = g.pixel_center_lonlat(8.0, 9.1)
        rec_a = record(fid="A", rh98=10.0, lon=float(lon_a), lat=float(lat_a))
        rec_b = record(fid="B", rh98=20.0, lon=float(lon_b), lat=float(lat_b))
        labels, mask = gedi.rasterize_labels([rec_a, rec_b], self._identity(), g)
        # oracle: per pixel, the nearer center's height must win
        nearest = {}
        for rec, height in ((rec_a, 10.0), (rec_b, 20.0)):
            rows, cols, d2 = footprint_pixels(g, rec.lon, rec.lat, 12.5)
            for r, c, d in zip(rows, cols, d2):
                key = (int(r), int(c))
                if key not in nearest or d < nearest[key][0]:
                    nearest[key] = (d, height)
        assert mask.sum() == len(nearest) > 0
        for (r, c), (_, height) in nearest.items():
            assert labels.data[0, r, c] == pytest.approx(height)

    def test_overlap_exact_tie_goes_to_lowest_id(self):
        g = self._geometry()
        lon, lat = g.pixel_center_lonlat(8, 8)
        rec_a = record(fid="A", rh98=10.0, lon=float(lon), lat=float(lat))
        rec_b = record(fid="B", rh98=20.0, lon=float(lon), lat=float(lat))
        labels, mask = gedi.rasterize_labels([rec_b, rec_a], self._identity(), g)
        assert mask.sum() == 5
        np.testing.assert_allclose(labels.data[0][mask], 10.0)

    def test_brute_force_mask_invariant(self):
        g = self._geometry(width=24, height=20)
        rng = np.random.default_rng(8)
        records = []
        for i in range(12):
            r = float(rng.uniform(0, g.height - 1))
            c = float(rng.uniform(0, g.width - 1))
            lon, lat = g.pixel_center_lonlat(r, c)
            records.append(record(fid=f"F{i:02d}", rh98=float(rng.uniform(10, 30)),
                                  lon=float(lon), lat=float(lat)))
        _, mask = gedi.rasterize_labels(records, self._identity(), g)
        from marsnet.rasters import M_PER_DEG, meters_per_degree_lon
        want = np.zeros_like(mask)
        for rec in records:
            m_lon = meters_per_degree_lon(rec.lat)
            for rr in range(g.height):
                for cc in range(g.width):
                    plon, plat = g.pixel_center_lonlat(rr, cc)
                    dx = (float(plon) - rec.lon) * m_lon
                    dy = (float(plat) - rec.lat) * M_PER_DEG
                    if dx * dx + dy * dy <= 12.5 ** 2:
                        want[rr, cc] = True
        assert np.array_equal(mask, want)

    def test_eval_points_apply_calibration(self):
        model = gedi.CalibrationModel(0.73, 7.86, None, None, 0)
        points = gedi.footprint_eval_points([record(rh98=20.0)], model)
        assert points[0][2] == pytest.approx(22.46)
