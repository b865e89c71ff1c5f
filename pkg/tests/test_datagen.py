import numpy as np
import pytest

from hemsim.core import STEP, STEPS_PER_DAY, QuarterSeries, utc
from hemsim.datagen import (
    CsvFormatError,
    DataQualityError,
    HouseholdProfile,
    InsufficientDataError,
    ScalerError,
    SplitSpec,
    default_profiles,
    fit_minmax,
    generate_cohort,
    generate_household,
    inverse_transform,
    pretrain_split,
    preprocess,
    read_cohort,
    read_csv,
    split_dataset,
    transform,
    write_cohort,
    write_csv,
)

START = utc(2023, 1, 2)

FLAT = HouseholdProfile(
    id="flat",
    base_load=1.0,
    daily_shape=tuple([1.0] * STEPS_PER_DAY),
    weekend_scale=1.0,
    spike_rate=0.0,
    spike_power=0.0,
    noise_std=0.0,
    seed=7,
)


class TestGenerator:
    def test_determinism_bitwise(self):
        profiles = default_profiles(3, seed_for=lambda hid: hash(hid) % 2**31)
        a = generate_cohort(profiles, START, 5)
        b = generate_cohort(profiles, START, 5)
        for hid in a:
            assert np.array_equal(a[hid].values, b[hid].values)

    def test_degenerate_profile_constant_series(self):
        s = generate_household(FLAT, START, 3)
        assert len(s) == 3 * STEPS_PER_DAY
        np.testing.assert_array_equal(s.values, 1.0)

    def test_values_nonnegative(self):
        profiles = default_profiles(4, seed_for=lambda hid: 42)
        for s in generate_cohort(profiles, START, 10).values():
            assert np.all(s.values >= 0.0)

    def test_paper_scale_cohort(self):
        # 25 households x 450 days of quarter-hours is ~1.08M points
        profiles = default_profiles(25, seed_for=lambda hid: abs(hash(hid)) % 2**31)
        cohort = generate_cohort(profiles, START, 450)
        assert len(cohort) == 25
        assert all(len(s) == 43_200 for s in cohort.values())
        assert sum(len(s) for s in cohort.values()) == 1_080_000

    def test_duplicate_id_rejected(self):
        with pytest.raises(ValueError, match="duplicate"):
            generate_cohort([FLAT, FLAT], START, 1)

    def test_bad_profile_rejected(self):
        with pytest.raises(ValueError):
            HouseholdProfile(id="x", base_load=-1.0, daily_shape=tuple([1.0] * 96))
        with pytest.raises(ValueError):
            HouseholdProfile(id="x", base_load=1.0, daily_shape=(1.0, 2.0))

    def test_weekend_scaling_applies(self):
        p = HouseholdProfile(
            id="w",
            base_load=1.0,
            daily_shape=tuple([1.0] * 96),
            weekend_scale=2.0,
            seed=1,
        )
        s = generate_household(p, START, 7)  # Monday-start week
        assert s.values[0] == 1.0
        assert s.values[5 * 96] == 2.0  # Saturday


def raw_from_series(series):
    return [(series.timestamp(i), float(series.values[i])) for i in range(len(series))]


class TestPreprocess:
    def test_clean_input_unchanged(self):
        s = generate_household(FLAT, START, 2)
        out = preprocess(raw_from_series(s))
        assert out == s

    def test_null_filled_by_interpolation(self):
        s = generate_household(FLAT, START, 2)
        raw = raw_from_series(s)
        raw[10] = (raw[10][0], None)
        base = np.asarray(s.values).copy()
        base[9], base[11] = 1.0, 2.0
        raw[9] = (raw[9][0], 1.0)
        raw[11] = (raw[11][0], 2.0)
        out = preprocess(raw)
        assert out.values[10] == pytest.approx(1.5)

    def test_outlier_clipped(self):
        rng = np.random.default_rng(0)
        values = rng.uniform(0.5, 8.0, size=4 * STEPS_PER_DAY)
        values[100] = 50.0
        s = QuarterSeries(START, values, "kW")
        out = preprocess(raw_from_series(s))
        q999 = np.quantile(values, 0.999, method="lower")
        iqr = np.quantile(values, 0.75, method="lower") - np.quantile(values, 0.25, method="lower")
        assert out.values[100] == pytest.approx(q999 + 3 * iqr)
        assert np.max(out.values) <= q999 + 3 * iqr + 1e-12

    def test_idempotent(self):
        rng = np.random.default_rng(5)
        values = rng.gamma(2.0, 1.0, size=6 * STEPS_PER_DAY)
        values[50] = 80.0  # outlier
        raw = raw_from_series(QuarterSeries(START, values, "kW"))
        raw[200] = (raw[200][0], None)  # short gap
        once = preprocess(raw)
        twice = preprocess(raw_from_series(once))
        assert twice == once

    def test_long_gap_drops_day(self):
        s = generate_household(FLAT, START, 4)
        raw = raw_from_series(s)
        # 6-step hole inside day 1: day 1 must disappear
        del raw[96 + 40 : 96 + 46]
        out = preprocess(raw)
        assert len(out) == 2 * STEPS_PER_DAY
        assert out.start == START + STEP * (2 * STEPS_PER_DAY)

    def test_negative_values_floored(self):
        values = np.ones(2 * STEPS_PER_DAY)
        values[3] = 1.0
        raw = raw_from_series(QuarterSeries(START, values, "kW"))
        raw[3] = (raw[3][0], -4.0)
        out = preprocess(raw)
        assert out.values[3] == 0.0

    def test_quality_errors(self):
        with pytest.raises(DataQualityError):
            preprocess([])
        s = generate_household(FLAT, START, 1)
        with pytest.raises(DataQualityError):
            preprocess(raw_from_series(s)[:50])  # less than a day
        raw = raw_from_series(generate_household(FLAT, START, 2))
        raw = [(ts, None) if i % 2 == 0 else (ts, v) for i, (ts, v) in enumerate(raw)]
        # exactly 50% nulls is allowed, more is not
        raw[1] = (raw[1][0], None)
        with pytest.raises(DataQualityError):
            preprocess(raw)

    def test_misaligned_samples_snapped(self):
        from datetime import timedelta

        s = generate_household(FLAT, START, 2)
        raw = [(ts + timedelta(seconds=30), v) for ts, v in raw_from_series(s)]
        out = preprocess(raw)
        assert out.start == START
        np.testing.assert_array_equal(out.values, s.values)


class TestScaler:
    def test_affine_definition(self):
        params = fit_minmax(QuarterSeries(START, [2.0, 4.0], "kW"))
        assert transform(2.0, params) == 0.0
        assert transform(4.0, params) == 1.0
        assert transform(3.0, params) == 0.5

    def test_round_trip(self):
        params = fit_minmax(QuarterSeries(START, [2.0, 4.0], "kW"))
        assert inverse_transform(transform(3.7, params), params) == pytest.approx(3.7, rel=1e-12)

    def test_out_of_range_not_clamped(self):
        params = fit_minmax(QuarterSeries(START, [2.0, 4.0], "kW"))
        assert transform(6.0, params) == 2.0
        assert inverse_transform(transform(-5.0, params), params) == pytest.approx(-5.0, rel=1e-12)

    def test_degenerate_range_rejected(self):
        with pytest.raises(ScalerError):
            fit_minmax(QuarterSeries(START, [3.0, 3.0, 3.0], "kW"))


class TestSplits:
    def test_layout_matches_hand_example(self):
        s = QuarterSeries(START, np.arange(100 * STEPS_PER_DAY, dtype=float), "kW")
        train, val, test = split_dataset(s, SplitSpec(training_days=14))
        # 0-indexed days: train 37..50, val 51..57, test 58..99
        assert train.start == START + STEP * (37 * STEPS_PER_DAY)
        assert len(train) == 14 * STEPS_PER_DAY
        assert val.start == START + STEP * (51 * STEPS_PER_DAY)
        assert len(val) == 7 * STEPS_PER_DAY
        assert test.start == START + STEP * (58 * STEPS_PER_DAY)
        assert len(test) == 42 * STEPS_PER_DAY
        assert test.end == s.end

    def test_test_window_fixed_across_training_sizes(self):
        s = QuarterSeries(START, np.arange(100 * STEPS_PER_DAY, dtype=float), "kW")
        tests = {}
        for days in (14, 21, 28, 35, 42):
            _, _, test = split_dataset(s, SplitSpec(training_days=days))
            tests[days] = test
        blobs = {d: t.values.tobytes() for d, t in tests.items()}
        assert len(set(blobs.values())) == 1
        assert all(tests[d].start == tests[14].start for d in tests)

    def test_segments_contiguous_and_disjoint(self):
        s = QuarterSeries(START, np.arange(80 * STEPS_PER_DAY, dtype=float), "kW")
        train, val, test = split_dataset(s, SplitSpec(training_days=21))
        assert train.end == val.start
        assert val.end == test.start

    def test_insufficient_length(self):
        s = QuarterSeries(START, np.ones(20 * STEPS_PER_DAY), "kW")
        with pytest.raises(InsufficientDataError):
            split_dataset(s, SplitSpec(training_days=14))

    def test_pretrain_split_fractions(self):
        s = QuarterSeries(START, np.arange(100 * STEPS_PER_DAY, dtype=float), "kW")
        train, val = pretrain_split(s)
        assert len(val) == 15 * STEPS_PER_DAY
        assert len(train) == 85 * STEPS_PER_DAY
        assert train.end == val.start

    def test_pretrain_split_floor_rule(self):
        s = QuarterSeries(START, np.arange(20, dtype=float), "kW")
        train, val = pretrain_split(s)
        assert len(train) == 17
        assert len(val) == 3

    def test_pretrain_split_too_short(self):
        with pytest.raises(InsufficientDataError):
            pretrain_split(QuarterSeries(START, [1.0, 2.0], "kW"))


class TestCsv:
    def test_round_trip_bitwise(self, tmp_path):
        rng = np.random.default_rng(3)
        s = QuarterSeries(START, rng.uniform(0, 5, size=96), "kW")
        path = tmp_path / "series.csv"
        write_csv(path, s)
        back = read_csv(path)
        assert back == s
        write_csv(tmp_path / "series2.csv", back)
        assert (tmp_path / "series2.csv").read_bytes() == path.read_bytes()

    def test_header_only_errors(self, tmp_path):
        path = tmp_path / "empty.csv"
        path.write_text("timestamp,value\n")
        with pytest.raises(CsvFormatError, match="no data rows"):
            read_csv(path)

    def test_duplicate_timestamp_names_row(self, tmp_path):
        path = tmp_path / "dup.csv"
        path.write_text(
            "timestamp,value\n"
            "2023-01-02T00:00:00Z,1.0\n"
            "2023-01-02T00:00:00Z,2.0\n"
        )
        with pytest.raises(CsvFormatError, match="row 3.*duplicate"):
            read_csv(path)

    def test_nonmonotone_rejected(self, tmp_path):
        path = tmp_path / "bad.csv"
        path.write_text(
            "timestamp,value\n"
            "2023-01-02T00:15:00Z,1.0\n"
            "2023-01-02T00:00:00Z,2.0\n"
        )
        with pytest.raises(CsvFormatError, match="not increasing"):
            read_csv(path)

    def test_gap_rejected(self, tmp_path):
        path = tmp_path / "gap.csv"
        path.write_text(
            "timestamp,value\n"
            "2023-01-02T00:00:00Z,1.0\n"
            "2023-01-02T00:45:00Z,2.0\n"
        )
        with pytest.raises(CsvFormatError, match="gap"):
            read_csv(path)

    def test_malformed_row_reported(self, tmp_path):
        path = tmp_path / "mal.csv"
        path.write_text("timestamp,value\nnot-a-time,1.0\n")
        with pytest.raises(CsvFormatError, match="row 2"):
            read_csv(path)

    def test_cohort_round_trip(self, tmp_path):
        profiles = default_profiles(3, seed_for=lambda hid: abs(hash(hid)) % 2**31)
        cohort = generate_cohort(profiles, START, 3)
        roles = {p.id: ("pretrain" if i < 2 else "holdout") for i, p in enumerate(profiles)}
        write_cohort(tmp_path / "cohort", cohort, profiles, roles)
        series, profs, roles_back = read_cohort(tmp_path / "cohort")
        assert set(series) == {p.id for p in profiles}
        assert roles_back == roles
        for hid in series:
            assert series[hid] == cohort[hid]
            assert profs[hid] == [p for p in profiles if p.id == hid][0]
