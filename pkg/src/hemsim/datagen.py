"""Synthetic smart-meter cohorts, preprocessing, scaling and splits.

The synthetic generator stands in for a private multi-household dataset:
each household draws from one structural family (base load scaled by a
96-bin daily profile, weekend scaling, Poisson appliance spikes, Gaussian
noise, truncated at zero) with per-household parameters, so that a global
model has shared structure to transfer while individual households still
differ.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from .core import (
    STEP,
    STEP_SECONDS,
    STEPS_PER_DAY,
    QuarterSeries,
    calendar_features,
    ensure_utc,
    float_repr,
    iso_utc,
)


class DataQualityError(ValueError):
    """Raw data is too broken to preprocess (empty, short, or mostly invalid)."""


class CsvFormatError(ValueError):
    """A series CSV violates the documented format; message names the row."""


class ScalerError(ValueError):
    """Degenerate value range; min-max scaling impossible."""


class InsufficientDataError(ValueError):
    """A split needs more data than the series provides."""


# --- synthetic generator ------------------------------------------------------


@dataclass(frozen=True)
class HouseholdProfile:
    """Parameters of one synthetic household's load generator."""

    id: str
    base_load: float
    daily_shape: tuple[float, ...]
    weekend_scale: float = 1.0
    spike_rate: float = 0.0
    spike_power: float = 0.0
    noise_std: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.base_load < 0.0:
            raise ValueError("base_load must be >= 0")
        if self.spike_rate < 0.0 or self.noise_std < 0.0 or self.spike_power < 0.0:
            raise ValueError("spike_rate, spike_power and noise_std must be >= 0")
        shape = tuple(float(v) for v in self.daily_shape)
        if len(shape) != STEPS_PER_DAY:
            raise ValueError(f"daily_shape needs exactly {STEPS_PER_DAY} entries, got {len(shape)}")
        if any(v < 0.0 for v in shape):
            raise ValueError("daily_shape entries must be >= 0")
        object.__setattr__(self, "daily_shape", shape)

    def to_dict(self) -> dict:
        return {
            "id": self.id,
            "base_load": self.base_load,
            "daily_shape": list(self.daily_shape),
            "weekend_scale": self.weekend_scale,
            "spike_rate": self.spike_rate,
            "spike_power": self.spike_power,
            "noise_std": self.noise_std,
            "seed": self.seed,
        }

    @staticmethod
    def from_dict(d: dict) -> "HouseholdProfile":
        return HouseholdProfile(
            id=d["id"],
            base_load=d["base_load"],
            daily_shape=tuple(d["daily_shape"]),
            weekend_scale=d["weekend_scale"],
            spike_rate=d["spike_rate"],
            spike_power=d["spike_power"],
            noise_std=d["noise_std"],
            seed=d["seed"],
        )


def generate_household(profile: HouseholdProfile, start: datetime, days: int) -> QuarterSeries:
    """Deterministic synthetic load for one household (kW, >= 0)."""
    if days < 1:
        raise ValueError("days must be >= 1")
    n = days * STEPS_PER_DAY
    cal = calendar_features(start, n)
    qod = cal.quarter_of_day.astype(np.int64)
    shape = np.asarray(profile.daily_shape, dtype=np.float64)[qod]
    weekend = np.where(cal.is_weekend > 0.5, profile.weekend_scale, 1.0)
    values = profile.base_load * shape * weekend

    rng = np.random.default_rng(np.random.PCG64(profile.seed))
    spikes = np.zeros(n)
    for day in range(days):
        for _ in range(int(rng.poisson(profile.spike_rate))):
            offset = int(rng.integers(0, STEPS_PER_DAY))
            duration = int(rng.integers(1, 5))
            lo = day * STEPS_PER_DAY + offset
            spikes[lo : min(lo + duration, n)] += profile.spike_power
    noise = rng.normal(0.0, profile.noise_std, size=n) if profile.noise_std > 0.0 else 0.0

    return QuarterSeries(start, np.maximum(values + spikes + noise, 0.0), "kW")


def generate_cohort(profiles, start: datetime, days: int) -> dict[str, QuarterSeries]:
    """Synthetic series per household id; a pure function of its arguments."""
    cohort: dict[str, QuarterSeries] = {}
    for profile in profiles:
        if profile.id in cohort:
            raise ValueError(f"duplicate household id {profile.id!r}")
        cohort[profile.id] = generate_household(profile, start, days)
    return cohort


def default_profiles(n: int, seed_for, start_id: int = 0) -> list[HouseholdProfile]:
    """A family of plausible household profiles with per-household variation.

    `seed_for` maps a household id to its generator seed, so callers control
    how seeds derive from a master seed.
    """
    profiles = []
    q = np.arange(STEPS_PER_DAY, dtype=np.float64)
    for k in range(start_id, start_id + n):
        hid = f"house-{k:02d}"
        seed = int(seed_for(hid))
        rng = np.random.default_rng(np.random.PCG64(seed ^ 0xA5A5A5A5))
        morning_mu = rng.uniform(26.0, 36.0)  # quarters: 06:30..09:00
        evening_mu = rng.uniform(70.0, 82.0)  # quarters: 17:30..20:30
        morning_amp = rng.uniform(1.0, 2.0)
        evening_amp = rng.uniform(2.0, 4.0)
        shape = (
            1.0
            + morning_amp * np.exp(-0.5 * ((q - morning_mu) / 6.0) ** 2)
            + evening_amp * np.exp(-0.5 * ((q - evening_mu) / 8.0) ** 2)
        )
        profiles.append(
            HouseholdProfile(
                id=hid,
                base_load=float(rng.uniform(0.15, 0.45)),
                daily_shape=tuple(shape),
                weekend_scale=float(rng.uniform(1.05, 1.3)),
                spike_rate=float(rng.uniform(1.0, 3.0)),
                spike_power=float(rng.uniform(1.0, 2.5)),
                noise_std=float(rng.uniform(0.04, 0.10)),
                seed=seed,
            )
        )
    return profiles


# --- preprocessing --------------------------------------------------------------

MAX_FILLABLE_GAP = 4  # steps; longer gaps disqualify the whole day


def preprocess(raw) -> QuarterSeries:
    """Clean raw (timestamp, value-or-None) samples into a QuarterSeries.

    Steps, in order: snap timestamps to the quarter grid (averaging
    duplicates), floor negatives at zero, linearly interpolate interior
    gaps of up to one hour, drop whole days containing longer gaps and keep
    the longest contiguous remaining span, then clip the high tail at
    q99.9 + 3*IQR. Quantiles use exact order statistics so reprocessing the
    output changes nothing (the operation is idempotent).
    """
    samples = list(raw)
    if not samples:
        raise DataQualityError("empty input")

    slots: dict[int, list[float]] = {}
    for ts, value in samples:
        ts = ensure_utc(ts)
        qi = round(ts.timestamp() / STEP_SECONDS)
        if value is None or (isinstance(value, float) and math.isnan(value)):
            slots.setdefault(qi, [])
        else:
            slots.setdefault(qi, []).append(float(value))

    first, last = min(slots), max(slots)
    n = last - first + 1
    if n < STEPS_PER_DAY:
        raise DataQualityError(f"need at least one day of data, got {n} quarter slots")

    values = np.full(n, np.nan)
    for qi, vs in slots.items():
        if vs:
            values[qi - first] = float(np.mean(vs))
    valid = np.isfinite(values)
    invalid_fraction = 1.0 - valid.sum() / n
    if invalid_fraction > 0.5:
        raise DataQualityError(f"{invalid_fraction:.0%} of grid slots are null or missing")

    values = np.where(valid, np.maximum(values, 0.0), values)

    # trim unfillable edges, then interpolate interior gaps of <= 1 hour
    lo = int(np.argmax(valid))
    hi = n - int(np.argmax(valid[::-1]))
    values, valid = values[lo:hi], valid[lo:hi]
    first += lo
    filled = valid.copy()
    i = 0
    while i < valid.size:
        if valid[i]:
            i += 1
            continue
        j = i
        while j < valid.size and not valid[j]:
            j += 1
        if j - i <= MAX_FILLABLE_GAP:
            left, right = values[i - 1], values[j]
            frac = np.arange(1, j - i + 1) / (j - i + 1)
            values[i:j] = left + frac * (right - left)
            filled[i:j] = True
        i = j

    # drop days still containing gaps; keep the longest contiguous clean span
    days = (first + np.arange(filled.size)) // STEPS_PER_DAY
    bad_days = set(days[~filled].tolist())
    good = ~np.isin(days, list(bad_days)) if bad_days else np.ones(filled.size, dtype=bool)
    start_idx, length = _longest_true_run(good)
    if length < STEPS_PER_DAY:
        raise DataQualityError("no contiguous clean day survives gap handling")
    values = values[start_idx : start_idx + length]
    first += start_idx

    # clip the high tail; exact order statistics keep this idempotent
    q999 = np.quantile(values, 0.999, method="lower")
    iqr = np.quantile(values, 0.75, method="lower") - np.quantile(values, 0.25, method="lower")
    values = np.minimum(values, q999 + 3.0 * iqr)

    start = datetime.fromtimestamp(first * STEP_SECONDS, tz=timezone.utc)
    return QuarterSeries(start, values, "kW")


def _longest_true_run(mask: np.ndarray) -> tuple[int, int]:
    best_start = best_len = cur_start = cur_len = 0
    for i, ok in enumerate(mask):
        if ok:
            if cur_len == 0:
                cur_start = i
            cur_len += 1
            if cur_len > best_len:
                best_start, best_len = cur_start, cur_len
        else:
            cur_len = 0
    return best_start, best_len


# --- scaling --------------------------------------------------------------------


@dataclass(frozen=True)
class ScalerParams:
    """Min-max scaling parameters (an affine map, never a clamp)."""

    min: float
    max: float

    def __post_init__(self):
        if not (self.max - self.min > 1e-9):
            raise ScalerError(f"degenerate range [{self.min}, {self.max}]")


def fit_minmax(train: QuarterSeries) -> ScalerParams:
    return ScalerParams(float(np.min(train.values)), float(np.max(train.values)))


def transform(x, params: ScalerParams):
    return (np.asarray(x, dtype=np.float64) - params.min) / (params.max - params.min)


def inverse_transform(y, params: ScalerParams):
    return np.asarray(y, dtype=np.float64) * (params.max - params.min) + params.min


# --- splits ---------------------------------------------------------------------


@dataclass(frozen=True)
class SplitSpec:
    """End-anchored train/validation/test layout in whole days.

    The test window is always the trailing `test_weeks` weeks, validation
    the `validation_days` before it, training the `training_days` before
    that, so the test segment is identical for every training size.
    """

    training_days: int
    validation_days: int = 7
    test_weeks: int = 6

    def __post_init__(self):
        if self.training_days < 1 or self.validation_days < 1 or self.test_weeks < 1:
            raise ValueError("all split segments must be at least one unit long")

    @property
    def total_days(self) -> int:
        return self.training_days + self.validation_days + self.test_weeks * 7


def split_dataset(series: QuarterSeries, spec: SplitSpec):
    """(train, validation, test) series per the end-anchored layout."""
    need = spec.total_days * STEPS_PER_DAY
    if len(series) < need:
        raise InsufficientDataError(
            f"series has {len(series)} steps but the split needs {need} "
            f"({spec.training_days}+{spec.validation_days}+{spec.test_weeks * 7} days)"
        )
    n = len(series)
    test_n = spec.test_weeks * 7 * STEPS_PER_DAY
    val_n = spec.validation_days * STEPS_PER_DAY
    train_n = spec.training_days * STEPS_PER_DAY
    test = series.segment(n - test_n, n)
    val = series.segment(n - test_n - val_n, n - test_n)
    train = series.segment(n - test_n - val_n - train_n, n - test_n - val_n)
    return train, val, test


def pretrain_split(series: QuarterSeries):
    """Chronological 85/15 split; validation is the trailing floor(0.15*N) steps."""
    n = len(series)
    val_n = int(math.floor(0.15 * n))
    if val_n < 1 or n - val_n < 1:
        raise InsufficientDataError(f"series of {n} steps is too short for an 85/15 split")
    return series.segment(0, n - val_n), series.segment(n - val_n, n)


# --- CSV and manifests ------------------------------------------------------------

CSV_HEADER = "timestamp,value"


def write_csv(path, series: QuarterSeries):
    """Write `timestamp,value` rows, ISO-8601 UTC, LF endings, UTF-8."""
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(CSV_HEADER + "\n")
        ts = series.start
        for v in series.values:
            fh.write(f"{iso_utc(ts)},{float_repr(v)}\n")
            ts = ts + STEP


def read_csv(path, unit: str = "kW") -> QuarterSeries:
    """Strict reader for the write_csv format; errors name the offending row."""
    timestamps: list[int] = []
    values: list[float] = []
    with open(path, encoding="utf-8") as fh:
        header = fh.readline().rstrip("\n")
        if header != CSV_HEADER:
            raise CsvFormatError(f"row 1: expected header {CSV_HEADER!r}, got {header!r}")
        for row, line in enumerate(fh, start=2):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split(",")
            if len(parts) != 2:
                raise CsvFormatError(f"row {row}: expected 2 fields, got {len(parts)}")
            try:
                ts = _parse_iso_utc(parts[0])
            except ValueError as exc:
                raise CsvFormatError(f"row {row}: bad timestamp {parts[0]!r}: {exc}") from None
            try:
                value = float(parts[1])
            except ValueError:
                raise CsvFormatError(f"row {row}: bad value {parts[1]!r}") from None
            qi = round(ts.timestamp() / STEP_SECONDS)
            if ts.timestamp() != qi * STEP_SECONDS:
                raise CsvFormatError(f"row {row}: timestamp {parts[0]} is not quarter-aligned")
            if timestamps:
                if qi == timestamps[-1]:
                    raise CsvFormatError(f"row {row}: duplicate timestamp {parts[0]}")
                if qi < timestamps[-1]:
                    raise CsvFormatError(f"row {row}: timestamps not increasing at {parts[0]}")
                if qi != timestamps[-1] + 1:
                    raise CsvFormatError(f"row {row}: gap in grid before {parts[0]}")
            timestamps.append(qi)
            values.append(value)
    if not values:
        raise CsvFormatError("file contains a header but no data rows")
    start = datetime.fromtimestamp(timestamps[0] * STEP_SECONDS, tz=timezone.utc)
    return QuarterSeries(start, values, unit)


def _parse_iso_utc(text: str) -> datetime:
    if not text.endswith("Z"):
        raise ValueError("timestamp must end with Z (UTC)")
    return datetime.strptime(text, "%Y-%m-%dT%H:%M:%SZ").replace(tzinfo=timezone.utc)


MANIFEST_NAME = "manifest.json"


def write_cohort(directory, cohort: dict[str, QuarterSeries], profiles, roles: dict[str, str]):
    """One CSV per household plus a JSON manifest with profiles and roles."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    entries = []
    by_id = {p.id: p for p in profiles}
    for hid in sorted(cohort):
        filename = f"{hid}.csv"
        write_csv(directory / filename, cohort[hid])
        entries.append(
            {
                "id": hid,
                "filename": filename,
                "role": roles[hid],
                "profile": by_id[hid].to_dict(),
            }
        )
    manifest = {"households": entries}
    (directory / MANIFEST_NAME).write_text(
        json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )


def read_cohort(directory):
    """(series by id, profiles by id, roles by id) from a cohort directory."""
    directory = Path(directory)
    manifest_path = directory / MANIFEST_NAME
    if not manifest_path.exists():
        raise FileNotFoundError(f"no {MANIFEST_NAME} in {directory}")
    manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
    series: dict[str, QuarterSeries] = {}
    profiles: dict[str, HouseholdProfile] = {}
    roles: dict[str, str] = {}
    for entry in manifest["households"]:
        hid = entry["id"]
        series[hid] = read_csv(directory / entry["filename"])
        profiles[hid] = HouseholdProfile.from_dict(entry["profile"])
        roles[hid] = entry["role"]
    return series, profiles, roles
