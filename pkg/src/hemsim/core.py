"""Quarter-hour time-series primitives shared by every other module.

All data in this toolkit lives on one rigid grid: UTC timestamps, fixed
900-second steps, finite float64 values tagged with an explicit unit.
This module owns that grid plus the calendar covariates and the two scalar
metrics (MAE, pinball loss) used throughout.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from datetime import datetime, timedelta, timezone

import numpy as np

STEP_SECONDS = 900
STEP = timedelta(seconds=STEP_SECONDS)
STEPS_PER_DAY = 96
STEPS_PER_HOUR = 4

UNITS = ("kW", "kWh", "EUR_per_kWh", "dimensionless")


class AlignmentError(ValueError):
    """A timestamp does not sit on the 15-minute UTC grid."""


class GridMismatchError(ValueError):
    """Two series were expected to share one grid but do not."""


class UnitMismatchError(ValueError):
    """Two series were expected to share one unit but do not."""


def ensure_utc(ts: datetime) -> datetime:
    """Return `ts` normalized to UTC; reject naive datetimes."""
    if ts.tzinfo is None or ts.utcoffset() is None:
        raise AlignmentError(f"timestamp {ts!r} is naive; UTC timestamps required")
    return ts.astimezone(timezone.utc)


def is_quarter_aligned(ts: datetime) -> bool:
    ts = ensure_utc(ts)
    return ts.microsecond == 0 and ts.second == 0 and ts.minute % 15 == 0


def quarter_index(ts: datetime) -> int:
    """Index of `ts` on the global quarter-hour grid (quarters since epoch)."""
    ts = ensure_utc(ts)
    if not is_quarter_aligned(ts):
        raise AlignmentError(f"timestamp {ts.isoformat()} is not quarter-hour aligned")
    return int(ts.timestamp()) // STEP_SECONDS


def _readonly(values) -> np.ndarray:
    arr = np.array(values, dtype=np.float64, copy=True)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class QuarterSeries:
    """A value sequence pinned to a contiguous 15-minute UTC grid.

    Index i maps to timestamp ``start + i * 900s``. Values are finite
    float64; the array is read-only after construction, so instances are
    safe to share freely.
    """

    start: datetime
    values: np.ndarray
    unit: str = "kW"

    def __post_init__(self):
        start = ensure_utc(self.start)
        if not is_quarter_aligned(start):
            raise AlignmentError(f"series start {start.isoformat()} is not quarter-hour aligned")
        vals = np.asarray(self.values, dtype=np.float64)
        if vals.ndim != 1:
            raise ValueError(f"series values must be 1-D, got shape {vals.shape}")
        if vals.size < 1:
            raise ValueError("series must contain at least one value")
        if not np.all(np.isfinite(vals)):
            raise ValueError("series values must be finite (no NaN/inf)")
        if self.unit not in UNITS:
            raise ValueError(f"unknown unit {self.unit!r}; expected one of {UNITS}")
        object.__setattr__(self, "start", start)
        object.__setattr__(self, "values", _readonly(vals))

    def __len__(self) -> int:
        return int(self.values.size)

    def __eq__(self, other) -> bool:
        if not isinstance(other, QuarterSeries):
            return NotImplemented
        return (
            self.start == other.start
            and self.unit == other.unit
            and np.array_equal(self.values, other.values)
        )

    @property
    def end(self) -> datetime:
        """Exclusive end timestamp (one step past the last value)."""
        return self.start + STEP * len(self)

    def timestamp(self, i: int) -> datetime:
        if not (-len(self) <= i < len(self)):
            raise IndexError(f"index {i} out of range for series of length {len(self)}")
        if i < 0:
            i += len(self)
        return self.start + STEP * i

    def timestamps(self) -> list[datetime]:
        return [self.start + STEP * i for i in range(len(self))]

    def index_of(self, ts: datetime) -> int:
        """Index of timestamp `ts` in this series; errors if off-grid or outside."""
        i = quarter_index(ts) - quarter_index(self.start)
        if not 0 <= i < len(self):
            raise GridMismatchError(f"timestamp {ts} lies outside series [{self.start}, {self.end})")
        return i

    def segment(self, i: int, j: int) -> "QuarterSeries":
        """Sub-series covering indices [i, j)."""
        if not (0 <= i < j <= len(self)):
            raise ValueError(f"invalid segment [{i}, {j}) for series of length {len(self)}")
        return QuarterSeries(self.timestamp(i), self.values[i:j], self.unit)

    def with_values(self, values, unit: str | None = None) -> "QuarterSeries":
        """Same grid, new values (and optionally a new unit)."""
        return QuarterSeries(self.start, values, self.unit if unit is None else unit)

    def same_grid(self, other: "QuarterSeries") -> bool:
        return self.start == other.start and len(self) == len(other)

    def require_same_grid(self, other: "QuarterSeries", what: str = "series"):
        if not self.same_grid(other):
            raise GridMismatchError(
                f"{what} grids differ: [{self.start}, len {len(self)}] vs [{other.start}, len {len(other)}]"
            )


# --- calendar covariates ----------------------------------------------------

CALENDAR_COLUMNS = (
    "quarter_of_day",
    "hour_of_day",
    "day_of_week",
    "is_weekend",
    "qod_sin",
    "qod_cos",
    "dow_sin",
    "dow_cos",
)

# Bounded columns suitable as forecaster covariates without extra scaling.
DEFAULT_COVARIATES = ("qod_sin", "qod_cos", "dow_sin", "dow_cos", "is_weekend")

# 1970-01-01 was a Thursday; weekday convention is Monday == 0.
_EPOCH_WEEKDAY = 3


@dataclass(frozen=True, eq=False)
class CalendarFeatures:
    """Per-step calendar covariates derived from the timestamp grid alone."""

    start: datetime
    quarter_of_day: np.ndarray
    hour_of_day: np.ndarray
    day_of_week: np.ndarray
    is_weekend: np.ndarray
    qod_sin: np.ndarray
    qod_cos: np.ndarray
    dow_sin: np.ndarray
    dow_cos: np.ndarray

    def __len__(self) -> int:
        return int(self.quarter_of_day.size)

    def matrix(self, columns=DEFAULT_COVARIATES) -> np.ndarray:
        """Stack the named columns into an (n, len(columns)) float64 matrix."""
        unknown = [c for c in columns if c not in CALENDAR_COLUMNS]
        if unknown:
            raise ValueError(f"unknown calendar columns {unknown}; available: {CALENDAR_COLUMNS}")
        return np.column_stack([np.asarray(getattr(self, c), dtype=np.float64) for c in columns])


def calendar_features(start: datetime, steps: int) -> CalendarFeatures:
    """Calendar covariate rows for `steps` quarters beginning at `start`.

    Deterministic in (start, steps); `start` must be quarter-aligned.
    """
    if steps < 1:
        raise ValueError("steps must be >= 1")
    base = quarter_index(start)  # raises AlignmentError if misaligned
    idx = base + np.arange(steps, dtype=np.int64)
    qod = idx % STEPS_PER_DAY
    day = idx // STEPS_PER_DAY
    dow = (day + _EPOCH_WEEKDAY) % 7
    hour = qod // STEPS_PER_HOUR
    weekend = (dow >= 5).astype(np.int64)
    qod_angle = 2.0 * math.pi * qod / STEPS_PER_DAY
    dow_angle = 2.0 * math.pi * dow / 7.0
    mk = _readonly
    return CalendarFeatures(
        start=ensure_utc(start),
        quarter_of_day=mk(qod),
        hour_of_day=mk(hour),
        day_of_week=mk(dow),
        is_weekend=mk(weekend),
        qod_sin=mk(np.sin(qod_angle)),
        qod_cos=mk(np.cos(qod_angle)),
        dow_sin=mk(np.sin(dow_angle)),
        dow_cos=mk(np.cos(dow_angle)),
    )


# --- metrics ------------------------------------------------------------------


def mae(forecast: QuarterSeries, actual: QuarterSeries) -> float:
    """Mean absolute error between two series on the same grid and unit."""
    if forecast.unit != actual.unit:
        raise UnitMismatchError(f"units differ: {forecast.unit} vs {actual.unit}")
    forecast.require_same_grid(actual, "mae")
    return float(np.mean(np.abs(forecast.values - actual.values)))


def validate_quantiles(quantiles) -> np.ndarray:
    q = np.asarray(quantiles, dtype=np.float64)
    if q.ndim != 1 or q.size < 1:
        raise ValueError("quantiles must be a non-empty 1-D sequence")
    if np.any(q <= 0.0) or np.any(q >= 1.0):
        raise ValueError(f"quantile levels must lie strictly inside (0, 1), got {q.tolist()}")
    if np.any(np.diff(q) <= 0.0):
        raise ValueError(f"quantile levels must be strictly increasing, got {q.tolist()}")
    return q


def pinball_loss(pred, actual, quantiles) -> float:
    """Mean pinball (quantile) loss of per-quantile predictions.

    `pred` has the quantile axis last; `actual` broadcasts against the
    remaining axes. Returns the mean of max(q*(y-yhat), (q-1)*(y-yhat))
    over all entries and quantile levels.
    """
    q = validate_quantiles(quantiles)
    p = np.asarray(pred, dtype=np.float64)
    if p.ndim == 0:
        p = p.reshape(1)
    if p.shape[-1] != q.size:
        raise ValueError(f"pred last axis {p.shape[-1]} does not match {q.size} quantiles")
    y = np.asarray(actual, dtype=np.float64)
    r = y[..., None] - p
    loss = np.maximum(q * r, (q - 1.0) * r)
    return float(np.mean(loss))


# --- battery and tariff -------------------------------------------------------


@dataclass(frozen=True)
class BatteryParams:
    """Linear battery model: capacity, power bounds, round-trip efficiency.

    Charging stores `eta * u * dt` kWh; discharging removes `u * dt / eta`,
    so a full cycle returns eta^2 of the energy bought.
    """

    e_max: float
    u_min: float
    u_max: float
    eta: float
    e_init: float = 0.0

    def __post_init__(self):
        if not (self.e_max >= 0.0 and math.isfinite(self.e_max)):
            raise ValueError(f"e_max must be finite and >= 0, got {self.e_max}")
        if not 0.0 <= self.e_init <= self.e_max:
            raise ValueError(f"e_init must lie in [0, e_max], got {self.e_init} vs e_max {self.e_max}")
        if not (self.u_min <= 0.0 <= self.u_max):
            raise ValueError(f"need u_min <= 0 <= u_max, got [{self.u_min}, {self.u_max}]")
        if not 0.0 < self.eta <= 1.0:
            raise ValueError(f"eta must lie in (0, 1], got {self.eta}")
        for name in ("u_min", "u_max", "eta", "e_init"):
            if not math.isfinite(getattr(self, name)):
                raise ValueError(f"{name} must be finite")


@dataclass(frozen=True, eq=False)
class Tariff:
    """Time-varying consumption and injection prices on one grid.

    Exactness of the dispatch linearization additionally needs
    lambda_inj <= lambda_con at every step; that is checked where it
    matters, in the LP builder, so that violating tariffs remain
    constructible (and are refused with a clear reason there).
    """

    lambda_con: QuarterSeries
    lambda_inj: QuarterSeries

    def __post_init__(self):
        for name, s in (("lambda_con", self.lambda_con), ("lambda_inj", self.lambda_inj)):
            if s.unit != "EUR_per_kWh":
                raise UnitMismatchError(f"{name} must have unit EUR_per_kWh, got {s.unit}")
            if np.any(s.values < 0.0):
                raise ValueError(f"{name} must be >= 0 everywhere")
        self.lambda_con.require_same_grid(self.lambda_inj, "tariff")

    def __len__(self) -> int:
        return len(self.lambda_con)

    @property
    def start(self) -> datetime:
        return self.lambda_con.start

    def segment(self, i: int, j: int) -> "Tariff":
        return Tariff(self.lambda_con.segment(i, j), self.lambda_inj.segment(i, j))

    def injection_exceeds_consumption(self) -> np.ndarray:
        """Step indices where lambda_inj > lambda_con (LP exactness violations)."""
        return np.flatnonzero(self.lambda_inj.values > self.lambda_con.values)


def utc(year, month, day, hour=0, minute=0) -> datetime:
    """Shorthand for a UTC datetime, used heavily by tests and examples."""
    return datetime(year, month, day, hour, minute, tzinfo=timezone.utc)


def float_repr(x) -> str:
    """Shortest decimal that round-trips the float64 exactly (for CSV output)."""
    return repr(float(x))


def derive_seed(master_seed: int, label: str) -> int:
    """Stable 63-bit sub-seed for one consumer of a master seed.

    Hashing the label keeps consumers independent: adding one household or
    stage never perturbs the seeds of the others.
    """
    import hashlib

    digest = hashlib.sha256(f"{master_seed}:{label}".encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little") >> 1


def iso_utc(ts: datetime) -> str:
    """ISO-8601 UTC with trailing Z, e.g. 2023-01-02T00:15:00Z."""
    return ensure_utc(ts).strftime("%Y-%m-%dT%H:%M:%SZ")
