"""Day-ahead window extraction: series -> ForecastSample lists.

Samples anchor at midnights (one per day): the target window covers a
calendar day, the past window the preceding input_window steps of actuals.
Past windows may reach back before a segment boundary (earlier actuals are
legitimate context); only the target must lie inside the requested range.
"""
from __future__ import annotations

from datetime import datetime

import numpy as np

from ..core import STEPS_PER_DAY, QuarterSeries, calendar_features, quarter_index
from ..datagen import ScalerParams, transform
from .model import ForecastSample, ModelConfig


class HistoryError(ValueError):
    """Not enough past actuals to fill the model's input window."""


def midnight_indices(series: QuarterSeries) -> np.ndarray:
    """Indices of steps whose timestamp is a UTC midnight."""
    base = quarter_index(series.start)
    idx = base + np.arange(len(series))
    return np.flatnonzero(idx % STEPS_PER_DAY == 0)


def build_training_samples(
    series: QuarterSeries,
    scaler: ScalerParams,
    config: ModelConfig,
    target_range: tuple[int, int] | None = None,
) -> list[ForecastSample]:
    """One sample per day whose target window fits in `target_range`.

    target_range is a half-open index interval into `series`; None means
    anywhere the window geometry allows.
    """
    lo, hi = target_range if target_range is not None else (0, len(series))
    if not (0 <= lo <= hi <= len(series)):
        raise ValueError(f"target_range {target_range} outside series of length {len(series)}")
    scaled = transform(series.values, scaler)
    cov = calendar_features(series.start, len(series)).matrix(config.covariates)
    samples = []
    for i in midnight_indices(series):
        i = int(i)
        if i < config.input_window or i < lo:
            continue
        if i + config.horizon > hi:
            continue
        samples.append(
            ForecastSample(
                past_target=scaled[i - config.input_window : i],
                past_covariates=cov[i - config.input_window : i],
                future_covariates=cov[i : i + config.horizon],
                target=scaled[i : i + config.horizon],
            )
        )
    return samples


def inference_sample(
    series: QuarterSeries,
    scaler: ScalerParams,
    config: ModelConfig,
    day_start: datetime,
) -> ForecastSample:
    """Sample forecasting `config.horizon` steps from `day_start`.

    Only actuals strictly before `day_start` feed the input window; the
    future covariates come from the timestamp grid alone, so `day_start`
    may be the step right after the series ends.
    """
    offset = quarter_index(day_start) - quarter_index(series.start)
    if not 0 < offset <= len(series):
        raise HistoryError(f"day start {day_start} not adjacent to or inside the series")
    if offset < config.input_window:
        raise HistoryError(
            f"need {config.input_window} steps of history before {day_start}, have {offset}"
        )
    past = series.values[offset - config.input_window : offset]
    cov_start = series.timestamp(offset - config.input_window)
    cov = calendar_features(cov_start, config.input_window + config.horizon).matrix(config.covariates)
    return ForecastSample(
        past_target=transform(past, scaler),
        past_covariates=cov[: config.input_window],
        future_covariates=cov[config.input_window :],
        target=None,
    )
