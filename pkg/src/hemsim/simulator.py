"""Rolling-horizon closed-loop simulation of the home energy system.

At each simulated midnight the forecaster (model, oracle, or persistence)
issues a 96-step day-ahead demand forecast from past actuals only. At each
quarter-hour the dispatch LP is re-solved over the remainder of the
forecast day starting from the measured battery state, the first action is
applied to reality, and the realized cost is accounted from actual demand
through the piecewise tariff. PV is taken as known exactly.

Also here: the perfect-foresight and no-battery baselines, the persistence
forecast, a synthetic two-peak day-ahead tariff for self-contained runs,
and the cohort evaluation loop (local vs finetuned models across training
sizes).
"""
from __future__ import annotations

import math
from dataclasses import dataclass, replace
from datetime import datetime

import numpy as np

from .core import (
    STEP,
    STEPS_PER_DAY,
    BatteryParams,
    QuarterSeries,
    Tariff,
    derive_seed,
    float_repr,
    iso_utc,
    mae,
    quarter_index,
)
from .datagen import ScalerParams, SplitSpec, fit_minmax, inverse_transform, split_dataset
from .forecaster import (
    ModelWeights,
    TrainConfig,
    build_training_samples,
    finetune,
    forward_batch,
    inference_sample,
    init_model,
    stack_samples,
    train,
)
from .mpc import DT_HOURS, DispatchProblem, battery_trajectory, dispatch_step_costs, solve_dispatch

DEFAULT_BATTERY = BatteryParams(e_max=10.0, u_min=-5.0, u_max=5.0, eta=0.9, e_init=0.0)

DYNAMICS_TOL_KWH = 1e-9


class SimulationError(RuntimeError):
    """Internal inconsistency in a simulation (should never happen)."""


@dataclass(frozen=True)
class SimulationConfig:
    start: datetime
    steps: int = 7 * STEPS_PER_DAY
    battery: BatteryParams = DEFAULT_BATTERY
    replan: str = "per_step"  # or "daily"
    point_quantile: float = 0.5
    terminal_soc: bool = False

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if self.replan not in ("per_step", "daily"):
            raise ValueError(f"replan must be per_step or daily, got {self.replan!r}")
        if not 0.0 < self.point_quantile < 1.0:
            raise ValueError("point_quantile must lie in (0, 1)")


@dataclass(frozen=True)
class StepRecord:
    timestamp: datetime
    forecast_demand_kw: float
    actual_demand_kw: float
    pv_kw: float
    u_kw: float
    grid_kw: float
    energy_kwh: float  # stored energy AFTER applying this step's action
    step_cost_eur: float


@dataclass(frozen=True, eq=False)
class SimulationResult:
    records: tuple[StepRecord, ...]
    battery: BatteryParams
    label: str

    def __post_init__(self):
        # the physics must hold before a result is allowed to exist
        e_prev = self.battery.e_init
        for i, rec in enumerate(self.records):
            u, dt = rec.u_kw, DT_HOURS
            flow = self.battery.eta * u * dt if u >= 0.0 else u * dt / self.battery.eta
            if abs(rec.energy_kwh - (e_prev + flow)) > DYNAMICS_TOL_KWH:
                raise SimulationError(f"battery dynamics violated at record {i}")
            if not -DYNAMICS_TOL_KWH <= rec.energy_kwh <= self.battery.e_max + DYNAMICS_TOL_KWH:
                raise SimulationError(f"stored energy out of bounds at record {i}")
            e_prev = rec.energy_kwh

    @property
    def realized_cost(self) -> float:
        return float(sum(rec.step_cost_eur for rec in self.records))

    def forecast_series(self) -> QuarterSeries:
        return QuarterSeries(
            self.records[0].timestamp, [r.forecast_demand_kw for r in self.records], "kW"
        )


# --- forecast providers ---------------------------------------------------------


class OracleForecaster:
    """Returns the actual demand: the perfect-information reference."""

    label = "oracle"
    required_history = 0

    def __init__(self, actual: QuarterSeries):
        self.actual = actual

    def forecast_day(self, demand_history: QuarterSeries, day_start: datetime) -> np.ndarray:
        i = self.actual.index_of(day_start)
        return self.actual.values[i : i + STEPS_PER_DAY].copy()


class PersistenceForecaster:
    """Each step equals the actual one day earlier."""

    label = "persistence"
    required_history = STEPS_PER_DAY

    def forecast_day(self, demand_history: QuarterSeries, day_start: datetime) -> np.ndarray:
        fc = persistence_forecast(
            history_before(demand_history, day_start, STEPS_PER_DAY), STEPS_PER_DAY
        )
        return np.asarray(fc.values)


class ModelForecaster:
    """Quantile model + scaler; the MPC consumes one configured quantile."""

    label = "model"

    def __init__(self, weights: ModelWeights, scaler: ScalerParams, quantile: float = 0.5):
        if weights.config.horizon != STEPS_PER_DAY:
            raise ValueError(
                f"day-ahead simulation needs a {STEPS_PER_DAY}-step horizon, "
                f"model has {weights.config.horizon}"
            )
        q = np.asarray(weights.config.quantiles)
        self.q_index = int(np.argmin(np.abs(q - quantile)))
        if abs(q[self.q_index] - quantile) > 1e-9:
            raise ValueError(f"quantile {quantile} not among model levels {tuple(q)}")
        self.weights = weights
        self.scaler = scaler
        self.required_history = weights.config.input_window

    def forecast_day(self, demand_history: QuarterSeries, day_start: datetime) -> np.ndarray:
        return self.forecast_days(demand_history, [day_start])[0]

    def forecast_days(self, demand_history: QuarterSeries, day_starts, chunk: int = 16) -> np.ndarray:
        """Batched day-ahead forecasts, (n_days, 96) in kW, floored at zero."""
        blocks = []
        for lo in range(0, len(day_starts), chunk):
            samples = [
                inference_sample(demand_history, self.scaler, self.weights.config, ds)
                for ds in day_starts[lo : lo + chunk]
            ]
            past, pc, fc, _ = stack_samples(samples)
            pred = forward_batch(self.weights.config, self.weights.params, past, pc, fc)
            blocks.append(inverse_transform(pred[:, :, self.q_index], self.scaler))
        return np.maximum(np.concatenate(blocks, axis=0), 0.0)


def history_before(series: QuarterSeries, ts: datetime, steps: int) -> QuarterSeries:
    """The `steps` actual values immediately preceding ts."""
    offset = quarter_index(ts) - quarter_index(series.start)
    if offset < steps:
        raise ValueError(f"need {steps} steps of history before {ts}, have {offset}")
    return series.segment(offset - steps, offset)


def persistence_forecast(history: QuarterSeries, horizon: int) -> QuarterSeries:
    """Forecast step t repeats the actual value one day earlier."""
    if horizon < 1:
        raise ValueError("horizon must be >= 1")
    if len(history) < STEPS_PER_DAY:
        raise ValueError(f"persistence needs at least {STEPS_PER_DAY} steps of history")
    last_day = history.values[-STEPS_PER_DAY:]
    reps = int(np.ceil(horizon / STEPS_PER_DAY))
    values = np.tile(last_day, reps)[:horizon]
    return QuarterSeries(history.end, values, history.unit)


# --- cost primitives --------------------------------------------------------------


def no_battery_cost(actual_demand: QuarterSeries, pv: QuarterSeries, tariff: Tariff) -> float:
    """Cost of serving demand + pv straight from the grid (u identically 0)."""
    actual_demand.require_same_grid(pv, "demand/pv")
    actual_demand.require_same_grid(tariff.lambda_con, "demand/tariff")
    grid = actual_demand.values + pv.values
    cost = np.where(
        grid >= 0.0, tariff.lambda_con.values * grid, tariff.lambda_inj.values * grid
    )
    return float(np.sum(cost) * DT_HOURS)


def _window(series: QuarterSeries, start: datetime, steps: int) -> QuarterSeries:
    i = series.index_of(start)
    if i + steps > len(series):
        raise ValueError(f"series ends before the requested window of {steps} steps from {start}")
    return series.segment(i, i + steps)


def _tariff_window(tariff: Tariff, start: datetime, steps: int) -> Tariff:
    i = tariff.lambda_con.index_of(start)
    if i + steps > len(tariff):
        raise ValueError("tariff ends before the requested window")
    return tariff.segment(i, i + steps)


# --- simulations -------------------------------------------------------------------


def simulate_mpc(
    actual_demand: QuarterSeries,
    pv: QuarterSeries,
    tariff: Tariff,
    provider,
    config: SimulationConfig,
) -> SimulationResult:
    """Closed-loop rolling simulation; see the module docstring for the loop."""
    start_q = quarter_index(config.start)
    if start_q % STEPS_PER_DAY != 0:
        raise ValueError("simulation must start at a UTC midnight (day-ahead forecasts)")
    hist = quarter_index(config.start) - quarter_index(actual_demand.start)
    if hist < provider.required_history:
        raise ValueError(
            f"{provider.label} forecaster needs {provider.required_history} steps of "
            f"history before {config.start}, have {hist}"
        )

    bat = config.battery
    e = bat.e_init
    day_forecast = None
    day_plan = None
    day_start_energy = e
    day_len = 0
    records: list[StepRecord] = []

    for step in range(config.steps):
        ts = config.start + STEP * step
        k = step % STEPS_PER_DAY
        if k == 0 or day_forecast is None:
            day_forecast = np.asarray(provider.forecast_day(actual_demand, ts), dtype=float)
            if day_forecast.shape[0] < min(STEPS_PER_DAY, config.steps - step):
                raise SimulationError("day-ahead forecast shorter than the remaining day")
            day_len = min(STEPS_PER_DAY, config.steps - step)
            day_start_energy = e
            day_plan = None

        if config.replan == "per_step" or day_plan is None:
            plan_start = ts
            horizon = day_len - k
            # measured state, nudged inside bounds against ~1e-12 LP residue
            plan_e = min(max(e, 0.0), bat.e_max)
            problem = DispatchProblem(
                demand=QuarterSeries(plan_start, np.maximum(day_forecast[k : k + horizon], 0.0), "kW"),
                pv=_window(pv, plan_start, horizon),
                tariff=_tariff_window(tariff, plan_start, horizon),
                battery=replace(bat, e_init=plan_e),
                terminal_energy_min=(
                    min(max(day_start_energy, 0.0), bat.e_max) if config.terminal_soc else None
                ),
            )
            day_plan = solve_dispatch(problem).u
            plan_offset = k

        u = float(day_plan[k - plan_offset])
        actual_kw = float(actual_demand.values[actual_demand.index_of(ts)])
        pv_kw = float(pv.values[pv.index_of(ts)])
        grid = actual_kw + pv_kw + u
        lam_i = tariff.lambda_con.index_of(ts)
        lam = tariff.lambda_con.values[lam_i] if grid >= 0.0 else tariff.lambda_inj.values[lam_i]
        cost = float(lam * grid * DT_HOURS)
        e = e + (bat.eta * u * DT_HOURS if u >= 0.0 else u * DT_HOURS / bat.eta)
        records.append(
            StepRecord(
                timestamp=ts,
                forecast_demand_kw=float(day_forecast[k]),
                actual_demand_kw=actual_kw,
                pv_kw=pv_kw,
                u_kw=u,
                grid_kw=grid,
                energy_kwh=e,
                step_cost_eur=cost,
            )
        )

    return SimulationResult(records=tuple(records), battery=bat, label=provider.label)


def perfect_foresight(
    actual_demand: QuarterSeries,
    pv: QuarterSeries,
    tariff: Tariff,
    config: SimulationConfig,
) -> SimulationResult:
    """One dispatch LP over the whole period with the actual demand."""
    demand = _window(actual_demand, config.start, config.steps)
    problem = DispatchProblem(
        demand=demand,
        pv=_window(pv, config.start, config.steps),
        tariff=_tariff_window(tariff, config.start, config.steps),
        battery=config.battery,
        terminal_soc_at_least_initial=config.terminal_soc,
    )
    sol = solve_dispatch(problem)
    energy = battery_trajectory(problem, sol.u)
    records = tuple(
        StepRecord(
            timestamp=config.start + STEP * t,
            forecast_demand_kw=float(demand.values[t]),
            actual_demand_kw=float(demand.values[t]),
            pv_kw=float(problem.pv.values[t]),
            u_kw=float(sol.u[t]),
            grid_kw=float(demand.values[t] + problem.pv.values[t] + sol.u[t]),
            energy_kwh=float(energy[t + 1]),
            step_cost_eur=float(sol.step_costs[t]),
        )
        for t in range(config.steps)
    )
    return SimulationResult(records=records, battery=config.battery, label="perfect_foresight")


def simulate_no_battery(
    actual_demand: QuarterSeries, pv: QuarterSeries, tariff: Tariff, config: SimulationConfig
) -> SimulationResult:
    """u identically zero; realized cost equals no_battery_cost."""
    demand = _window(actual_demand, config.start, config.steps)
    pv_w = _window(pv, config.start, config.steps)
    tar = _tariff_window(tariff, config.start, config.steps)
    problem = DispatchProblem(demand=demand, pv=pv_w, tariff=tar, battery=dead)
    costs = dispatch_step_costs(problem, np.zeros(config.steps))
    records = tuple(
        StepRecord(
            timestamp=config.start + STEP * t,
            forecast_demand_kw=float(demand.values[t]),
            actual_demand_kw=float(demand.values[t]),
            pv_kw=float(pv_w.values[t]),
            u_kw=0.0,
            grid_kw=float(demand.values[t] + pv_w.values[t]),
            energy_kwh=config.battery.e_init,
            step_cost_eur=float(costs[t]),
        )
        for t in range(config.steps)
    )
    return SimulationResult(records=records, battery=config.battery, label="no_battery")


# --- synthetic tariff ---------------------------------------------------------------


def synthetic_tariff(
    start: datetime,
    steps: int,
    base: float = 0.08,
    morning_peak: float = 0.10,
    evening_peak: float = 0.16,
    injection_fraction: float = 0.4,
) -> Tariff:
    """Deterministic two-peak daily consumption price; injection at a fraction."""
    if not 0.0 <= injection_fraction <= 1.0:
        raise ValueError("injection_fraction must lie in [0, 1]")
    base_q = quarter_index(start)
    qod = (base_q + np.arange(steps)) % STEPS_PER_DAY
    lam_con = (
        base
        + morning_peak * np.exp(-0.5 * ((qod - 32) / 6.0) ** 2)
        + evening_peak * np.exp(-0.5 * ((qod - 76) / 8.0) ** 2)
    )
    return Tariff(
        QuarterSeries(start, lam_con, "EUR_per_kWh"),
        QuarterSeries(start, injection_fraction * lam_con, "EUR_per_kWh"),
    )


def zero_pv(start: datetime, steps: int) -> QuarterSeries:
    return QuarterSeries(start, np.zeros(steps), "kW")


# --- day-ahead evaluation -------------------------------------------------------------


def day_ahead_forecast_series(provider, actual_demand: QuarterSeries, start: datetime, n_days: int) -> QuarterSeries:
    """Concatenated daily point forecasts over consecutive days (kW)."""
    day_starts = [start + STEP * (STEPS_PER_DAY * d) for d in range(n_days)]
    if hasattr(provider, "forecast_days"):
        block = provider.forecast_days(actual_demand, day_starts)
        values = np.asarray(block).reshape(-1)
    else:
        values = np.concatenate(
            [np.asarray(provider.forecast_day(actual_demand, ds))[:STEPS_PER_DAY] for ds in day_starts]
        )
    return QuarterSeries(start, values, "kW")


def day_ahead_mae(provider, actual_demand: QuarterSeries, start: datetime, n_days: int) -> float:
    forecasts = day_ahead_forecast_series(provider, actual_demand, start, n_days)
    actual = _window(actual_demand, start, n_days * STEPS_PER_DAY)
    return mae(forecasts, actual)


# --- cohort evaluation -----------------------------------------------------------------


@dataclass(frozen=True)
class CohortEvalConfig:
    """Shared protocol for the local-vs-finetuned comparison.

    Local and finetuned runs use the identical TrainConfig; only the
    initialization differs (fresh random weights vs the global model).
    """

    train_config: TrainConfig
    validation_days: int = 7
    test_weeks: int = 6
    scale_before_split: bool = False
    simulation_days: int = 7
    battery: BatteryParams = DEFAULT_BATTERY
    replan: str = "per_step"
    point_quantile: float = 0.5
    terminal_soc: bool = False
    seed: int = 0


@dataclass(frozen=True)
class CellResult:
    household: str
    model_kind: str
    training_days: int
    mae_kw: float = math.nan
    cost_eur: float = math.nan
    no_battery_eur: float = math.nan
    perfect_foresight_eur: float = math.nan
    savings_pct: float = math.nan
    error: str | None = None


@dataclass(frozen=True)
class AggregateRow:
    model_kind: str
    training_days: int
    n: int
    mae_mean: float
    mae_std: float
    cost_mean: float
    cost_std: float


@dataclass(frozen=True, eq=False)
class CohortReport:
    cells: tuple[CellResult, ...]
    persistence_mae: dict[str, float]

    def aggregate(self) -> list[AggregateRow]:
        """Mean and population standard deviation over households per cell kind."""
        rows = []
        kinds = sorted({(c.model_kind, c.training_days) for c in self.cells})
        for kind, days in kinds:
            ok = [
                c for c in self.cells
                if c.model_kind == kind and c.training_days == days and c.error is None
            ]
            if not ok:
                continue
            maes = np.array([c.mae_kw for c in ok])
            costs = np.array([c.cost_eur for c in ok])
            rows.append(
                AggregateRow(
                    model_kind=kind,
                    training_days=days,
                    n=len(ok),
                    mae_mean=float(maes.mean()),
                    mae_std=float(maes.std()),  # population std (ddof=0)
                    cost_mean=float(costs.mean()),
                    cost_std=float(costs.std()),
                )
            )
        return rows


def evaluate_cell(
    series: QuarterSeries,
    global_weights: ModelWeights | None,
    kind: str,
    training_days: int,
    cfg: CohortEvalConfig,
    tariff: Tariff,
    pv: QuarterSeries,
    seed: int,
) -> tuple[float, SimulationResult, SimulationResult, SimulationResult]:
    """Train one model per the protocol and measure MAE plus control costs."""
    if global_weights is None:
        raise ValueError("cohort evaluation needs the global weights for the model config")
    model_config = global_weights.config
    spec = SplitSpec(
        training_days=training_days,
        validation_days=cfg.validation_days,
        test_weeks=cfg.test_weeks,
    )
    train_seg, val_seg, test_seg = split_dataset(series, spec)
    scaler = fit_minmax(series if cfg.scale_before_split else train_seg)

    train_lo = series.index_of(train_seg.start)
    train_hi = train_lo + len(train_seg)
    val_hi = train_hi + len(val_seg)
    train_samples = build_training_samples(series, scaler, model_config, (train_lo, train_hi))
    val_samples = build_training_samples(series, scaler, model_config, (train_hi, val_hi))
    if not train_samples or not val_samples:
        raise ValueError("training split yields no usable windows")

    tcfg = replace(cfg.train_config, seed=seed)
    if kind == "finetuned":
        weights, _ = finetune(global_weights, train_samples, val_samples, tcfg)
    elif kind == "local":
        fresh = init_model(model_config, seed=seed)
        weights, _ = train(fresh, train_samples, val_samples, tcfg)
    else:
        raise ValueError(f"unknown model kind {kind!r}")

    provider = ModelForecaster(weights, scaler, cfg.point_quantile)
    n_test_days = cfg.test_weeks * 7
    mae_kw = day_ahead_mae(provider, series, test_seg.start, n_test_days)

    sim_cfg = SimulationConfig(
        start=test_seg.start,
        steps=cfg.simulation_days * STEPS_PER_DAY,
        battery=cfg.battery,
        replan=cfg.replan,
        point_quantile=cfg.point_quantile,
        terminal_soc=cfg.terminal_soc,
    )
    realized = simulate_mpc(series, pv, tariff, provider, sim_cfg)
    oracle = perfect_foresight(series, pv, tariff, sim_cfg)
    no_batt = simulate_no_battery(series, pv, tariff, sim_cfg)
    return mae_kw, realized, oracle, no_batt


def evaluate_cohort(
    households: dict[str, QuarterSeries],
    global_weights: ModelWeights,
    protocol: CohortEvalConfig,
    sizes,
    tariff: Tariff | None = None,
    pv: QuarterSeries | None = None,
) -> CohortReport:
    """Local-vs-finetuned comparison over households and training sizes.

    Per-cell failures are recorded on the cell, not raised, so one broken
    household cannot abort the cohort.
    """
    cells: list[CellResult] = []
    persistence: dict[str, float] = {}
    for hid in sorted(households):
        series = households[hid]
        if tariff is None:
            tar = synthetic_tariff(series.start, len(series))
        else:
            tar = tariff
        pv_series = zero_pv(series.start, len(series)) if pv is None else pv

        try:
            spec = SplitSpec(
                training_days=min(sizes),
                validation_days=protocol.validation_days,
                test_weeks=protocol.test_weeks,
            )
            _, _, test_seg = split_dataset(series, spec)
            persistence[hid] = day_ahead_mae(
                PersistenceForecaster(), series, test_seg.start, protocol.test_weeks * 7
            )
        except Exception as exc:  # noqa: BLE001 - recorded, not fatal
            persistence[hid] = math.nan

        for days in sizes:
            for kind in ("local", "finetuned"):
                seed = derive_seed(protocol.seed, f"{kind}/{hid}/{days}")
                try:
                    mae_kw, realized, oracle, no_batt = evaluate_cell(
                        series, global_weights, kind, days, protocol, tar, pv_series, seed
                    )
                    nb = no_batt.realized_cost
                    savings = (nb - realized.realized_cost) / nb * 100.0 if abs(nb) > 1e-12 else math.nan
                    cells.append(
                        CellResult(
                            household=hid,
                            model_kind=kind,
                            training_days=days,
                            mae_kw=mae_kw,
                            cost_eur=realized.realized_cost,
                            no_battery_eur=nb,
                            perfect_foresight_eur=oracle.realized_cost,
                            savings_pct=savings,
                        )
                    )
                except Exception as exc:  # noqa: BLE001 - recorded, not fatal
                    cells.append(
                        CellResult(
                            household=hid, model_kind=kind, training_days=days, error=str(exc)
                        )
                    )
    return CohortReport(cells=tuple(cells), persistence_mae=persistence)


# --- CSV output -------------------------------------------------------------------------

SIMULATION_LOG_HEADER = "timestamp,forecast_kw,actual_kw,pv_kw,u_kw,grid_kw,energy_kwh,cost_eur"
COHORT_REPORT_HEADER = (
    "household,model_kind,training_days,mae_kw,cost_eur,no_battery_eur,"
    "perfect_foresight_eur,savings_pct"
)


def write_simulation_log(path, result: SimulationResult):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(SIMULATION_LOG_HEADER + "\n")
        for r in result.records:
            fields = (
                r.forecast_demand_kw, r.actual_demand_kw, r.pv_kw,
                r.u_kw, r.grid_kw, r.energy_kwh, r.step_cost_eur,
            )
            fh.write(iso_utc(r.timestamp) + "," + ",".join(float_repr(v) for v in fields) + "\n")


def write_cohort_report_csv(path, report: CohortReport):
    """Deterministic ordering: household, then model kind, then size."""
    cells = sorted(report.cells, key=lambda c: (c.household, c.model_kind, c.training_days))
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(COHORT_REPORT_HEADER + "\n")
        for c in cells:
            if c.error is not None:
                fh.write(f"{c.household},{c.model_kind},{c.training_days},error,error,error,error,error\n")
                continue
            fields = (c.mae_kw, c.cost_eur, c.no_battery_eur, c.perfect_foresight_eur, c.savings_pct)
            fh.write(
                f"{c.household},{c.model_kind},{c.training_days},"
                + ",".join(float_repr(v) for v in fields)
                + "\n"
            )
