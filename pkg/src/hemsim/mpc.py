"""Battery dispatch as an exact linear program, plus oracle and verifier.

The dispatch problem minimizes the cost of grid energy for a household with
demand, PV generation (stored as values <= 0) and a linear battery over a
quarter-hour horizon. Import and export prices differ, and charging and
discharging have asymmetric efficiency, so both the cost and the dynamics
are piecewise linear in the battery action u.

The piecewise structure is linearized exactly with split variables
(u = u_chg - u_dis, grid = p_imp - p_exp). This is exact if and only if
lambda_inj <= lambda_con and eta <= 1: under those conditions simultaneous
import/export or charge/discharge is never strictly profitable, so an
optimal vertex uses at most one side of each split. The builder refuses
tariffs violating the condition rather than silently solving a relaxation.

Per step t the LP has variables
    u_chg[t]  in [0, u_max]      battery charging power, kW
    u_dis[t]  in [0, -u_min]     battery discharging power, kW
    p_imp[t]  in [0, inf)        grid import power, kW
    p_exp[t]  in [0, inf)        grid export power, kW
    energy[t] in [0, e_max]      stored energy at the END of step t, kWh
and two equalities (power balance, battery dynamics): 5T variables, 2T rows.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .core import BatteryParams, QuarterSeries, Tariff, float_repr
from .simplex import OPTIMAL, LpSolution, solve_bounded_lp

DT_HOURS = 0.25

# Absolute tolerances, stated per check: kWh for dynamics/energy bounds,
# kW for power bounds, EUR for cost agreement.
DYNAMICS_TOL_KWH = 1e-9
POWER_TOL_KW = 1e-9
COST_TOL_EUR = 1e-9
COMPLEMENTARITY_TOL = 1e-9


class ExactnessError(ValueError):
    """Tariff violates lambda_inj <= lambda_con, so the LP would be a relaxation."""


class SolutionConsistencyError(RuntimeError):
    """LP answer disagrees with a direct recomputation; the linearization broke."""


class InstanceTooLargeError(ValueError):
    """Brute-force search would exceed its exponential budget."""


@dataclass(frozen=True, eq=False)
class DispatchProblem:
    """One finite-horizon battery dispatch instance.

    demand is household consumption in kW (>= 0), pv is generation stored
    as values <= 0, so grid power is simply demand + pv + u.
    """

    demand: QuarterSeries
    pv: QuarterSeries
    tariff: Tariff
    battery: BatteryParams
    dt_hours: float = DT_HOURS
    terminal_soc_at_least_initial: bool = False
    # explicit floor on the final stored energy; overrides the flag when set
    # (rolling re-solves use it to keep a day's terminal constraint fixed)
    terminal_energy_min: float | None = None

    def __post_init__(self):
        if self.demand.unit != "kW" or self.pv.unit != "kW":
            raise ValueError("demand and pv must be kW series")
        if np.any(self.demand.values < 0.0):
            raise ValueError("demand must be >= 0 everywhere")
        if np.any(self.pv.values > 0.0):
            raise ValueError("pv must be stored as values <= 0 (generation reduces grid draw)")
        self.demand.require_same_grid(self.pv, "demand/pv")
        self.demand.require_same_grid(self.tariff.lambda_con, "demand/tariff")
        if not 0.0 < self.dt_hours < 24.0:
            raise ValueError(f"dt_hours must be a positive step length, got {self.dt_hours}")
        if self.terminal_energy_min is not None and not (
            0.0 <= self.terminal_energy_min <= self.battery.e_max
        ):
            raise ValueError("terminal_energy_min must lie in [0, e_max]")

    def terminal_floor(self) -> float:
        if self.terminal_energy_min is not None:
            return self.terminal_energy_min
        return self.battery.e_init if self.terminal_soc_at_least_initial else 0.0

    @property
    def horizon(self) -> int:
        return len(self.demand)

    def net_load(self) -> np.ndarray:
        return self.demand.values + self.pv.values


@dataclass(frozen=True, eq=False)
class LinearProgram:
    """Dense equality-form LP with per-variable bounds."""

    cost: np.ndarray
    a_eq: np.ndarray
    b_eq: np.ndarray
    lower: np.ndarray
    upper: np.ndarray
    names: tuple[str, ...]

    def __post_init__(self):
        m, n = self.a_eq.shape
        if not (
            self.cost.shape == (n,)
            and self.b_eq.shape == (m,)
            and self.lower.shape == (n,)
            and self.upper.shape == (n,)
            and len(self.names) == n
        ):
            raise ValueError("inconsistent LP dimensions")
        for arr in (self.cost, self.a_eq, self.b_eq):
            if not np.all(np.isfinite(arr)):
                raise ValueError("LP cost/matrix/rhs must be finite")
        if np.any(self.lower > self.upper):
            raise ValueError("LP lower bound exceeds upper bound")

    @property
    def n_variables(self) -> int:
        return int(self.cost.size)

    @property
    def n_constraints(self) -> int:
        return int(self.b_eq.size)


@dataclass(frozen=True, eq=False)
class DispatchSolution:
    """Optimal schedule with both net and split views of the flows.

    energy has T+1 entries: the initial state followed by the state after
    each step. step_costs are the per-step costs recomputed from u via the
    piecewise tariff cases (not copied from the LP objective).
    """

    status: str
    u: np.ndarray
    grid_power: np.ndarray
    energy: np.ndarray
    cost: float
    step_costs: np.ndarray
    u_charge: np.ndarray
    u_discharge: np.ndarray
    p_import: np.ndarray
    p_export: np.ndarray


def build_lp(problem: DispatchProblem) -> LinearProgram:
    """Exact split-variable linearization of a dispatch problem."""
    bad = problem.tariff.injection_exceeds_consumption()
    if bad.size:
        t = int(bad[0])
        raise ExactnessError(
            f"lambda_inj > lambda_con at step {t} "
            f"({problem.tariff.lambda_inj.values[t]:.6g} > {problem.tariff.lambda_con.values[t]:.6g}); "
            "the split-variable LP would permit fictitious simultaneous import/export"
        )

    t_n = problem.horizon
    bat = problem.battery
    dt = problem.dt_hours
    net = problem.net_load()
    lam_con = problem.tariff.lambda_con.values
    lam_inj = problem.tariff.lambda_inj.values

    n = 5 * t_n
    m = 2 * t_n
    cost = np.zeros(n)
    a = np.zeros((m, n))
    b = np.zeros(m)
    lower = np.zeros(n)
    upper = np.empty(n)
    names: list[str] = []

    for t in range(t_n):
        base = 5 * t
        i_chg, i_dis, i_imp, i_exp, i_e = base, base + 1, base + 2, base + 3, base + 4
        names += [f"u_chg[{t}]", f"u_dis[{t}]", f"p_imp[{t}]", f"p_exp[{t}]", f"energy[{t}]"]

        upper[i_chg] = bat.u_max
        upper[i_dis] = -bat.u_min
        upper[i_imp] = np.inf
        upper[i_exp] = np.inf
        upper[i_e] = bat.e_max
        if t == t_n - 1:
            lower[i_e] = problem.terminal_floor()

        cost[i_imp] = lam_con[t] * dt
        cost[i_exp] = -lam_inj[t] * dt

        # power balance: p_imp - p_exp - u_chg + u_dis = demand + pv
        r = 2 * t
        a[r, i_imp] = 1.0
        a[r, i_exp] = -1.0
        a[r, i_chg] = -1.0
        a[r, i_dis] = 1.0
        b[r] = net[t]

        # battery dynamics: energy[t] - energy[t-1] - eta*dt*u_chg + dt/eta*u_dis = 0
        r = 2 * t + 1
        a[r, i_e] = 1.0
        a[r, i_chg] = -bat.eta * dt
        a[r, i_dis] = dt / bat.eta
        if t == 0:
            b[r] = bat.e_init
        else:
            a[r, base - 1] = -1.0  # energy[t-1]

    return LinearProgram(cost, a, b, lower, upper, tuple(names))


def solve_lp(lp: LinearProgram, max_iterations: int | None = None) -> LpSolution:
    """Solve a LinearProgram with the bounded-variable simplex."""
    return solve_bounded_lp(lp.cost, lp.a_eq, lp.b_eq, lp.lower, lp.upper, max_iterations)


def dispatch_step_costs(problem: DispatchProblem, u: np.ndarray) -> np.ndarray:
    """Per-step cost of action sequence u under the piecewise tariff cases."""
    grid = problem.net_load() + u
    lam_con = problem.tariff.lambda_con.values
    lam_inj = problem.tariff.lambda_inj.values
    return np.where(grid >= 0.0, lam_con * grid, lam_inj * grid) * problem.dt_hours


def battery_trajectory(problem: DispatchProblem, u: np.ndarray) -> np.ndarray:
    """Stored energy over time under exact charge/discharge dynamics."""
    bat = problem.battery
    dt = problem.dt_hours
    flow = np.where(u >= 0.0, bat.eta * u * dt, u * dt / bat.eta)
    return np.concatenate([[bat.e_init], bat.e_init + np.cumsum(flow)])


def extract_dispatch(problem: DispatchProblem, lp_solution: LpSolution) -> DispatchSolution:
    """Turn an optimal LP solution into a verified dispatch schedule."""
    if lp_solution.status != OPTIMAL:
        raise ValueError(f"cannot extract a dispatch from a {lp_solution.status} LP solution")
    x = lp_solution.x.reshape(problem.horizon, 5)
    u_chg, u_dis, p_imp, p_exp, energy_tail = (x[:, k].copy() for k in range(5))
    u = u_chg - u_dis
    grid = p_imp - p_exp
    energy = np.concatenate([[problem.battery.e_init], energy_tail])
    step_costs = dispatch_step_costs(problem, u)
    cost = float(np.sum(step_costs))
    if abs(cost - lp_solution.objective) > COST_TOL_EUR:
        raise SolutionConsistencyError(
            f"direct cost recomputation {cost:.12f} EUR disagrees with the LP objective "
            f"{lp_solution.objective:.12f} EUR beyond {COST_TOL_EUR:g}; linearization broken"
        )
    return DispatchSolution(
        status=OPTIMAL,
        u=u,
        grid_power=grid,
        energy=energy,
        cost=cost,
        step_costs=step_costs,
        u_charge=u_chg,
        u_discharge=u_dis,
        p_import=p_imp,
        p_export=p_exp,
    )


def solve_dispatch(problem: DispatchProblem) -> DispatchSolution:
    """build_lp + solve_lp + extract_dispatch in one call."""
    lp = build_lp(problem)
    sol = solve_lp(lp)
    if sol.status != OPTIMAL:
        raise SolutionConsistencyError(
            f"dispatch LP reported {sol.status}, but u = 0 is always feasible"
        )
    return extract_dispatch(problem, sol)


# --- brute-force oracle -------------------------------------------------------


def brute_force_dispatch(
    problem: DispatchProblem,
    action_grid_resolution: float,
    state_cell_kwh: float | None = None,
    max_frontier: int = 20_000_000,
) -> float:
    """Minimal cost over discretized action sequences; upper-bounds the optimum.

    Exhaustively expands all action sequences on the grid
    {k * resolution} intersected with [u_min, u_max], applying the exact
    dynamics and piecewise costs, layer by layer over the horizon. Two
    prunes keep the search tractable without giving up the bound:

    * exact dominance: a prefix with strictly more stored energy and lower
      cost dominates (with nonnegative prices, extra energy never hurts);
    * per-cell thinning: among prefixes whose energies fall into the same
      cell of width `state_cell_kwh`, only the cheapest is kept. This can
      discard a prefix whose extra energy (< one cell) would have been
      useful, so it relaxes the bound by at most
      horizon * state_cell_kwh * max(lambda_con) / eta EUR, which is
      negligible for the default cell size of e_max / 2e5.

    Costs and energies of kept prefixes are exact; only optimality over the
    grid is approximate in the per-cell sense above.
    """
    if problem.horizon > 8:
        raise InstanceTooLargeError(
            f"exhaustive search limited to horizons <= 8, got {problem.horizon}"
        )
    if not action_grid_resolution > 0.0:
        raise ValueError("action_grid_resolution must be > 0")
    bat = problem.battery
    dt = problem.dt_hours
    if state_cell_kwh is None:
        state_cell_kwh = max(bat.e_max, 1e-6) / 200_000.0

    kmin = math.ceil(bat.u_min / action_grid_resolution - 1e-12)
    kmax = math.floor(bat.u_max / action_grid_resolution + 1e-12)
    actions = np.arange(kmin, kmax + 1, dtype=np.float64) * action_grid_resolution
    d_energy = np.where(actions >= 0.0, bat.eta * actions * dt, actions * dt / bat.eta)

    net = problem.net_load()
    lam_con = problem.tariff.lambda_con.values
    lam_inj = problem.tariff.lambda_inj.values

    energies = np.array([bat.e_init])
    costs = np.array([0.0])
    for t in range(problem.horizon):
        if energies.size * actions.size > max_frontier:
            raise InstanceTooLargeError(
                f"search frontier would exceed {max_frontier} states at step {t}"
            )
        grid = net[t] + actions
        step_cost = np.where(grid >= 0.0, lam_con[t] * grid, lam_inj[t] * grid) * dt

        new_e = (energies[:, None] + d_energy[None, :]).ravel()
        new_c = (costs[:, None] + step_cost[None, :]).ravel()
        ok = (new_e >= -1e-12) & (new_e <= bat.e_max + 1e-12)
        new_e = new_e[ok]
        new_c = new_c[ok]
        if new_e.size == 0:  # pragma: no cover - u = 0 is always feasible
            raise SolutionConsistencyError("brute force lost all feasible prefixes")

        # keep the cheapest prefix per energy cell ...
        cells = np.floor(new_e / state_cell_kwh).astype(np.int64)
        order = np.lexsort((new_c, cells))
        cells, new_e, new_c = cells[order], new_e[order], new_c[order]
        first = np.ones(cells.size, dtype=bool)
        first[1:] = cells[1:] != cells[:-1]
        new_e, new_c = new_e[first], new_c[first]
        # ... then drop cells dominated by a strictly higher-energy, cheaper one
        rev_min = np.minimum.accumulate(new_c[::-1])[::-1]
        keep = np.ones(new_c.size, dtype=bool)
        keep[:-1] = new_c[:-1] < rev_min[1:]
        energies, costs = new_e[keep], new_c[keep]

    return float(np.min(costs))


# --- verifier -----------------------------------------------------------------


@dataclass(frozen=True)
class CheckResult:
    name: str
    passed: bool
    step: int | None = None
    magnitude: float = 0.0
    message: str = ""


@dataclass(frozen=True)
class VerificationReport:
    passed: bool
    checks: tuple[CheckResult, ...]

    def failures(self) -> list[CheckResult]:
        return [c for c in self.checks if not c.passed]


def verify_solution(problem: DispatchProblem, solution: DispatchSolution) -> VerificationReport:
    """Independently re-check dynamics, bounds, complementarity and cost."""
    if solution.status != OPTIMAL:
        raise ValueError("can only verify optimal solutions")
    bat = problem.battery
    dt = problem.dt_hours
    checks: list[CheckResult] = []

    def record(name, violation, step, tol, msg):
        checks.append(
            CheckResult(
                name=name,
                passed=violation <= tol,
                step=step,
                magnitude=float(violation),
                message=msg if violation > tol else "",
            )
        )

    # (a) dynamics and bounds
    flow = np.where(solution.u >= 0.0, bat.eta * solution.u * dt, solution.u * dt / bat.eta)
    dyn = np.abs(solution.energy[1:] - solution.energy[:-1] - flow)
    step = int(np.argmax(dyn))
    record("dynamics", float(dyn[step]), step, DYNAMICS_TOL_KWH, "battery dynamics residual (kWh)")

    e_lo = float(np.max(-solution.energy, initial=0.0))
    e_hi = float(np.max(solution.energy - bat.e_max, initial=0.0))
    record("energy_bounds", max(e_lo, e_hi), int(np.argmax(np.maximum(-solution.energy, solution.energy - bat.e_max))), DYNAMICS_TOL_KWH, "energy outside [0, e_max] (kWh)")

    u_lo = float(np.max(bat.u_min - solution.u, initial=0.0))
    u_hi = float(np.max(solution.u - bat.u_max, initial=0.0))
    record("power_bounds", max(u_lo, u_hi), int(np.argmax(np.maximum(bat.u_min - solution.u, solution.u - bat.u_max))), POWER_TOL_KW, "u outside [u_min, u_max] (kW)")

    balance = np.abs(solution.grid_power - (problem.net_load() + solution.u))
    step = int(np.argmax(balance))
    record("power_balance", float(balance[step]), step, POWER_TOL_KW, "grid power balance residual (kW)")

    # (b) complementarity, skipped at price ties (cost-neutral there) and
    # for the charge/discharge split when eta == 1 (lossless ties possible)
    strict = problem.tariff.lambda_inj.values < problem.tariff.lambda_con.values - 1e-15
    imp_exp = np.where(strict, solution.p_import * solution.p_export, 0.0)
    step = int(np.argmax(imp_exp))
    record("import_export_complementarity", float(imp_exp[step]), step, COMPLEMENTARITY_TOL, "simultaneous import and export (kW^2)")

    if bat.eta < 1.0:
        chg_dis = np.where(strict, solution.u_charge * solution.u_discharge, 0.0)
        step = int(np.argmax(chg_dis))
        record("charge_discharge_complementarity", float(chg_dis[step]), step, COMPLEMENTARITY_TOL, "simultaneous charge and discharge (kW^2)")

    # (c) cost recomputation
    recomputed = dispatch_step_costs(problem, solution.u)
    diff = abs(float(np.sum(recomputed)) - solution.cost)
    record("cost_recomputation", diff, None, COST_TOL_EUR, "cost recomputation mismatch (EUR)")

    return VerificationReport(passed=all(c.passed for c in checks), checks=tuple(checks))


# --- CSV bundles ----------------------------------------------------------------


def write_problem_csv(path, problem: DispatchProblem):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("t,demand_kw,pv_kw,lambda_con,lambda_inj\n")
        for t in range(problem.horizon):
            fields = (
                problem.demand.values[t],
                problem.pv.values[t],
                problem.tariff.lambda_con.values[t],
                problem.tariff.lambda_inj.values[t],
            )
            fh.write(f"{t}," + ",".join(float_repr(v) for v in fields) + "\n")


def read_problem_csv(path, start, battery: BatteryParams, dt_hours: float = DT_HOURS) -> DispatchProblem:
    demand, pv, con, inj = [], [], [], []
    with open(path, encoding="utf-8") as fh:
        header = fh.readline().strip()
        if header != "t,demand_kw,pv_kw,lambda_con,lambda_inj":
            raise ValueError(f"unexpected dispatch problem header: {header!r}")
        for line_no, line in enumerate(fh, start=2):
            line = line.strip()
            if not line:
                continue
            parts = line.split(",")
            if len(parts) != 5:
                raise ValueError(f"row {line_no}: expected 5 fields, got {len(parts)}")
            demand.append(float(parts[1]))
            pv.append(float(parts[2]))
            con.append(float(parts[3]))
            inj.append(float(parts[4]))
    tariff = Tariff(
        QuarterSeries(start, con, "EUR_per_kWh"),
        QuarterSeries(start, inj, "EUR_per_kWh"),
    )
    return DispatchProblem(
        demand=QuarterSeries(start, demand, "kW"),
        pv=QuarterSeries(start, pv, "kW"),
        tariff=tariff,
        battery=battery,
        dt_hours=dt_hours,
    )


def write_solution_csv(path, solution: DispatchSolution):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("t,u_kw,grid_kw,energy_kwh,cost_eur\n")
        for t in range(solution.u.size):
            fields = (solution.u[t], solution.grid_power[t], solution.energy[t + 1], solution.step_costs[t])
            fh.write(f"{t}," + ",".join(float_repr(v) for v in fields) + "\n")
