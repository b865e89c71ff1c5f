"""Dense bounded-variable primal simplex with Bland's anti-cycling rule.

Solves   min c.x   s.t.   A x = b,   lower <= x <= upper
with per-variable bounds handled natively (nonbasic variables rest at a
finite bound; entering variables may "bound flip" without a basis change).
Two phases: phase 1 minimizes the sum of artificial variables to find a
basic feasible solution, phase 2 optimizes the real objective.

Dense algebra throughout; the basis inverse is maintained by product-form
updates with periodic refactorization. Problem sizes in this toolkit stay
below ~500 variables, where dense is entirely adequate.

Tolerances (absolute, in the units of the respective quantity):
  feasibility (constraint residuals, bound violations): 1e-9
  optimality / pivot eligibility (reduced costs):       1e-10
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

FEASIBILITY_TOL = 1e-9
PIVOT_TOL = 1e-10
_RATIO_TOL = 1e-11
_REFRESH_EVERY = 64

_AT_LOWER = 0
_AT_UPPER = 1
_BASIC = 2

OPTIMAL = "optimal"
INFEASIBLE = "infeasible"
UNBOUNDED = "unbounded"


class SimplexError(RuntimeError):
    """Solver failure that must never be reported as an answer."""


class SimplexIterationError(SimplexError):
    """Iteration cap exceeded before reaching a verdict."""


@dataclass(frozen=True)
class LpSolution:
    status: str
    x: np.ndarray | None
    objective: float | None
    iterations: int


def solve_bounded_lp(
    cost,
    a_eq,
    b_eq,
    lower,
    upper,
    max_iterations: int | None = None,
) -> LpSolution:
    """Solve min cost.x s.t. a_eq x = b_eq, lower <= x <= upper.

    Bounds may be +/-inf but every variable needs at least one finite bound.
    Returns an LpSolution with status optimal/infeasible/unbounded; an
    "optimal" answer is re-verified against the constraints before return.
    """
    c = np.asarray(cost, dtype=np.float64).copy()
    a = np.asarray(a_eq, dtype=np.float64).copy()
    b = np.asarray(b_eq, dtype=np.float64).copy()
    lo = np.asarray(lower, dtype=np.float64).copy()
    hi = np.asarray(upper, dtype=np.float64).copy()
    if a.ndim != 2:
        raise ValueError("a_eq must be a 2-D matrix")
    m, n = a.shape
    if c.shape != (n,) or lo.shape != (n,) or hi.shape != (n,) or b.shape != (m,):
        raise ValueError("inconsistent LP dimensions")
    if not (np.all(np.isfinite(c)) and np.all(np.isfinite(a)) and np.all(np.isfinite(b))):
        raise ValueError("cost, matrix and rhs must be finite")
    if np.any(lo > hi):
        raise ValueError("lower bound exceeds upper bound")
    if np.any(np.isinf(lo) & np.isinf(hi)):
        raise ValueError("free variables (both bounds infinite) are not supported")
    if m == 0:
        return _solve_box_only(c, lo, hi)
    if max_iterations is None:
        max_iterations = max(2000, 50 * (n + m))

    # Start every structural variable at a finite bound.
    vstat = np.where(np.isfinite(lo), _AT_LOWER, _AT_UPPER).astype(np.int8)
    x = np.where(vstat == _AT_LOWER, lo, hi)

    # Artificial columns carry the initial residual with a +1/-1 sign so the
    # starting artificial values are nonnegative.
    resid = b - a @ x
    sign = np.where(resid < 0.0, -1.0, 1.0)
    a_full = np.hstack([a, np.diag(sign)])
    lo_full = np.concatenate([lo, np.zeros(m)])
    hi_full = np.concatenate([hi, np.full(m, np.inf)])
    x_full = np.concatenate([x, np.abs(resid)])
    vstat_full = np.concatenate([vstat, np.full(m, _BASIC, dtype=np.int8)])
    basis = np.arange(n, n + m, dtype=np.int64)
    blocked = np.zeros(n + m, dtype=bool)

    c_phase1 = np.concatenate([np.zeros(n), np.ones(m)])
    st = _State(a_full, b, lo_full, hi_full, basis, vstat_full, x_full, blocked)
    status, it1 = _simplex_loop(st, c_phase1, max_iterations, phase=1)
    if status != OPTIMAL:  # pragma: no cover - phase 1 objective is bounded below
        raise SimplexError(f"phase 1 ended with unexpected status {status}")
    art_sum = float(np.sum(st.x[n:]))
    if art_sum > 1e-7 * max(1.0, float(np.max(np.abs(b)))):
        return LpSolution(INFEASIBLE, None, None, it1)

    _drive_out_artificials(st, n)
    st.blocked[n:] = True
    lo_full[n:] = 0.0
    hi_full[n:] = 0.0

    c_phase2 = np.concatenate([c, np.zeros(m)])
    status, it2 = _simplex_loop(st, c_phase2, max_iterations, phase=2)
    if status == UNBOUNDED:
        return LpSolution(UNBOUNDED, None, None, it1 + it2)

    xs = st.x[:n].copy()
    _verify_primal(a, b, lo, hi, xs)
    return LpSolution(OPTIMAL, xs, float(c @ xs), it1 + it2)


def _solve_box_only(c, lo, hi) -> LpSolution:
    # No equality rows: minimize each coordinate independently over its box.
    finite_pref = np.where(np.isfinite(lo), lo, hi)
    x = np.where(c > 0.0, lo, np.where(c < 0.0, hi, finite_pref))
    if np.any(np.isinf(x)):
        return LpSolution(UNBOUNDED, None, None, 0)
    return LpSolution(OPTIMAL, x, float(c @ x), 0)


class _State:
    __slots__ = ("a", "b", "lo", "hi", "basis", "vstat", "x", "blocked", "binv")

    def __init__(self, a, b, lo, hi, basis, vstat, x, blocked):
        self.a = a
        self.b = b
        self.lo = lo
        self.hi = hi
        self.basis = basis
        self.vstat = vstat
        self.x = x
        self.blocked = blocked
        self.binv = np.linalg.inv(a[:, basis])

    def refactorize(self):
        self.binv = np.linalg.inv(self.a[:, self.basis])
        nonbasic = np.ones(self.a.shape[1], dtype=bool)
        nonbasic[self.basis] = False
        rhs = self.b - self.a[:, nonbasic] @ self.x[nonbasic]
        self.x[self.basis] = self.binv @ rhs


def _simplex_loop(st: _State, c, max_iterations, phase) -> tuple[str, int]:
    it = 0
    while True:
        it += 1
        if it > max_iterations:
            raise SimplexIterationError(
                f"simplex exceeded {max_iterations} iterations in phase {phase}"
            )
        if it % _REFRESH_EVERY == 0:
            st.refactorize()

        y = c[st.basis] @ st.binv
        d = c - y @ st.a

        eligible = (
            ((st.vstat == _AT_LOWER) & (d < -PIVOT_TOL))
            | ((st.vstat == _AT_UPPER) & (d > PIVOT_TOL))
        ) & ~st.blocked
        if not eligible.any():
            return OPTIMAL, it
        j = int(np.argmax(eligible))  # smallest eligible index: Bland's rule
        sigma = 1.0 if st.vstat[j] == _AT_LOWER else -1.0

        w = st.binv @ st.a[:, j]
        delta = -sigma * w  # change of basic values per unit move of x_j

        # Ratio test: the entering variable's own range plus each basic's
        # slack to the bound it is pushed toward.
        t_flip = st.hi[j] - st.lo[j]
        ratios = np.full(delta.shape, np.inf)
        xb = st.x[st.basis]
        up = delta > _RATIO_TOL
        dn = delta < -_RATIO_TOL
        hi_b = st.hi[st.basis]
        lo_b = st.lo[st.basis]
        with np.errstate(invalid="ignore"):
            ratios[up] = (hi_b[up] - xb[up]) / delta[up]
            ratios[dn] = (lo_b[dn] - xb[dn]) / delta[dn]
        ratios = np.maximum(ratios, 0.0)  # clip tiny negatives from drift

        t_star = min(float(np.min(ratios)) if ratios.size else np.inf, t_flip)
        if not np.isfinite(t_star):
            return UNBOUNDED, it

        tie = 1e-9 * (1.0 + abs(t_star))
        flip_candidate = t_flip <= t_star + tie
        rows = np.flatnonzero(ratios <= t_star + tie)

        leave_row = -1
        if rows.size:
            # Among tied blockers drop numerically hopeless pivots, then take
            # the smallest variable index (Bland tie-break).
            piv = np.abs(delta[rows])
            thresh = max(1e-7, 0.01 * float(np.max(piv)))
            keep = piv >= thresh
            cand = rows[keep] if keep.any() else rows
            leave_row = int(cand[np.argmin(st.basis[cand])])

        choose_flip = flip_candidate and (
            leave_row < 0 or j < st.basis[leave_row] or t_flip < ratios[leave_row] - tie
        )

        if choose_flip:
            st.x[st.basis] += delta * t_flip
            st.x[j] = st.hi[j] if sigma > 0 else st.lo[j]
            st.vstat[j] = _AT_UPPER if sigma > 0 else _AT_LOWER
            continue

        if leave_row < 0:  # pragma: no cover - t_star finite implies a blocker
            return UNBOUNDED, it

        t_use = float(ratios[leave_row])
        st.x[st.basis] += delta * t_use
        st.x[j] += sigma * t_use

        leaving = int(st.basis[leave_row])
        if delta[leave_row] > 0.0:
            st.x[leaving] = st.hi[leaving]
            st.vstat[leaving] = _AT_UPPER
        else:
            st.x[leaving] = st.lo[leaving]
            st.vstat[leaving] = _AT_LOWER

        st.basis[leave_row] = j
        st.vstat[j] = _BASIC
        _update_binv(st.binv, w, leave_row)


def _update_binv(binv, w, r):
    # Product-form update after replacing basis column r (w = Binv @ A_j).
    piv = w[r]
    if abs(piv) < 1e-12:  # pragma: no cover - guarded by the ratio-test filter
        raise SimplexError("pivot element vanished; basis update impossible")
    binv[r, :] /= piv
    others = np.arange(binv.shape[0]) != r
    binv[others, :] -= np.outer(w[others], binv[r, :])


def _drive_out_artificials(st: _State, n: int):
    """Pivot zero-valued artificial variables out of the basis when possible.

    Rows where no structural pivot exists are linearly dependent; their
    artificial stays basic at value 0 with bounds locked to [0, 0].
    """
    for r in range(len(st.basis)):
        if st.basis[r] < n:
            continue
        row = st.binv[r, :] @ st.a[:, :n]
        candidates = np.flatnonzero((np.abs(row) > 1e-7) & (st.vstat[:n] != _BASIC))
        if candidates.size == 0:
            continue
        j = int(candidates[0])
        w = st.binv @ st.a[:, j]
        leaving = int(st.basis[r])
        st.basis[r] = j
        st.vstat[j] = _BASIC
        st.vstat[leaving] = _AT_LOWER
        st.x[leaving] = 0.0
        _update_binv(st.binv, w, r)
    st.refactorize()


def _verify_primal(a, b, lo, hi, x):
    resid = float(np.max(np.abs(a @ x - b))) if a.size else 0.0
    below = float(np.max(lo - x, initial=0.0))
    above = float(np.max(x - hi, initial=0.0))
    worst = max(resid, below, above)
    if worst > FEASIBILITY_TOL * max(1.0, float(np.max(np.abs(b), initial=1.0))):
        raise SimplexError(
            f"claimed optimum violates constraints by {worst:.3e} (> {FEASIBILITY_TOL:g})"
        )
