"""Bounded-variable primal simplex on dense arrays.

Constraints are brought to equality form with one slack per row; the slack
basis starts the solve and a composite phase-1 objective drives out bound
violations.  The basis inverse is kept dense and updated per pivot
(product form), with periodic refactorization.  Dantzig pricing switches to
Bland's rule after a run of degenerate pivots.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass

import numpy as np

from .milp import EQ, GE, INF, LE, MilpModel

AT_LB, AT_UB, BASIC, NB_FREE = 0, 1, 2, 3

PIVOT_TOL = 1e-10
DEGEN_TOL = 1e-11
BLAND_TRIGGER = 1000  # consecutive degenerate pivots before Bland's rule
REFACTOR_EVERY = 150


class NumericalError(RuntimeError):
    """Simplex could not complete (iteration limit or singular basis)."""


@dataclass
class StdForm:
    """Equality-form LP data: min c.x, A x + s = b, bounds on [x; s]."""

    a: np.ndarray          # m x n structural coefficients (dense)
    b: np.ndarray
    c: np.ndarray          # length n + m, slack costs are zero
    lb: np.ndarray         # length n + m
    ub: np.ndarray
    n: int
    m: int
    maximize: bool
    obj_const: float

    @property
    def n_total(self) -> int:
        return self.n + self.m


@dataclass
class LpResult:
    status: str            # optimal | infeasible | unbounded
    x: np.ndarray | None   # length n + m (structural + slack)
    obj: float             # minimized objective, without constant/sense fixup
    statuses: np.ndarray | None
    basis: np.ndarray | None
    iterations: int
    binv: np.ndarray | None = None   # final basis inverse (for reuse)
    binv_age: int = 0                # pivots since the last true factorization


def standardize(model: MilpModel) -> StdForm:
    n = model.n_vars
    m = model.n_constrs
    a = np.zeros((m, n))
    b = np.empty(m)
    lb = np.empty(n + m)
    ub = np.empty(n + m)
    lb[:n] = model.lb
    ub[:n] = model.ub
    for i, con in enumerate(model.constraints):
        for j, coef in con.coeffs.items():
            a[i, j] += coef
        b[i] = con.rhs
        if con.sense == LE:
            lb[n + i], ub[n + i] = 0.0, INF
        elif con.sense == GE:
            lb[n + i], ub[n + i] = -INF, 0.0
        else:
            lb[n + i], ub[n + i] = 0.0, 0.0
    c = np.zeros(n + m)
    maximize = model.obj_sense == "max"
    for j, coef in model.obj_coeffs.items():
        c[j] = -coef if maximize else coef
    return StdForm(a, b, c, lb, ub, n, m, maximize, model.obj_const)


class _Simplex:
    def __init__(self, std: StdForm, lb: np.ndarray, ub: np.ndarray,
                 start: tuple[np.ndarray, np.ndarray] | None, max_iter: int,
                 binv0: np.ndarray | None = None, binv_age: int = 0):
        self.a = std.a
        self.a_cols = np.asfortranarray(std.a)  # fast column access
        self.b = std.b
        self.c = std.c
        self.lb = lb
        self.ub = ub
        self.n = std.n
        self.m = std.m
        self.nt = std.n + std.m
        self.max_iter = max_iter
        self.iters = 0
        self.degen_run = 0
        self.bland = False
        self.binv_age = 0
        self.verified = False
        c_scale = float(np.max(np.abs(self.c))) if self.nt else 0.0
        a_scale = float(np.max(np.abs(self.a))) if self.a.size else 0.0
        self.tol_d2 = 1e-9 * (1.0 + c_scale)          # phase-2 pricing
        self.tol_d1 = 1e-9 * (1.0 + a_scale)          # phase-1 pricing
        self._init_basis(start, binv0, binv_age)

    # -- setup ---------------------------------------------------------

    def _default_status(self, j: int) -> int:
        if self.lb[j] == -INF and self.ub[j] == INF:
            return NB_FREE
        if self.lb[j] != -INF:
            return AT_LB
        return AT_UB

    def _init_basis(self, start, binv0=None, binv_age: int = 0) -> None:
        m, n = self.m, self.n
        if start is not None:
            statuses = np.array(start[0], dtype=np.int8, copy=True)
            basis = np.array(start[1], dtype=np.int64, copy=True)
            ok = (statuses.shape == (self.nt,) and basis.shape == (m,)
                  and len(set(basis.tolist())) == m)
            if ok:
                # bound overrides may orphan a stored status; repair them
                for j in np.flatnonzero(statuses != BASIC):
                    statuses[j] = self._repair_status(int(j), int(statuses[j]))
                self.statuses = statuses
                self.basis = basis
                if binv0 is not None and binv0.shape == (m, m) and binv_age < REFACTOR_EVERY:
                    # bounds-only changes keep the basis matrix identical,
                    # so the parent's inverse can be reused directly
                    self.binv = binv0.copy()
                    self.binv_age = binv_age
                    self._recompute_xb()
                    return
                if self._refactor(strict=False):
                    return
        self.statuses = np.array([self._default_status(j) for j in range(self.nt)],
                                 dtype=np.int8)
        self.basis = np.arange(n, n + m, dtype=np.int64)
        self.statuses[n:] = BASIC
        self.binv = np.eye(m)
        self._recompute_xb()

    def _repair_status(self, j: int, st: int) -> int:
        if st == AT_LB and self.lb[j] == -INF:
            return AT_UB if self.ub[j] != INF else NB_FREE
        if st == AT_UB and self.ub[j] == INF:
            return AT_LB if self.lb[j] != -INF else NB_FREE
        if st == NB_FREE and (self.lb[j] != -INF or self.ub[j] != INF):
            return AT_LB if self.lb[j] != -INF else AT_UB
        return st

    def _nonbasic_values(self) -> np.ndarray:
        x = np.zeros(self.nt)
        at_lb = self.statuses == AT_LB
        at_ub = self.statuses == AT_UB
        x[at_lb] = self.lb[at_lb]
        x[at_ub] = self.ub[at_ub]
        return x

    def _refactor(self, strict: bool = True) -> bool:
        bmat = np.zeros((self.m, self.m))
        struct = self.basis < self.n
        if struct.any():
            bmat[:, struct] = self.a[:, self.basis[struct]]
        for pos in np.flatnonzero(~struct):
            bmat[self.basis[pos] - self.n, pos] = 1.0
        try:
            self.binv = np.linalg.inv(bmat)
        except np.linalg.LinAlgError:
            if strict:
                raise NumericalError("singular working basis")
            return False
        if not np.isfinite(self.binv).all():
            if strict:
                raise NumericalError("singular working basis")
            return False
        self._recompute_xb()
        self.binv_age = 0
        return True

    def _recompute_xb(self) -> None:
        xn = self._nonbasic_values()
        r = self.b - self.a @ xn[:self.n] - xn[self.n:]
        self.xb = self.binv @ r

    # -- pivoting ------------------------------------------------------

    def _column(self, j: int) -> np.ndarray:
        if j < self.n:
            return self.binv @ self.a_cols[:, j]
        return self.binv[:, j - self.n].copy()

    def _price(self, phase1: bool, sigma: np.ndarray) -> np.ndarray:
        cb = sigma if phase1 else self.c[self.basis]
        y = cb @ self.binv
        d = np.empty(self.nt)
        if phase1:
            d[:self.n] = -(y @ self.a)
            d[self.n:] = -y
        else:
            d[:self.n] = self.c[:self.n] - y @ self.a
            d[self.n:] = self.c[self.n:] - y
        return d

    def _entering(self, d: np.ndarray, tol: float) -> int:
        fixed = self.ub - self.lb <= 1e-14
        cand = ((self.statuses == AT_LB) & ~fixed & (d < -tol)) \
            | ((self.statuses == AT_UB) & ~fixed & (d > tol)) \
            | ((self.statuses == NB_FREE) & (np.abs(d) > tol))
        if not cand.any():
            return -1
        idx = np.flatnonzero(cand)
        if self.bland:
            return int(idx[0])
        return int(idx[int(np.argmax(np.abs(d[idx])))])

    def _basic_bound_tols(self, lo: np.ndarray, hi: np.ndarray):
        tol_lo = 1e-9 * (1.0 + np.where(np.isfinite(lo), np.abs(lo), 0.0))
        tol_hi = 1e-9 * (1.0 + np.where(np.isfinite(hi), np.abs(hi), 0.0))
        return lo - tol_lo, hi + tol_hi

    def solve(self) -> LpResult:
        while True:
            if self.iters >= self.max_iter:
                raise NumericalError(f"simplex iteration limit {self.max_iter} reached")
            lo = self.lb[self.basis]
            hi = self.ub[self.basis]
            lo_t, hi_t = self._basic_bound_tols(lo, hi)
            below = self.xb < lo_t
            above = self.xb > hi_t
            phase1 = bool(below.any() or above.any())
            sigma = np.zeros(self.m)
            if phase1:
                sigma[below] = -1.0
                sigma[above] = 1.0
            d = self._price(phase1, sigma)
            j = self._entering(d, self.tol_d1 if phase1 else self.tol_d2)
            if j < 0:
                if not self.verified and self.binv_age >= 40:
                    # confirm at a freshly factorized basis before concluding
                    self._refactor()
                    self.verified = True
                    continue
                return self._finish("infeasible" if phase1 else "optimal")
            self.verified = False
            self.iters += 1
            sigma_e = 1.0 if (self.statuses[j] == AT_LB
                              or (self.statuses[j] == NB_FREE and d[j] < 0)) else -1.0
            w = self._column(j)
            t, leave_pos, leave_to = self._ratio_test(j, sigma_e, w, phase1,
                                                      lo, hi, below, above)
            if t is None:
                if phase1:
                    raise NumericalError("phase-1 ray without blocking bound")
                return self._finish("unbounded")
            if t <= DEGEN_TOL:
                self.degen_run += 1
                if self.degen_run >= BLAND_TRIGGER:
                    self.bland = True
            else:
                self.degen_run = 0
            self._apply_step(j, sigma_e, w, t, leave_pos, leave_to)

    def _ratio_test(self, j: int, sigma_e: float, w: np.ndarray, phase1: bool,
                    lo: np.ndarray, hi: np.ndarray,
                    below: np.ndarray, above: np.ndarray):
        rate = -sigma_e * w
        up = rate > PIVOT_TOL
        dn = rate < -PIVOT_TOL
        # target bound ahead of each moving basic variable; infeasible
        # variables moving away from their violated bound have none
        target = np.full(self.m, np.nan)
        if phase1:
            np.copyto(target, lo, where=up & below)
            np.copyto(target, hi, where=up & ~below & ~above)
            np.copyto(target, hi, where=dn & above)
            np.copyto(target, lo, where=dn & ~below & ~above)
        else:
            np.copyto(target, hi, where=up)
            np.copyto(target, lo, where=dn)
        blockable = (up | dn) & np.isfinite(target)
        t_enter = INF
        if self.lb[j] != -INF and self.ub[j] != INF:
            t_enter = self.ub[j] - self.lb[j]
        if not blockable.any():
            if t_enter == INF:
                return None, -1, AT_LB
            return t_enter, -1, AT_LB
        ratios = np.full(self.m, INF)
        ratios[blockable] = np.maximum(
            (target[blockable] - self.xb[blockable]) / rate[blockable], 0.0)
        t_best = float(ratios.min())
        if t_enter <= t_best:
            return t_enter, -1, AT_LB
        cand = np.flatnonzero(ratios <= t_best + 1e-12)
        pos = int(cand[int(np.argmax(np.abs(w[cand])))])
        leave_to = AT_LB
        if rate[pos] > 0:
            leave_to = AT_LB if (phase1 and below[pos]) else AT_UB
        else:
            leave_to = AT_UB if (phase1 and above[pos]) else AT_LB
        return float(ratios[pos]), pos, leave_to

    def _apply_step(self, j: int, sigma_e: float, w: np.ndarray, t: float,
                    leave_pos: int, leave_to: int) -> None:
        if t > 0.0:
            self.xb -= sigma_e * t * w
        if leave_pos < 0:
            # bound flip of the entering variable, basis unchanged
            self.statuses[j] = AT_UB if self.statuses[j] == AT_LB else AT_LB
            return
        enter_from = self.statuses[j]
        if enter_from == AT_LB:
            x0 = self.lb[j]
        elif enter_from == AT_UB:
            x0 = self.ub[j]
        else:
            x0 = 0.0
        x_enter = x0 + sigma_e * t
        leaving = self.basis[leave_pos]
        self.statuses[leaving] = leave_to
        self.basis[leave_pos] = j
        self.statuses[j] = BASIC
        piv = w[leave_pos]
        if abs(piv) < PIVOT_TOL:
            self._refactor()
            return
        row = self.binv[leave_pos, :] / piv
        self.binv -= np.outer(w, row)
        self.binv[leave_pos, :] = row
        self.xb[leave_pos] = x_enter
        self.binv_age += 1
        if self.binv_age >= REFACTOR_EVERY:
            self._refactor()

    def _finish(self, status: str) -> LpResult:
        x = self._nonbasic_values()
        x[self.basis] = self.xb
        obj = float(self.c @ x)
        return LpResult(status, x, obj, self.statuses.copy(), self.basis.copy(),
                        self.iters, self.binv, self.binv_age)


def solve_std(std: StdForm, lb: np.ndarray | None = None, ub: np.ndarray | None = None,
              start: tuple[np.ndarray, np.ndarray] | None = None,
              max_iter: int | None = None, binv0: np.ndarray | None = None,
              binv_age: int = 0) -> LpResult:
    """Solve the standard-form LP; ``lb``/``ub`` override the stored bounds."""
    lb = std.lb if lb is None else lb
    ub = std.ub if ub is None else ub
    if max_iter is None:
        max_iter = 20000 + 60 * (std.m + std.n)
    return _Simplex(std, lb, ub, start, max_iter, binv0, binv_age).solve()


def lp_solve(model: MilpModel, max_iter: int | None = None, start: tuple | None = None):
    """Solve the LP relaxation of ``model`` with the primal simplex.

    Returns a :class:`carbonflow.milp.SolveResult`; integrality of binary
    variables is ignored here.
    """
    from .milp import SolveResult  # deferred to avoid import cycle at typing time

    t0 = time.perf_counter()
    std = standardize(model)
    res = solve_std(std, start=start, max_iter=max_iter)
    wall = time.perf_counter() - t0
    if res.status != "optimal":
        return SolveResult(res.status, None, math.nan, math.nan, 0, res.iterations, wall)
    obj = -res.obj + std.obj_const if std.maximize else res.obj + std.obj_const
    x = res.x[:std.n].copy()
    return SolveResult("optimal", x, obj, 0.0, 0, res.iterations, wall,
                       warm=(res.statuses, res.basis))
