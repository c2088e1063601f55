"""Solver-agnostic MILP representation, modeling helpers, and MPS export.

A :class:`MilpModel` is a plain container of named variables, linear
constraints, and one linear objective.  Solving lives in
:mod:`carbonflow.simplex` (LP) and :mod:`carbonflow.branchbound` (MILP).
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass, field

import numpy as np

INF = float("inf")

CONTINUOUS = "continuous"
BINARY = "binary"

LE = "<="
GE = ">="
EQ = "="

_SENSES = (LE, GE, EQ)

# Tolerances shared with the solvers: feasibility residuals are accepted up to
# FEAS_TOL * (1 + |rhs|), integrality up to INT_TOL.
FEAS_TOL = 1e-7
INT_TOL = 1e-6


class ModelError(ValueError):
    """Raised on malformed model input (bad bounds, unknown variables, ...)."""


@dataclass
class Constraint:
    coeffs: dict[int, float]
    sense: str
    rhs: float
    name: str


@dataclass
class SolveResult:
    """Outcome of an LP or MILP solve.

    ``status`` is one of ``optimal``, ``infeasible``, ``unbounded``,
    ``gap-limit``, ``node-limit``.  ``x`` holds primal values for the model's
    structural variables when an incumbent exists.  ``warm`` carries the root
    basis so structurally identical models can restart cheaply.
    """

    status: str
    x: np.ndarray | None = None
    objective: float = math.nan
    gap: float = math.nan
    nodes: int = 0
    iterations: int = 0
    wall_time: float = 0.0
    warm: tuple | None = None

    @property
    def is_optimal(self) -> bool:
        return self.status == "optimal"

    def value(self, idx: int) -> float:
        if self.x is None:
            raise ModelError("no primal solution available")
        return float(self.x[idx])


class MilpModel:
    def __init__(self, name: str = "model"):
        self.name = name
        self.var_names: list[str] = []
        self.lb: list[float] = []
        self.ub: list[float] = []
        self.kinds: list[str] = []
        self.constraints: list[Constraint] = []
        self.obj_coeffs: dict[int, float] = {}
        self.obj_sense = "min"
        self.obj_const = 0.0
        # binary -> companion continuous variable whose sign suggests the
        # preferred branching side (used for dive ordering only)
        self.branch_hints: dict[int, int] = {}

    # ------------------------------------------------------------------
    # construction
    # ------------------------------------------------------------------

    def add_var(self, name: str, lb: float = 0.0, ub: float = INF,
                kind: str = CONTINUOUS) -> int:
        if kind not in (CONTINUOUS, BINARY):
            raise ModelError(f"unknown variable kind {kind!r}")
        if kind == BINARY:
            if not (lb in (0, 0.0) and ub in (1, 1.0)):
                raise ModelError(f"binary variable {name!r} must have bounds [0, 1]")
        if math.isnan(lb) or math.isnan(ub) or lb > ub:
            raise ModelError(f"invalid bounds [{lb}, {ub}] for variable {name!r}")
        self.var_names.append(name)
        self.lb.append(float(lb))
        self.ub.append(float(ub))
        self.kinds.append(kind)
        return len(self.var_names) - 1

    def add_binary(self, name: str) -> int:
        return self.add_var(name, 0.0, 1.0, BINARY)

    def set_bounds(self, idx: int, lb: float, ub: float) -> None:
        self._check_var(idx)
        if math.isnan(lb) or math.isnan(ub) or lb > ub:
            raise ModelError(f"invalid bounds [{lb}, {ub}] for variable index {idx}")
        self.lb[idx] = float(lb)
        self.ub[idx] = float(ub)

    def add_constr(self, coeffs, sense: str, rhs: float, name: str | None = None) -> int:
        if sense not in _SENSES:
            raise ModelError(f"unknown constraint sense {sense!r}")
        if not math.isfinite(rhs):
            raise ModelError(f"constraint rhs must be finite, got {rhs}")
        merged: dict[int, float] = {}
        items = coeffs.items() if isinstance(coeffs, dict) else coeffs
        for idx, val in items:
            self._check_var(idx)
            if not math.isfinite(val):
                raise ModelError(f"non-finite coefficient on variable {self.var_names[idx]!r}")
            if val != 0.0:
                merged[idx] = merged.get(idx, 0.0) + float(val)
        if name is None:
            name = f"c{len(self.constraints)}"
        self.constraints.append(Constraint(merged, sense, float(rhs), name))
        return len(self.constraints) - 1

    def set_objective(self, coeffs, sense: str = "min", constant: float = 0.0) -> None:
        if sense not in ("min", "max"):
            raise ModelError(f"objective sense must be 'min' or 'max', got {sense!r}")
        merged: dict[int, float] = {}
        items = coeffs.items() if isinstance(coeffs, dict) else coeffs
        for idx, val in items:
            self._check_var(idx)
            if not math.isfinite(val):
                raise ModelError("non-finite objective coefficient")
            if val != 0.0:
                merged[idx] = merged.get(idx, 0.0) + float(val)
        self.obj_coeffs = merged
        self.obj_sense = sense
        self.obj_const = float(constant)

    def add_objective_term(self, idx: int, coef: float) -> None:
        self._check_var(idx)
        if not math.isfinite(coef):
            raise ModelError("non-finite objective coefficient")
        new = self.obj_coeffs.get(idx, 0.0) + float(coef)
        if new == 0.0:
            self.obj_coeffs.pop(idx, None)
        else:
            self.obj_coeffs[idx] = new

    def _check_var(self, idx: int) -> None:
        if not isinstance(idx, (int, np.integer)) or idx < 0 or idx >= len(self.var_names):
            raise ModelError(f"unknown variable index {idx!r}")

    # ------------------------------------------------------------------
    # inspection
    # ------------------------------------------------------------------

    @property
    def n_vars(self) -> int:
        return len(self.var_names)

    @property
    def n_constrs(self) -> int:
        return len(self.constraints)

    @property
    def n_binaries(self) -> int:
        return sum(1 for k in self.kinds if k == BINARY)

    @property
    def binary_indices(self) -> list[int]:
        return [i for i, k in enumerate(self.kinds) if k == BINARY]

    @property
    def nnz(self) -> int:
        return sum(len(c.coeffs) for c in self.constraints)

    def objective_value(self, x: np.ndarray) -> float:
        val = self.obj_const
        for idx, coef in self.obj_coeffs.items():
            val += coef * x[idx]
        return float(val)

    def constraint_activity(self, ci: int, x: np.ndarray) -> float:
        return float(sum(coef * x[idx] for idx, coef in self.constraints[ci].coeffs.items()))


def verify_solution(model: MilpModel, x: np.ndarray, feas_tol: float = FEAS_TOL,
                    int_tol: float = INT_TOL) -> list[str]:
    """Independent residual checker; returns human-readable violations."""
    issues: list[str] = []
    for j in range(model.n_vars):
        if x[j] < model.lb[j] - feas_tol * (1.0 + abs(model.lb[j])):
            issues.append(f"var {model.var_names[j]} below lower bound: {x[j]} < {model.lb[j]}")
        if x[j] > model.ub[j] + feas_tol * (1.0 + abs(model.ub[j])):
            issues.append(f"var {model.var_names[j]} above upper bound: {x[j]} > {model.ub[j]}")
        if model.kinds[j] == BINARY and abs(x[j] - round(x[j])) > int_tol:
            issues.append(f"binary {model.var_names[j]} fractional: {x[j]}")
    for ci, con in enumerate(model.constraints):
        act = model.constraint_activity(ci, x)
        slack = act - con.rhs
        tol = feas_tol * (1.0 + abs(con.rhs))
        if con.sense == LE and slack > tol:
            issues.append(f"constraint {con.name} violated: {act} > {con.rhs}")
        elif con.sense == GE and slack < -tol:
            issues.append(f"constraint {con.name} violated: {act} < {con.rhs}")
        elif con.sense == EQ and abs(slack) > tol:
            issues.append(f"constraint {con.name} violated: {act} != {con.rhs}")
    return issues


# ----------------------------------------------------------------------
# piecewise-linear modeling helpers
# ----------------------------------------------------------------------

def add_concave_pwl_utility(model: MilpModel, p_var: int, breakpoints, slopes,
                            name: str = "util") -> int:
    """Add a concave increasing piecewise-linear value ``U`` of ``p_var``.

    ``slopes`` has one entry per segment (strictly decreasing), ``breakpoints``
    the interior segment ends, so ``len(slopes) == len(breakpoints) + 1``.  The
    curve is anchored at (0, 0) and the last segment extends indefinitely.
    Under maximization the chord envelope ``U <= line_k`` is tight, so no
    binaries are needed.
    """
    slopes = [float(s) for s in slopes]
    breakpoints = [float(b) for b in breakpoints]
    if len(slopes) != len(breakpoints) + 1:
        raise ModelError("need exactly one more slope than breakpoints")
    if any(s2 >= s1 - 1e-12 for s1, s2 in zip(slopes, slopes[1:])):
        raise ModelError("slopes must be strictly decreasing (concavity)")
    if any(b2 <= b1 for b1, b2 in zip(breakpoints, breakpoints[1:])) or (
            breakpoints and breakpoints[0] <= 0.0):
        raise ModelError("breakpoints must be positive and strictly increasing")
    u_var = model.add_var(name, -INF, INF)
    x_prev, v_prev = 0.0, 0.0
    for k, slope in enumerate(slopes):
        # line through (x_prev, v_prev) with this slope: U - slope*P <= v_prev - slope*x_prev
        model.add_constr({u_var: 1.0, p_var: -slope}, LE, v_prev - slope * x_prev,
                         name=f"{name}_seg{k}")
        if k < len(breakpoints):
            v_prev += slope * (breakpoints[k] - x_prev)
            x_prev = breakpoints[k]
    return u_var


def add_convex_pwl_cost(model: MilpModel, p_var: int, xs, ys, name: str = "cost") -> int:
    """Add a convex piecewise-linear cost ``C >= chord_k`` of ``p_var``.

    ``xs``/``ys`` are the breakpoint coordinates (at least two, xs increasing).
    Minimizing C (or maximizing -C) makes the chord envelope tight; the result
    interpolates the sampled curve exactly at the breakpoints.
    """
    xs = [float(v) for v in xs]
    ys = [float(v) for v in ys]
    if len(xs) != len(ys) or len(xs) < 2:
        raise ModelError("need matching xs/ys with at least two breakpoints")
    if any(b <= a for a, b in zip(xs, xs[1:])):
        raise ModelError("cost breakpoints must be strictly increasing")
    slopes = [(y2 - y1) / (x2 - x1) for (x1, y1), (x2, y2) in zip(zip(xs, ys), zip(xs[1:], ys[1:]))]
    if any(s2 < s1 - 1e-9 * (1 + abs(s1)) for s1, s2 in zip(slopes, slopes[1:])):
        raise ModelError("cost samples are not convex")
    c_var = model.add_var(name, -INF, INF)
    for k, slope in enumerate(slopes):
        # C - slope*P >= y_k - slope*x_k
        model.add_constr({c_var: 1.0, p_var: -slope}, GE, ys[k] - slope * xs[k],
                         name=f"{name}_seg{k}")
    return c_var


def add_blocked_cost(model: MilpModel, r_var: int, tariff, name: str = "carbon") -> tuple[int, list[int]]:
    """Blocked (stepwise) carbon cost of the emission-rate variable ``r_var``.

    ``tariff`` must expose ``prices`` ($/tCO2, nondecreasing), ``caps``
    (tCO2/h per block) and ``dt_hours``.  Adds block variables ``R_n`` with
    ``sum R_n >= R`` and returns ``(cost_var, block_vars)``.  Nondecreasing
    prices make the LP relaxation fill blocks in order, so no binaries are
    needed; the ``>=`` link lets a (slightly) negative predicted rate cost 0.
    """
    prices = [float(p) for p in tariff.prices]
    caps = [float(c) for c in tariff.caps]
    if len(prices) != len(caps) or not prices:
        raise ModelError("tariff needs matching, nonempty prices and caps")
    if any(p2 < p1 - 1e-12 for p1, p2 in zip(prices, prices[1:])):
        raise ModelError("block prices must be nondecreasing")
    if any(c <= 0 for c in caps):
        raise ModelError("block caps must be positive")
    dt = float(tariff.dt_hours)
    blocks = [model.add_var(f"{name}_b{n}", 0.0, caps[n]) for n in range(len(caps))]
    link = {r_var: -1.0}
    for b in blocks:
        link[b] = 1.0
    model.add_constr(link, GE, 0.0, name=f"{name}_fill")
    cost_var = model.add_var(f"{name}_cost", 0.0, INF)
    defn = {cost_var: 1.0}
    for n, b in enumerate(blocks):
        defn[b] = -prices[n] * dt
    model.add_constr(defn, EQ, 0.0, name=f"{name}_def")
    return cost_var, blocks


# ----------------------------------------------------------------------
# MPS export
# ----------------------------------------------------------------------

_MPS_SAFE = re.compile(r"[^A-Za-z0-9_.]")


def _sanitize_names(names: list[str], prefix: str) -> list[str]:
    out: list[str] = []
    seen: set[str] = set()
    for i, raw in enumerate(names):
        base = _MPS_SAFE.sub("_", raw)[:200] or f"{prefix}{i}"
        cand = base
        k = 1
        while cand in seen:
            cand = f"{base}.{k}"
            k += 1
        seen.add(cand)
        out.append(cand)
    return out


def _num(v: float) -> str:
    return f"{v:.17g}"


def export_mps(model: MilpModel, path) -> None:
    """Write free-format MPS (OBJSENSE emitted for maximization models)."""
    vnames = _sanitize_names(model.var_names, "x")
    cnames = _sanitize_names([c.name for c in model.constraints], "c")
    lines: list[str] = [f"NAME {_MPS_SAFE.sub('_', model.name) or 'model'}"]
    if model.obj_sense == "max":
        lines.append("OBJSENSE")
        lines.append("    MAX")
    lines.append("ROWS")
    lines.append(" N  OBJ")
    sense_tag = {LE: "L", GE: "G", EQ: "E"}
    for ci, con in enumerate(model.constraints):
        lines.append(f" {sense_tag[con.sense]}  {cnames[ci]}")
    lines.append("COLUMNS")
    col_rows: list[list[tuple[str, float]]] = [[] for _ in range(model.n_vars)]
    for j, coef in sorted(model.obj_coeffs.items()):
        col_rows[j].append(("OBJ", coef))
    for ci, con in enumerate(model.constraints):
        for j, coef in sorted(con.coeffs.items()):
            col_rows[j].append((cnames[ci], coef))
    for j in range(model.n_vars):
        for row, coef in col_rows[j]:
            lines.append(f"    {vnames[j]}  {row}  {_num(coef)}")
    lines.append("RHS")
    if model.obj_const != 0.0:
        lines.append(f"    RHS  OBJ  {_num(-model.obj_const)}")
    for ci, con in enumerate(model.constraints):
        if con.rhs != 0.0:
            lines.append(f"    RHS  {cnames[ci]}  {_num(con.rhs)}")
    lines.append("BOUNDS")
    for j in range(model.n_vars):
        vn = vnames[j]
        lo, hi = model.lb[j], model.ub[j]
        if model.kinds[j] == BINARY:
            lines.append(f" BV BND  {vn}")
            continue
        if lo == hi:
            lines.append(f" FX BND  {vn}  {_num(lo)}")
            continue
        if lo == -INF and hi == INF:
            lines.append(f" FR BND  {vn}")
            continue
        if lo == -INF:
            lines.append(f" MI BND  {vn}")
        elif lo != 0.0:
            lines.append(f" LO BND  {vn}  {_num(lo)}")
        if hi != INF:
            lines.append(f" UP BND  {vn}  {_num(hi)}")
    lines.append("ENDATA")
    with open(path, "w", encoding="ascii") as fh:
        fh.write("\n".join(lines) + "\n")
