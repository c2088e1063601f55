"""Branch-and-bound over the bounded simplex for models with binaries.

Node selection is best-bound with a depth-first plunge after branching;
branching picks the most-fractional binary (ties: lowest variable index).
Child nodes warm-start from the parent's basis.  All tie-breaks are fixed,
so solves are reproducible.
"""

from __future__ import annotations

import heapq
import math
import time

import numpy as np

from .milp import INT_TOL, MilpModel, ModelError, SolveResult, verify_solution
from .propagate import RowTable, tighten_bounds
from .simplex import NumericalError, solve_std, standardize


class _Node:
    __slots__ = ("bound", "seq", "fixes", "statuses", "basis", "depth")

    def __init__(self, bound, seq, fixes, statuses, basis, depth):
        self.bound = bound
        self.seq = seq
        self.fixes = fixes          # dict var -> 0 or 1
        self.statuses = statuses    # parent basis snapshot (warm start)
        self.basis = basis
        self.depth = depth

    def __lt__(self, other):
        # best bound first; ties pop the most recent node (keeps backtracking
        # close to the current dive, where the basis cache is warm)
        return (self.bound, -self.seq) < (other.bound, -other.seq)


def _most_fractional(x: np.ndarray, binaries: list[int]) -> int:
    best_j = -1
    best_score = INT_TOL
    for j in binaries:
        f = x[j] - math.floor(x[j])
        score = min(f, 1.0 - f)
        if score > best_score + 1e-12:
            best_score = score
            best_j = j
    return best_j


def bb_solve(model: MilpModel, rel_gap: float = 1e-4, node_limit: int = 200000,
             time_limit: float | None = None, abs_gap: float = 1e-9,
             start: tuple | None = None,
             start_fixes: dict[int, int] | None = None) -> SolveResult:
    """Solve ``model`` to within ``rel_gap``; see :class:`SolveResult`.

    ``start_fixes`` optionally assigns every binary; the assignment is solved
    as a leaf right after the root to seed the incumbent.
    """
    t0 = time.perf_counter()
    std = standardize(model)
    binaries = model.binary_indices
    lb0 = std.lb.copy()
    ub0 = std.ub.copy()
    int_mask = np.zeros(std.n_total, dtype=bool)
    int_mask[binaries] = True
    table = RowTable(std)
    if not tighten_bounds(table, lb0, ub0, int_mask=int_mask):
        return SolveResult("infeasible", None, math.nan, math.nan, 0, 0,
                           time.perf_counter() - t0)
    root_warm: tuple | None = None

    # minimized objective internally; convert on exit
    def report(status, x, obj_min, gap, nodes, iters):
        obj = math.nan
        xs = None
        if x is not None:
            xs = x[:std.n].copy()
            obj = -obj_min + std.obj_const if std.maximize else obj_min + std.obj_const
        res = SolveResult(status, xs, obj, gap, nodes, iters,
                          time.perf_counter() - t0, warm=root_warm)
        if status == "optimal" and xs is not None:
            issues = verify_solution(model, xs)
            if issues:
                raise ModelError("solver returned an invalid solution: " + issues[0])
        return res

    inc_x = None
    inc_obj = math.inf          # minimized incumbent objective
    total_iters = 0
    nodes_done = 0
    seq = 0
    heap: list[_Node] = []
    root = _Node(-math.inf, seq, {}, None, None, 0)
    if start is not None:
        root.statuses, root.basis = start
    stack = [root]              # plunge stack, processed before the heap
    binv_cache: dict[bytes, tuple] = {}
    cache_order: list[bytes] = []

    def slack(): return max(abs_gap, rel_gap * abs(inc_obj)) if inc_obj < math.inf else 0.0

    final_status = None
    while stack or heap:
        if node_limit and nodes_done >= node_limit:
            final_status = "node-limit"
            break
        if time_limit is not None and time.perf_counter() - t0 > time_limit:
            final_status = "gap-limit"
            break
        node = stack.pop() if stack else heapq.heappop(heap)
        if inc_obj < math.inf and node.bound >= inc_obj - slack():
            continue
        lb = lb0
        ub = ub0
        if node.fixes:
            lb = lb0.copy()
            ub = ub0.copy()
            for j, v in node.fixes.items():
                if v:
                    lb[j] = 1.0
                else:
                    ub[j] = 0.0
            if not tighten_bounds(table, lb, ub, touched_vars=node.fixes.keys(),
                                  int_mask=int_mask):
                nodes_done += 1
                continue
        start = None
        binv0 = None
        binv_age = 0
        if node.statuses is not None:
            start = (node.statuses, node.basis)
            cached = binv_cache.get(node.basis.tobytes())
            if cached is not None:
                binv0, binv_age = cached
        try:
            res = solve_std(std, lb, ub, start=start, binv0=binv0, binv_age=binv_age)
        except NumericalError:
            if start is not None:
                res = solve_std(std, lb, ub, start=None)  # cold retry
            else:
                raise
        nodes_done += 1
        total_iters += res.iterations
        if res.basis is not None and res.binv is not None:
            key = res.basis.tobytes()
            if key not in binv_cache:
                binv_cache[key] = (res.binv, res.binv_age)
                cache_order.append(key)
                if len(cache_order) > 4:
                    binv_cache.pop(cache_order.pop(0), None)
        if node.depth == 0 and res.status == "optimal":
            root_warm = (res.statuses, res.basis)
        if res.status == "unbounded":
            return report("unbounded", None, math.nan, math.nan, nodes_done, total_iters)
        if res.status != "optimal":
            continue
        bound = res.obj
        if inc_obj < math.inf and bound >= inc_obj - slack():
            continue
        frac_j = _most_fractional(res.x, binaries)
        if frac_j < 0:
            # integral solution; snap binaries and keep if it improves
            x = res.x.copy()
            for j in binaries:
                x[j] = round(x[j])
            if bound < inc_obj - abs_gap:
                inc_obj = bound
                inc_x = x
            continue
        frac_val = res.x[frac_j]
        seq += 1
        up = _Node(bound, seq, {**node.fixes, frac_j: 1}, res.statuses, res.basis,
                   node.depth + 1)
        seq += 1
        down = _Node(bound, seq, {**node.fixes, frac_j: 0}, res.statuses, res.basis,
                     node.depth + 1)
        # plunge toward the rounding of the fractional value; an indicator
        # hint (sign of a companion variable) overrides the rounding
        hint = model.branch_hints.get(frac_j)
        if hint is not None:
            prefer_up = res.x[hint] > 0.0
        else:
            prefer_up = frac_val >= 0.5
        first, second = (up, down) if prefer_up else (down, up)
        heapq.heappush(heap, second)
        stack.append(first)
        if node.depth == 0 and start_fixes:
            # seed the incumbent: solve the supplied full binary assignment
            # as a leaf right after the root (top of the plunge stack)
            seq += 1
            stack.append(_Node(bound, seq, dict(start_fixes),
                               res.statuses, res.basis, 1))

    if final_status is None:
        # tree exhausted: incumbent (if any) is optimal within requested gap
        if inc_x is None:
            return report("infeasible", None, math.nan, math.nan, nodes_done, total_iters)
        return report("optimal", inc_x, inc_obj, _gap(inc_obj, heap, stack),
                      nodes_done, total_iters)
    if inc_x is None:
        return report(final_status, None, math.nan, math.nan, nodes_done, total_iters)
    return report(final_status, inc_x, inc_obj, _gap(inc_obj, heap, stack),
                  nodes_done, total_iters)


def _gap(inc_obj: float, heap, stack) -> float:
    bounds = [n.bound for n in heap] + [n.bound for n in stack]
    best_bound = min(bounds) if bounds else inc_obj
    best_bound = min(best_bound, inc_obj)
    return abs(inc_obj - best_bound) / max(1.0, abs(inc_obj))


def solve_model(model: MilpModel, **kwargs) -> SolveResult:
    """Entry point: LP when the model has no binaries, else branch-and-bound."""
    if model.n_binaries == 0:
        from .simplex import lp_solve
        return lp_solve(model, start=kwargs.get("start"))
    return bb_solve(model, **kwargs)
