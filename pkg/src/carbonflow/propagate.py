"""Activity-based bound propagation on standard-form rows.

Used as node presolve in branch-and-bound: after branching fixes a binary,
implied bounds (forced ReLU outputs, gated storage branches) tighten without
any LP work, and many infeasible nodes are recognized outright.
"""

from __future__ import annotations

import numpy as np

from .milp import INF
from .simplex import StdForm


class RowTable:
    """Flattened row storage (indices, coefficients) for fast propagation."""

    def __init__(self, std: StdForm):
        n, m = std.n, std.m
        idx_parts = []
        coef_parts = []
        starts = [0]
        for i in range(m):
            row = std.a[i]
            nz = np.flatnonzero(row)
            idx = np.concatenate([nz, [n + i]])
            coef = np.concatenate([row[nz], [1.0]])
            idx_parts.append(idx)
            coef_parts.append(coef)
            starts.append(starts[-1] + len(idx))
        self.idx = np.concatenate(idx_parts) if idx_parts else np.empty(0, dtype=int)
        self.coef = np.concatenate(coef_parts) if coef_parts else np.empty(0)
        self.starts = np.asarray(starts, dtype=int)
        self.rhs = std.b.copy()
        self.m = m
        # var -> rows containing it
        self.var_rows: list[list[int]] = [[] for _ in range(std.n_total)]
        for i in range(m):
            for j in self.idx[self.starts[i]:self.starts[i + 1]]:
                self.var_rows[j].append(i)

    def row(self, i: int):
        s, e = self.starts[i], self.starts[i + 1]
        return self.idx[s:e], self.coef[s:e]


def tighten_bounds(table: RowTable, lb: np.ndarray, ub: np.ndarray,
                   touched_vars=None, int_mask: np.ndarray | None = None,
                   max_passes: int = 4, min_gain: float = 1e-7) -> bool:
    """Tighten ``lb``/``ub`` in place using row activities; returns False when
    some row is proven infeasible.

    Every row is an equality ``a.x = rhs`` (slacks carry the sense).  Binary
    variables (``int_mask``) additionally round to {0, 1}.  Only tightenings
    larger than ``min_gain`` (scaled) propagate further, keeping the worklist
    short.
    """
    if touched_vars is None:
        pending = set(range(table.m))
    else:
        pending = set()
        for j in touched_vars:
            pending.update(table.var_rows[j])
    with np.errstate(invalid="ignore"):
        return _tighten_loop(table, lb, ub, pending, int_mask, max_passes, min_gain)


def _tighten_loop(table, lb, ub, pending, int_mask, max_passes, min_gain) -> bool:
    for _ in range(max_passes):
        if not pending:
            return True
        rows = sorted(pending)
        pending = set()
        for i in rows:
            idx, coef = table.row(i)
            lo_terms = np.where(coef > 0, coef * lb[idx], coef * ub[idx])
            hi_terms = np.where(coef > 0, coef * ub[idx], coef * lb[idx])
            act_lo = float(lo_terms.sum())
            act_hi = float(hi_terms.sum())
            rhs = table.rhs[i]
            tol = 1e-7 * (1.0 + abs(rhs))
            if act_lo > rhs + tol or act_hi < rhs - tol:
                return False
            if not (np.isfinite(act_lo) or np.isfinite(act_hi)):
                continue
            for k in range(len(idx)):
                j = idx[k]
                c = coef[k]
                rest_lo = act_lo - lo_terms[k]
                rest_hi = act_hi - hi_terms[k]
                if not (np.isfinite(rest_lo) and np.isfinite(rest_hi)):
                    continue
                # c*x = rhs - rest, rest in [rest_lo, rest_hi]
                if c > 0:
                    new_lo = (rhs - rest_hi) / c
                    new_hi = (rhs - rest_lo) / c
                else:
                    new_lo = (rhs - rest_lo) / c
                    new_hi = (rhs - rest_hi) / c
                gain = min_gain * (1.0 + abs(new_lo) + abs(new_hi))
                changed = False
                if new_lo > lb[j] + gain:
                    lb[j] = new_lo
                    changed = True
                if new_hi < ub[j] - gain:
                    ub[j] = new_hi
                    changed = True
                if changed:
                    if int_mask is not None and int_mask[j]:
                        if lb[j] > 1e-6:
                            lb[j] = 1.0
                        if ub[j] < 1.0 - 1e-6:
                            ub[j] = 0.0
                    if lb[j] > ub[j] + 1e-7 * (1.0 + abs(lb[j])):
                        return False
                    if lb[j] > ub[j]:
                        mid = 0.5 * (lb[j] + ub[j])
                        lb[j] = ub[j] = mid
                    pending.update(table.var_rows[j])
    return True
