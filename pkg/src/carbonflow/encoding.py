"""Exact MILP compilation of trained ReLU networks.

Each neuron gets interval-propagated pre-activation bounds; neurons whose
interval is one-sided are stabilized (no binary), the rest get the standard
four-constraint big-M encoding with one binary.  Only active connections
contribute terms, so sparser networks compile to fewer nonzeros.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import _safe_range
from .milp import EQ, GE, INF, LE, MilpModel, ModelError
from .nets import SparseNet

BOUND_PAD = 1e-6

ALWAYS_OFF = "always-off"
ALWAYS_ON = "always-on"
UNSTABLE = "unstable"


@dataclass
class NeuronBounds:
    """Pre-activation interval [lo, hi] per neuron of one layer."""

    lo: np.ndarray
    hi: np.ndarray

    def __post_init__(self):
        if (self.lo > self.hi).any():
            raise ModelError("neuron bounds crossed (lo > hi)")

    def classify(self, i: int) -> str:
        if self.hi[i] <= 0.0:
            return ALWAYS_OFF
        if self.lo[i] >= 0.0:
            return ALWAYS_ON
        return UNSTABLE

    @property
    def n_unstable(self) -> int:
        return int(np.sum((self.lo < 0.0) & (self.hi > 0.0)))


@dataclass
class EncodeStats:
    n_unstable: int = 0
    n_always_on: int = 0
    n_always_off: int = 0
    n_binaries: int = 0
    # (layer, neuron) -> binary variable, for warm starts from forward traces
    t_vars: dict = None

    def __post_init__(self):
        if self.t_vars is None:
            self.t_vars = {}

    def merge(self, other: "EncodeStats") -> None:
        self.n_unstable += other.n_unstable
        self.n_always_on += other.n_always_on
        self.n_always_off += other.n_always_off
        self.n_binaries += other.n_binaries


def propagate_bounds(net: SparseNet, box_lo, box_hi) -> list[NeuronBounds]:
    """Sound interval arithmetic through every affine layer and ReLU clamp.

    ``box_lo``/``box_hi`` bound the (normalized) inputs.  Returns one
    :class:`NeuronBounds` per weight layer (pre-activation intervals), the
    last one for the affine output layer.
    """
    lo = np.asarray(box_lo, dtype=float)
    hi = np.asarray(box_hi, dtype=float)
    if lo.shape != (net.dims[0],) or hi.shape != (net.dims[0],):
        raise ModelError("input box does not match the network input width")
    if (lo > hi).any():
        raise ModelError("input box is empty")
    out: list[NeuronBounds] = []
    for l in range(net.n_layers):
        w = net.weights[l]
        w_pos = np.maximum(w, 0.0)
        w_neg = np.minimum(w, 0.0)
        pre_lo = w_pos @ lo + w_neg @ hi + net.biases[l]
        pre_hi = w_pos @ hi + w_neg @ lo + net.biases[l]
        out.append(NeuronBounds(pre_lo - BOUND_PAD, pre_hi + BOUND_PAD))
        lo = np.maximum(pre_lo - BOUND_PAD, 0.0)
        hi = np.maximum(pre_hi + BOUND_PAD, 0.0)
    return out


def encode_relu(model: MilpModel, x_var: int, lo: float, hi: float,
                name: str = "relu") -> tuple[int, int | None]:
    """v = max(0, x) with sound pre-activation bounds [lo, hi].

    Returns ``(v_var, t_var)``; ``t_var`` is None for stabilized neurons.
    """
    if lo > hi:
        raise ModelError("encode_relu requires lo <= hi")
    if hi <= 0.0:
        v = model.add_var(f"{name}_v", 0.0, 0.0)
        return v, None
    if lo >= 0.0:
        v = model.add_var(f"{name}_v", max(lo, 0.0), hi)
        model.add_constr({v: 1.0, x_var: -1.0}, EQ, 0.0, name=f"{name}_on")
        return v, None
    v = model.add_var(f"{name}_v", 0.0, hi)
    t = model.add_binary(f"{name}_t")
    model.add_constr({v: 1.0, x_var: -1.0}, GE, 0.0, name=f"{name}_ge")
    # v <= x - lo*(1 - t)  <=>  v - x - lo*t <= -lo
    model.add_constr({v: 1.0, x_var: -1.0, t: -lo}, LE, -lo, name=f"{name}_ub1")
    model.add_constr({v: 1.0, t: -hi}, LE, 0.0, name=f"{name}_ub2")
    # secant cut v <= hi*(x - lo)/(hi - lo): tightens the LP relaxation to the
    # per-neuron convex hull without touching the integer-feasible set
    slope = hi / (hi - lo)
    model.add_constr({v: 1.0, x_var: -slope}, LE, -slope * lo, name=f"{name}_sec")
    model.branch_hints[t] = x_var
    return v, t


def encode_network(model: MilpModel, net: SparseNet, input_vars: list[int],
                   prefix: str = "nn") -> tuple[list[int], EncodeStats]:
    """Emit the exact MILP form of ``net`` between physical-unit variables.

    ``input_vars`` must carry finite bounds; min-max normalization and output
    denormalization are emitted as exact affine rows, so callers deal only in
    physical units.  Returns the physical output variables and encoding stats.
    """
    if len(input_vars) != net.dims[0]:
        raise ModelError(f"expected {net.dims[0]} input vars, got {len(input_vars)}")
    phys_lo = np.array([model.lb[j] for j in input_vars])
    phys_hi = np.array([model.ub[j] for j in input_vars])
    if not (np.isfinite(phys_lo).all() and np.isfinite(phys_hi).all()):
        raise ModelError("network inputs need finite bounds for bound propagation")
    x_rng = _safe_range(net.x_min, net.x_max)
    norm_lo = (phys_lo - net.x_min) / x_rng
    norm_hi = (phys_hi - net.x_min) / x_rng
    if float(np.max(np.abs(np.concatenate([norm_lo, norm_hi])))) > 1e7:
        raise ModelError("normalized input box is degenerate; check feature scales")
    bounds = propagate_bounds(net, norm_lo, norm_hi)
    stats = EncodeStats()

    # a hidden neuron with no active outgoing path to the output contributes
    # nothing; skip it entirely (sparser nets compile to fewer binaries)
    live: list[np.ndarray] = [np.ones(d, dtype=bool) for d in net.dims]
    for l in range(net.n_layers - 1, 0, -1):
        reach = (net.masks[l] != 0.0) & live[l + 1][:, None]
        live[l] = reach.any(axis=0)

    # normalization rows: xn * range = x_phys - x_min
    layer_vars: list[int | None] = []
    for i, j in enumerate(input_vars):
        xn = model.add_var(f"{prefix}_x{i}", norm_lo[i], norm_hi[i])
        model.add_constr({xn: x_rng[i], j: -1.0}, EQ, -net.x_min[i],
                         name=f"{prefix}_norm{i}")
        layer_vars.append(xn)

    for l in range(net.n_layers):
        nb = bounds[l]
        mask = net.masks[l]
        w = net.weights[l]
        next_vars: list[int | None] = []
        for i in range(net.dims[l + 1]):
            if l < net.n_layers - 1 and not live[l + 1][i]:
                next_vars.append(None)
                continue
            z = model.add_var(f"{prefix}_l{l}n{i}_z", nb.lo[i], nb.hi[i])
            coeffs = {z: -1.0}
            for jj in np.flatnonzero(mask[i]):
                coeffs[layer_vars[jj]] = coeffs.get(layer_vars[jj], 0.0) + w[i, jj]
            model.add_constr(coeffs, EQ, -net.biases[l][i], name=f"{prefix}_l{l}n{i}_aff")
            if l == net.n_layers - 1:
                next_vars.append(z)
                continue
            cls = nb.classify(i)
            v, t = encode_relu(model, z, nb.lo[i], nb.hi[i], name=f"{prefix}_l{l}n{i}")
            if cls == UNSTABLE:
                stats.n_unstable += 1
                stats.n_binaries += 1
                stats.t_vars[(l, i)] = t
            elif cls == ALWAYS_ON:
                stats.n_always_on += 1
            else:
                stats.n_always_off += 1
            next_vars.append(v)
        layer_vars = next_vars

    # denormalization rows: y_phys = yn * range + y_min
    y_rng = _safe_range(net.y_min, net.y_max)
    out_b = bounds[-1]
    out_vars: list[int] = []
    for k, zn in enumerate(layer_vars):
        lo_phys = out_b.lo[k] * y_rng[k] + net.y_min[k]
        hi_phys = out_b.hi[k] * y_rng[k] + net.y_min[k]
        yp = model.add_var(f"{prefix}_y{k}", lo_phys, hi_phys)
        model.add_constr({yp: 1.0, zn: -y_rng[k]}, EQ, net.y_min[k],
                         name=f"{prefix}_denorm{k}")
        out_vars.append(yp)
    return out_vars, stats


def encode_es_gate(model: MilpModel, f_dis_var: int, f_cha_var: int,
                   mu_dis: int, mu_cha: int, m_lo: float, m_hi: float,
                   prefix: str = "es") -> int:
    """Gate the two storage-intensity network outputs by the mode binaries.

    Adds ``e_es = e_dis + e_cha`` where each branch equals its network output
    when its indicator is on and is forced to zero otherwise (big-M sandwich
    pairs).  Requires an exclusivity constraint on the binaries elsewhere.
    Returns the gated intensity variable.
    """
    if m_lo >= 0.0 or m_hi <= 0.0:
        raise ModelError("gate big-M bounds must satisfy m_lo < 0 < m_hi")
    if model.kinds[mu_dis] != "binary" or model.kinds[mu_cha] != "binary":
        raise ModelError("gate indicators must be binary variables")
    e_dis = model.add_var(f"{prefix}_edis", min(m_lo, 0.0), max(m_hi, 0.0))
    e_cha = model.add_var(f"{prefix}_echa", min(m_lo, 0.0), max(m_hi, 0.0))
    e_es = model.add_var(f"{prefix}_e", m_lo, m_hi)
    model.add_constr({e_es: 1.0, e_dis: -1.0, e_cha: -1.0}, EQ, 0.0,
                     name=f"{prefix}_sum")
    for tag, e_var, f_var, mu in (("cha", e_cha, f_cha_var, mu_cha),
                                  ("dis", e_dis, f_dis_var, mu_dis)):
        # (1-mu)*m_lo <= e - f <= (1-mu)*m_hi
        model.add_constr({e_var: 1.0, f_var: -1.0, mu: m_lo}, GE, m_lo,
                         name=f"{prefix}_{tag}_lnk_lo")
        model.add_constr({e_var: 1.0, f_var: -1.0, mu: m_hi}, LE, m_hi,
                         name=f"{prefix}_{tag}_lnk_hi")
        # mu*m_lo <= e <= mu*m_hi
        model.add_constr({e_var: 1.0, mu: -m_lo}, GE, 0.0, name=f"{prefix}_{tag}_gate_lo")
        model.add_constr({e_var: 1.0, mu: -m_hi}, LE, 0.0, name=f"{prefix}_{tag}_gate_hi")
    return e_es
