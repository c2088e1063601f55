"""Ground-truth carbon emission flow: nodal/branch intensities, load emission
rates, and storage carbon dynamics.

The nodal intensity of a supplied bus is the weighted average of everything
flowing in: local generation at its generation intensity, branch inflows at
the sending bus's intensity, and storage discharge at the storage's own
intensity.  The matrix route solves the resulting linear system directly;
:func:`nci_fixed_point` iterates the mixing rule and serves as an
independent oracle.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .network import NetworkCase, DispatchState, eval_flows

FLOW_EPS = 1e-9


class CarbonFlowError(ValueError):
    """Raised on contract violations in carbon-flow inputs."""


class DegenerateTopologyError(CarbonFlowError):
    """The reduced nodal system is singular (e.g. outflow from an unsupplied bus)."""


@dataclass
class FlowSnapshot:
    """Sign-resolved network state for one period.

    Branch flows are nonnegative after orientation (``src -> dst``); loads are
    aggregated per bus; storage charging is tracked separately from load so the
    carbon ledger can tell absorption from consumption.
    """

    n_bus: int
    branch_src: np.ndarray   # int, sending bus per resolved branch
    branch_dst: np.ndarray
    branch_flow: np.ndarray  # MW, >= 0
    gen_bus: np.ndarray      # int
    gen_p: np.ndarray        # MW
    sto_bus: np.ndarray      # int
    sto_dis: np.ndarray      # MW discharge
    sto_cha: np.ndarray      # MW charge
    load_mw: np.ndarray      # MW per bus

    def __post_init__(self):
        self.branch_src = np.asarray(self.branch_src, dtype=int)
        self.branch_dst = np.asarray(self.branch_dst, dtype=int)
        self.branch_flow = np.asarray(self.branch_flow, dtype=float)
        self.gen_bus = np.asarray(self.gen_bus, dtype=int)
        self.gen_p = np.asarray(self.gen_p, dtype=float)
        self.sto_bus = np.asarray(self.sto_bus, dtype=int)
        self.sto_dis = np.asarray(self.sto_dis, dtype=float)
        self.sto_cha = np.asarray(self.sto_cha, dtype=float)
        self.load_mw = np.asarray(self.load_mw, dtype=float)
        if (self.branch_flow < -FLOW_EPS).any():
            raise CarbonFlowError("branch flows must be sign-resolved (nonnegative)")
        if (self.gen_p < -FLOW_EPS).any() or (self.sto_dis < -FLOW_EPS).any():
            raise CarbonFlowError("negative generation or discharge in snapshot")
        if self.load_mw.shape != (self.n_bus,):
            raise CarbonFlowError("load vector must have one entry per bus")


@dataclass
class CarbonFlowResult:
    e_n: np.ndarray          # tCO2/MWh per bus (zero where unsupplied)
    supplied: np.ndarray     # bool per bus; False entries were eliminated
    rho: np.ndarray          # tCO2/MWh per resolved branch
    r_l: np.ndarray          # tCO2/h per bus
    e_es: np.ndarray         # tCO2/MWh per storage
    cap_es: np.ndarray       # tCO2 stored virtual carbon per storage


def resolve_directions(case: NetworkCase, p_flow: np.ndarray):
    """Orient branch flows so that every flow is nonnegative.

    Returns (src, dst, flow) arrays; zero flows keep the nominal orientation.
    """
    src = np.empty(len(case.branches), dtype=int)
    dst = np.empty(len(case.branches), dtype=int)
    flow = np.empty(len(case.branches))
    for k, br in enumerate(case.branches):
        i = case.bus_index(br.from_bus)
        j = case.bus_index(br.to_bus)
        if p_flow[k] >= 0.0:
            src[k], dst[k], flow[k] = i, j, p_flow[k]
        else:
            src[k], dst[k], flow[k] = j, i, -p_flow[k]
    return src, dst, flow


def build_matrices(snap: FlowSnapshot):
    """Assemble the power-distribution matrices for the nodal carbon system.

    Returns ``(p_b, p_g, p_dis, p_n)`` where ``p_b[i, j]`` is the MW flowing
    i -> j, ``p_g``/``p_dis`` carry generator/storage output onto their buses,
    and ``p_n`` is the diagonal of total inflow (generation + branch inflow +
    discharge) per bus.
    """
    n = snap.n_bus
    p_b = np.zeros((n, n))
    for k in range(len(snap.branch_flow)):
        p_b[snap.branch_src[k], snap.branch_dst[k]] += snap.branch_flow[k]
    p_g = np.zeros((len(snap.gen_p), n))
    for g in range(len(snap.gen_p)):
        p_g[g, snap.gen_bus[g]] = snap.gen_p[g]
    p_dis = np.zeros((len(snap.sto_dis), n))
    for s in range(len(snap.sto_dis)):
        p_dis[s, snap.sto_bus[s]] = snap.sto_dis[s]
    p_n = p_b.sum(axis=0) + p_g.sum(axis=0) + p_dis.sum(axis=0)
    return p_b, p_g, p_dis, p_n


def compute_nci(matrices, e_g: np.ndarray, e_dis: np.ndarray):
    """Solve the nodal carbon balance for intensities.

    Buses with zero total inflow are eliminated before the LU-factorized
    linear solve and reported with ``supplied=False`` and intensity zero.
    """
    p_b, p_g, p_dis, p_n = matrices
    n = len(p_n)
    e_g = np.asarray(e_g, dtype=float)
    e_dis = np.asarray(e_dis, dtype=float)
    scale = max(float(p_n.max(initial=0.0)), 1.0)
    supplied = p_n > FLOW_EPS * scale
    # an unsupplied bus cannot source outflow; that breaks conservation
    for i in np.flatnonzero(~supplied):
        if p_b[i].max(initial=0.0) > FLOW_EPS * scale:
            raise DegenerateTopologyError(
                f"bus {i} has branch outflow but no inflow")
    e_n = np.zeros(n)
    idx = np.flatnonzero(supplied)
    if idx.size:
        lhs = np.diag(p_n[idx]) - p_b[np.ix_(idx, idx)].T
        rhs = (p_g.T @ e_g + p_dis.T @ e_dis)[idx]
        try:
            sol = np.linalg.solve(lhs, rhs)
        except np.linalg.LinAlgError as exc:
            raise DegenerateTopologyError(
                "degenerate topology: nodal system singular after elimination") from exc
        if not np.isfinite(sol).all():
            raise DegenerateTopologyError("non-finite nodal intensities")
        e_n[idx] = sol
    return e_n, supplied


def nci_fixed_point(snap: FlowSnapshot, e_g: np.ndarray, e_dis: np.ndarray,
                    tol: float = 1e-10, max_iter: int = 10000):
    """Independent oracle: iterate the nodal mixing rule until stationary."""
    p_b, p_g, p_dis, p_n = build_matrices(snap)
    n = snap.n_bus
    scale = max(float(p_n.max(initial=0.0)), 1.0)
    supplied = p_n > FLOW_EPS * scale
    inj = p_g.T @ np.asarray(e_g, dtype=float) + p_dis.T @ np.asarray(e_dis, dtype=float)
    e_n = np.zeros(n)
    for _ in range(max_iter):
        mixed = inj + p_b.T @ e_n
        new = np.where(supplied, mixed / np.where(supplied, p_n, 1.0), 0.0)
        if np.max(np.abs(new - e_n), initial=0.0) < tol:
            return new, supplied
        e_n = new
    raise CarbonFlowError(f"fixed point did not converge in {max_iter} iterations")


def branch_intensity(e_n: np.ndarray, snap: FlowSnapshot) -> np.ndarray:
    """Branch carbon intensity: the sending bus's nodal intensity."""
    return e_n[snap.branch_src]


def load_emission_rates(load_mw: np.ndarray, e_n: np.ndarray) -> np.ndarray:
    load_mw = np.asarray(load_mw, dtype=float)
    e_n = np.asarray(e_n, dtype=float)
    if load_mw.shape != e_n.shape:
        raise CarbonFlowError("load and intensity vectors must align")
    return load_mw * e_n


def storage_carbon_step(psi_prev: float, e_prev: float, p_cha: float, p_dis: float,
                        e_node: float, psi_now: float, dt: float, *,
                        eta_ch: float = 1.0, eta_dis: float = 1.0,
                        leak: float = 0.0) -> tuple[float, float]:
    """Advance the storage carbon ledger by one period.

    Leakage sheds energy and carbon proportionally (intensity unchanged),
    charging absorbs carbon at the bus intensity, and discharging releases
    carbon at the storage's own end-of-period intensity.  Returns
    ``(e_now, carbon_now)``.
    """
    if p_cha > FLOW_EPS and p_dis > FLOW_EPS:
        raise CarbonFlowError("simultaneous charging and discharging")
    if p_cha < -FLOW_EPS or p_dis < -FLOW_EPS:
        raise CarbonFlowError("negative storage power")
    psi_led = (1.0 - leak) * psi_prev
    expected = psi_led + eta_ch * p_cha * dt - (p_dis / eta_dis) * dt
    if abs(expected - psi_now) > 1e-6 * (1.0 + abs(expected)):
        raise CarbonFlowError(
            f"stored energy {psi_now} inconsistent with dynamics ({expected})")
    carbon_led = e_prev * psi_led
    if p_cha > FLOW_EPS:
        carbon_now = carbon_led + p_cha * e_node * dt
        e_now = carbon_now / psi_now if psi_now > FLOW_EPS else e_prev
    elif p_dis > FLOW_EPS:
        denom = psi_now + p_dis * dt
        e_now = carbon_led / denom if denom > FLOW_EPS else e_prev
        carbon_now = e_now * psi_now
    else:
        e_now = e_prev
        carbon_now = e_now * psi_now
    return float(e_now), float(carbon_now)


def snapshot_from_state(case: NetworkCase, state: DispatchState, t: int) -> FlowSnapshot:
    src, dst, flow = resolve_directions(case, state.p_flow[t])
    load_mw = np.zeros(case.n_bus)
    for d, load in enumerate(case.loads):
        load_mw[case.bus_index(load.bus)] += state.p_load[t, d]
    gen_bus = np.array([case.bus_index(g.bus) for g in case.generators], dtype=int)
    sto_bus = np.array([case.bus_index(s.bus) for s in case.storages], dtype=int)
    return FlowSnapshot(
        n_bus=case.n_bus,
        branch_src=src, branch_dst=dst, branch_flow=flow,
        gen_bus=gen_bus, gen_p=np.maximum(state.p_gen[t], 0.0),
        sto_bus=sto_bus,
        sto_dis=np.maximum(state.p_dis[t], 0.0),
        sto_cha=np.maximum(state.p_cha[t], 0.0),
        load_mw=load_mw)


def cef_for_dispatch(case: NetworkCase, state: DispatchState,
                     include_renewables_as_zero_carbon: bool = True) -> list[CarbonFlowResult]:
    """Exact carbon accounting of a full schedule, period by period.

    Renewable injections enter the nodal balance as zero-intensity generation.
    Storage discharge intensity for period ``t`` is determined by the
    storage's own ledger before the network solve; charging then absorbs at
    the solved bus intensity.
    """
    state.validate(case)
    results: list[CarbonFlowResult] = []
    n_sto = len(case.storages)
    e_prev = np.array([s.e0 for s in case.storages], dtype=float)
    psi_prev = np.array([s.psi0 for s in case.storages], dtype=float)
    gen_e = np.array([g.gci for g in case.generators], dtype=float)
    for t in range(case.horizon):
        snap = snapshot_from_state(case, state, t)
        if include_renewables_as_zero_carbon and case.renewables:
            ren_bus = np.array([case.bus_index(r.bus) for r in case.renewables], dtype=int)
            snap = FlowSnapshot(
                n_bus=snap.n_bus, branch_src=snap.branch_src, branch_dst=snap.branch_dst,
                branch_flow=snap.branch_flow,
                gen_bus=np.concatenate([snap.gen_bus, ren_bus]),
                gen_p=np.concatenate([snap.gen_p, np.maximum(state.p_renew[t], 0.0)]),
                sto_bus=snap.sto_bus, sto_dis=snap.sto_dis, sto_cha=snap.sto_cha,
                load_mw=snap.load_mw)
        e_g_all = np.concatenate([gen_e, np.zeros(len(case.renewables))]) \
            if include_renewables_as_zero_carbon and case.renewables else gen_e

        # discharge intensity from the storage's own ledger (pre-network)
        e_dis_t = np.zeros(n_sto)
        psi_now = np.empty(n_sto)
        for s, sto in enumerate(case.storages):
            psi_led = (1.0 - sto.leak_rate) * psi_prev[s]
            psi_now[s] = psi_led + sto.eta_ch * state.p_cha[t, s] * case.dt \
                - (state.p_dis[t, s] / sto.eta_dis) * case.dt
            if state.p_dis[t, s] > FLOW_EPS:
                denom = psi_now[s] + state.p_dis[t, s] * case.dt
                e_dis_t[s] = (e_prev[s] * psi_led / denom) if denom > FLOW_EPS else e_prev[s]
            else:
                e_dis_t[s] = e_prev[s]

        e_n, supplied = compute_nci(build_matrices(snap), e_g_all, e_dis_t)
        rho = branch_intensity(e_n, snap)
        r_l = load_emission_rates(snap.load_mw, e_n)

        e_now = np.empty(n_sto)
        carbon_now = np.empty(n_sto)
        for s, sto in enumerate(case.storages):
            e_now[s], carbon_now[s] = storage_carbon_step(
                psi_prev[s], e_prev[s], state.p_cha[t, s], state.p_dis[t, s],
                e_n[case.bus_index(sto.bus)], psi_now[s], case.dt,
                eta_ch=sto.eta_ch, eta_dis=sto.eta_dis, leak=sto.leak_rate)
        results.append(CarbonFlowResult(e_n=e_n, supplied=supplied, rho=rho, r_l=r_l,
                                        e_es=e_now.copy(), cap_es=carbon_now.copy()))
        e_prev = e_now
        psi_prev = psi_now
    return results
