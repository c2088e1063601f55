"""Scenario sampling, baseline-dispatch labeling, normalization, and dataset
persistence.

Features are (net active injection, gross demand) per bus in MW; labels are
the exact load emission rates per load bus (tCO2/h) plus the nodal intensity
at each storage bus (tCO2/MWh), which the dispatch model needs to drive the
storage-intensity networks.
"""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import dataclass, field, replace

import numpy as np

from . import carbon
from .network import DispatchState, NetworkCase

log = logging.getLogger(__name__)

CSV_FMT = "%.17g"


class DatasetError(ValueError):
    """Raised on malformed dataset files or inconsistent shapes."""


@dataclass(frozen=True)
class Scenario:
    id: int
    load_factors: tuple[float, ...]

    def demand(self, case: NetworkCase, d: int, t: int) -> float:
        return case.loads[d].profile[t] * self.load_factors[d]


def sample_scenarios(case: NetworkCase, n: int, seed: int,
                     lo: float = 0.7, hi: float = 1.3) -> list[Scenario]:
    """Draw ``n`` per-load uniform scaling factors of the nominal profiles."""
    if n < 1:
        raise ValueError("need at least one scenario")
    rng = np.random.default_rng(seed)
    factors = rng.uniform(lo, hi, size=(n, len(case.loads)))
    return [Scenario(i, tuple(factors[i])) for i in range(n)]


# ----------------------------------------------------------------------
# feature / label maps
# ----------------------------------------------------------------------

def feature_names(case: NetworkCase) -> list[str]:
    return [f"inj_{b.id}" for b in case.buses] + [f"dem_{b.id}" for b in case.buses]


def label_names(case: NetworkCase) -> list[str]:
    names = [f"rl_{case.loads[d].bus}" for d in range(len(case.loads))]
    names += [f"nci_{s.bus}" for s in case.storages]
    return names


def feature_vector(case: NetworkCase, state: DispatchState, t: int) -> np.ndarray:
    n = case.n_bus
    inj = np.zeros(n)
    dem = np.zeros(n)
    for g, gen in enumerate(case.generators):
        inj[case.bus_index(gen.bus)] += state.p_gen[t, g]
    for r, ren in enumerate(case.renewables):
        inj[case.bus_index(ren.bus)] += state.p_renew[t, r]
    for s, sto in enumerate(case.storages):
        i = case.bus_index(sto.bus)
        inj[i] += state.p_dis[t, s] - state.p_cha[t, s]
    for d, load in enumerate(case.loads):
        i = case.bus_index(load.bus)
        inj[i] -= state.p_load[t, d]
        dem[i] += state.p_load[t, d]
    return np.concatenate([inj, dem])


def label_vector(case: NetworkCase, cf: carbon.CarbonFlowResult) -> np.ndarray:
    parts = [cf.r_l[i] for i in case.load_buses]
    parts += [cf.e_n[i] for i in case.storage_buses]
    return np.array(parts)


# ----------------------------------------------------------------------
# dataset container
# ----------------------------------------------------------------------

@dataclass
class Dataset:
    x: np.ndarray
    y: np.ndarray
    scenario_ids: np.ndarray
    periods: np.ndarray
    feature_labels: list[str]
    output_labels: list[str]
    meta: dict = field(default_factory=dict)
    normalized: bool = False
    x_min: np.ndarray | None = None
    x_max: np.ndarray | None = None
    y_min: np.ndarray | None = None
    y_max: np.ndarray | None = None

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=float)
        self.y = np.asarray(self.y, dtype=float)
        if self.x.ndim != 2 or self.y.ndim != 2 or len(self.x) != len(self.y):
            raise DatasetError("x and y must be 2-d with matching row counts")

    def __len__(self) -> int:
        return len(self.x)

    @property
    def n_features(self) -> int:
        return self.x.shape[1]

    @property
    def n_outputs(self) -> int:
        return self.y.shape[1]

    def split(self, test_fraction: float, seed: int) -> tuple["Dataset", "Dataset"]:
        rng = np.random.default_rng(seed)
        perm = rng.permutation(len(self))
        n_test = int(round(test_fraction * len(self)))
        test_idx = np.sort(perm[:n_test])
        train_idx = np.sort(perm[n_test:])
        return self._take(train_idx), self._take(test_idx)

    def _take(self, idx: np.ndarray) -> "Dataset":
        return Dataset(self.x[idx], self.y[idx], self.scenario_ids[idx],
                       self.periods[idx], list(self.feature_labels),
                       list(self.output_labels), dict(self.meta), self.normalized,
                       self.x_min, self.x_max, self.y_min, self.y_max)

    def content_hash(self) -> str:
        h = hashlib.sha256()
        h.update(self.x.tobytes())
        h.update(self.y.tobytes())
        h.update(self.scenario_ids.tobytes())
        h.update(self.periods.tobytes())
        return h.hexdigest()


def _safe_range(vmin: np.ndarray, vmax: np.ndarray) -> np.ndarray:
    """Column ranges for min-max scaling; (near-)constant columns get a unit
    range so that solver dust cannot blow up the inverse scale."""
    rng = np.asarray(vmax, dtype=float) - np.asarray(vmin, dtype=float)
    floor = 1e-9 * np.maximum(1.0, np.maximum(np.abs(vmin), np.abs(vmax)))
    return np.where(rng > floor, rng, 1.0)


def normalize(ds: Dataset) -> Dataset:
    """Min-max scale features and labels to [0, 1]; constant columns get a
    unit range and map to 0."""
    if ds.normalized:
        return ds
    x_min = ds.x.min(axis=0)
    x_max = ds.x.max(axis=0)
    y_min = ds.y.min(axis=0)
    y_max = ds.y.max(axis=0)
    xn = (ds.x - x_min) / _safe_range(x_min, x_max)
    yn = (ds.y - y_min) / _safe_range(y_min, y_max)
    out = replace(ds, x=xn, y=yn, normalized=True)
    out.x_min, out.x_max, out.y_min, out.y_max = x_min, x_max, y_min, y_max
    return out


def denormalize(ds: Dataset) -> Dataset:
    if not ds.normalized:
        return ds
    if ds.x_min is None:
        raise DatasetError("normalized dataset without stored scales")
    x = ds.x * _safe_range(ds.x_min, ds.x_max) + ds.x_min
    y = ds.y * _safe_range(ds.y_min, ds.y_max) + ds.y_min
    out = replace(ds, x=x, y=y, normalized=False)
    out.x_min, out.x_max, out.y_min, out.y_max = ds.x_min, ds.x_max, ds.y_min, ds.y_max
    return out


# ----------------------------------------------------------------------
# labeling
# ----------------------------------------------------------------------

def label_scenario(case: NetworkCase, scenario: Scenario, **solver_opts):
    """Solve the carbon-blind baseline for one scenario and run the exact
    carbon accounting; returns ``(x_rows, y_rows, state, warm)`` or None when
    the baseline is infeasible."""
    from .dispatch import build_em, extract_state  # deferred: dispatch imports this module

    model, varmap = build_em(case, scenario)
    from .branchbound import solve_model
    res = solve_model(model, **solver_opts)
    if res.status not in ("optimal",):
        log.info("scenario %d skipped: baseline %s", scenario.id, res.status)
        return None
    state = extract_state(case, varmap, res.x)
    flows = carbon.cef_for_dispatch(case, state)
    xs = [feature_vector(case, state, t) for t in range(case.horizon)]
    ys = [label_vector(case, flows[t]) for t in range(case.horizon)]
    return xs, ys, state, res.warm


def build_dataset(case: NetworkCase, n: int, seed: int, **solver_opts) -> tuple[Dataset, int]:
    """Sample, solve, and label ``n`` scenarios; skipped (infeasible) scenarios
    are counted, not fatal.  Consecutive scenarios share a warm-start basis
    (the models are structurally identical)."""
    scenarios = sample_scenarios(case, n, seed)
    xs, ys, sids, pers = [], [], [], []
    skipped = 0
    warm = None
    for sc in scenarios:
        out = label_scenario(case, sc, start=warm, **solver_opts)
        if out is None:
            skipped += 1
            continue
        sxs, sys, _, warm = out
        for t in range(case.horizon):
            xs.append(sxs[t])
            ys.append(sys[t])
            sids.append(sc.id)
            pers.append(t)
    if not xs:
        raise DatasetError("all scenarios infeasible; no samples generated")
    meta = {
        "kind": "cef",
        "case_hash": case.content_hash(),
        "case_name": case.name,
        "seed": seed,
        "n_scenarios": n,
        "skipped": skipped,
    }
    ds = Dataset(np.array(xs), np.array(ys), np.array(sids, dtype=int),
                 np.array(pers, dtype=int), feature_names(case), label_names(case),
                 meta)
    return ds, skipped


def es_training_dataset(case: NetworkCase, storage_index: int, mode: str,
                        n: int, seed: int, idle_fraction: float = 0.2) -> Dataset:
    """Sampled storage-carbon transitions for one storage unit.

    Features are (psi_now, psi_prev, p, e_prev, e_node); the label is the
    end-of-period stored-carbon intensity from `storage_carbon_step`.
    ``mode`` selects charging or discharging transitions; a share of rows has
    zero power so the idle limit is represented.
    """
    if mode not in ("dis", "cha"):
        raise ValueError("mode must be 'dis' or 'cha'")
    sto = case.storages[storage_index]
    rng = np.random.default_rng(seed)
    e_hi = 1.5 * case.max_gci if case.max_gci > 0 else 1.0
    rows_x = np.empty((n, 5))
    rows_y = np.empty((n, 1))
    dt = case.dt
    for i in range(n):
        psi_prev = rng.uniform(sto.psi_min, sto.psi_max)
        psi_led = (1.0 - sto.leak_rate) * psi_prev
        e_prev = rng.uniform(0.0, e_hi)
        e_node = rng.uniform(0.0, e_hi)
        if mode == "dis":
            p_room = max(0.0, sto.eta_dis * (psi_led - sto.psi_min) / dt)
            p_max = min(sto.p_dis_max, p_room)
        else:
            p_room = max(0.0, (sto.psi_max - psi_led) / (sto.eta_ch * dt))
            p_max = min(sto.p_cha_max, p_room)
        p = 0.0 if rng.random() < idle_fraction else rng.uniform(0.0, p_max)
        if mode == "dis":
            psi_now = psi_led - (p / sto.eta_dis) * dt
            e_now, _ = carbon.storage_carbon_step(
                psi_prev, e_prev, 0.0, p, e_node, psi_now, dt,
                eta_ch=sto.eta_ch, eta_dis=sto.eta_dis, leak=sto.leak_rate)
        else:
            psi_now = psi_led + sto.eta_ch * p * dt
            e_now, _ = carbon.storage_carbon_step(
                psi_prev, e_prev, p, 0.0, e_node, psi_now, dt,
                eta_ch=sto.eta_ch, eta_dis=sto.eta_dis, leak=sto.leak_rate)
        rows_x[i] = (psi_now, psi_prev, p, e_prev, e_node)
        rows_y[i, 0] = e_now
    meta = {
        "kind": f"es_{mode}",
        "case_hash": case.content_hash(),
        "case_name": case.name,
        "seed": seed,
        "storage_index": storage_index,
    }
    return Dataset(rows_x, rows_y, np.zeros(n, dtype=int), np.arange(n, dtype=int),
                   ["psi_now", "psi_prev", "p", "e_prev", "e_node"], ["e_now"], meta)


# ----------------------------------------------------------------------
# persistence
# ----------------------------------------------------------------------

def write_dataset(ds: Dataset, directory) -> None:
    """CSV (`data.csv`) plus a JSON sidecar (`meta.json`); lossless at 17
    significant digits and byte-stable across runs."""
    from pathlib import Path
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    k, m = ds.n_features, ds.n_outputs
    header = ["scenario", "period"] + [f"x_{i}" for i in range(k)] + [f"y_{i}" for i in range(m)]
    lines = [",".join(header)]
    for r in range(len(ds)):
        vals = [str(int(ds.scenario_ids[r])), str(int(ds.periods[r]))]
        vals += [CSV_FMT % v for v in ds.x[r]]
        vals += [CSV_FMT % v for v in ds.y[r]]
        lines.append(",".join(vals))
    (directory / "data.csv").write_text("\n".join(lines) + "\n", encoding="ascii")
    meta = dict(ds.meta)
    meta.update({
        "feature_labels": ds.feature_labels,
        "output_labels": ds.output_labels,
        "normalized": ds.normalized,
        "n_samples": len(ds),
    })
    for key, arr in (("x_min", ds.x_min), ("x_max", ds.x_max),
                     ("y_min", ds.y_min), ("y_max", ds.y_max)):
        meta[key] = None if arr is None else [float(v) for v in arr]
    (directory / "meta.json").write_text(
        json.dumps(meta, sort_keys=True, indent=1) + "\n", encoding="ascii")


def read_dataset(directory) -> Dataset:
    from pathlib import Path
    directory = Path(directory)
    meta_path = directory / "meta.json"
    data_path = directory / "data.csv"
    if not meta_path.exists() or not data_path.exists():
        raise DatasetError(f"dataset directory {directory} is missing data.csv/meta.json")
    meta = json.loads(meta_path.read_text())
    text = data_path.read_text().splitlines()
    if not text:
        raise DatasetError("empty dataset file")
    header = text[0].split(",")
    k = sum(1 for h in header if h.startswith("x_"))
    m = sum(1 for h in header if h.startswith("y_"))
    expected = ["scenario", "period"] + [f"x_{i}" for i in range(k)] + [f"y_{i}" for i in range(m)]
    if header != expected or k == 0 or m == 0:
        raise DatasetError("unexpected dataset header")
    n = len(text) - 1
    x = np.empty((n, k))
    y = np.empty((n, m))
    sids = np.empty(n, dtype=int)
    pers = np.empty(n, dtype=int)
    for r, line in enumerate(text[1:], start=2):
        parts = line.split(",")
        if len(parts) != 2 + k + m:
            raise DatasetError(f"line {r}: expected {2 + k + m} fields, got {len(parts)}")
        try:
            sids[r - 2] = int(parts[0])
            pers[r - 2] = int(parts[1])
            x[r - 2] = [float(v) for v in parts[2:2 + k]]
            y[r - 2] = [float(v) for v in parts[2 + k:]]
        except ValueError as exc:
            raise DatasetError(f"line {r}: {exc}") from exc
    if not (np.isfinite(x).all() and np.isfinite(y).all()):
        raise DatasetError("dataset contains non-finite entries")
    scales = {}
    for key in ("x_min", "x_max", "y_min", "y_max"):
        val = meta.pop(key, None)
        scales[key] = None if val is None else np.asarray(val, dtype=float)
    feature_labels = meta.pop("feature_labels", [f"x_{i}" for i in range(k)])
    output_labels = meta.pop("output_labels", [f"y_{i}" for i in range(m)])
    normalized = bool(meta.pop("normalized", False))
    meta.pop("n_samples", None)
    ds = Dataset(x, y, sids, pers, feature_labels, output_labels, meta, normalized)
    ds.x_min, ds.x_max = scales["x_min"], scales["x_max"]
    ds.y_min, ds.y_max = scales["y_min"], scales["y_max"]
    return ds
