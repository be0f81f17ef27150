"""Post-processing of screened costate samples.

Turns collected records into physical objectives (propellant cost in m/s,
shooting time in days), filters them for feasibility, extracts the
non-dominated subset, and measures front quality as dominated volume in a
normalized objective box. Also flattens per-stage iteration traces into
plain columns for plotting.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from . import dynamics, systems

logger = logging.getLogger(__name__)

FEASIBLE_TOL = 5e-5


@dataclass(frozen=True)
class ObjectivePoint:
    """One sample mapped to the two mission objectives."""

    dv_mps: float
    tof_days: float
    source_id: int = -1

    def __post_init__(self):
        if self.dv_mps < 0.0 or self.tof_days < 0.0:
            raise ValueError("objectives must be nonnegative")


@dataclass(frozen=True)
class HypervolumeConfig:
    """Normalization box and reference point for front quality."""

    tof_bounds_days: tuple = (124.08, 228.41)
    dv_bounds_mps: tuple = (173.68, 193.67)
    reference: tuple = (1.0, 1.0)

    def __post_init__(self):
        for lo, hi in (self.tof_bounds_days, self.dv_bounds_mps):
            if not lo < hi:
                raise ValueError(f"bounds must be increasing: ({lo}, {hi})")


def feasible_filter(records, tol: float = FEASIBLE_TOL):
    """Records whose boundary defect is strictly below the tolerance."""
    return [r for r in records if r.e < tol]


def delta_v(m_final_frac: float, c_nu: float, units: systems.UnitScales) -> float:
    """Propellant cost in m/s of burning down to the given mass fraction.

    The exhaust velocity is supplied in natural units together with the
    scales it was normalized by.
    """
    if not 0.0 < m_final_frac <= 1.0:
        raise ValueError(f"final mass fraction out of (0, 1]: {m_final_frac}")
    return c_nu * units.v_unit_ms * np.log(1.0 / m_final_frac)


def points_from_records(records, spacecraft: systems.SpacecraftConfig | None = None,
                        spacecraft_units: systems.UnitScales = systems.JUPITER_EUROPA):
    """Map records to objective points.

    Flight time converts through the record's own interpolated time unit;
    the exhaust velocity converts through the scales the spacecraft
    constants were built with.
    """
    if spacecraft is None:
        spacecraft = systems.default_spacecraft()
    points = []
    for i, r in enumerate(records):
        units = systems.interpolate_system(r.alpha).units
        points.append(ObjectivePoint(
            dv_mps=float(delta_v(1.0 - r.dm_frac, spacecraft.exhaust_velocity, spacecraft_units)),
            tof_days=float(r.tau_s * units.tu_days),
            source_id=i,
        ))
    return points


def _dominates(a: ObjectivePoint, b: ObjectivePoint) -> bool:
    return (a.dv_mps <= b.dv_mps and a.tof_days <= b.tof_days
            and (a.dv_mps < b.dv_mps or a.tof_days < b.tof_days))


def pareto_front(points):
    """Non-dominated subset under componentwise minimization; ties kept.

    Sweep over points sorted by cost: a point survives iff no cheaper (or
    equally cheap) point reached a strictly smaller flight time.
    """
    if not points:
        return []
    order = sorted(range(len(points)), key=lambda i: (points[i].dv_mps, points[i].tof_days))
    front = []
    best_tof = np.inf
    i = 0
    while i < len(order):
        # handle ties in cost as one group against the sweep minimum
        j = i
        while j < len(order) and points[order[j]].dv_mps == points[order[i]].dv_mps:
            j += 1
        group = order[i:j]
        group_tof = points[group[0]].tof_days
        if group_tof < best_tof:
            front.extend(k for k in group if points[k].tof_days == group_tof)
            best_tof = group_tof
        i = j
    front.sort()
    return [points[k] for k in front]


def normalize_points(points, cfg: HypervolumeConfig):
    """Map points into the unit box; returns (n-by-2 array, clipped mask).

    Column 0 is normalized cost, column 1 normalized flight time. Points
    outside the box are clipped so the front stays fully inside it.
    """
    dv_lo, dv_hi = cfg.dv_bounds_mps
    tof_lo, tof_hi = cfg.tof_bounds_days
    raw = np.array([[(p.dv_mps - dv_lo) / (dv_hi - dv_lo),
                     (p.tof_days - tof_lo) / (tof_hi - tof_lo)] for p in points])
    raw = raw.reshape(-1, 2)
    clipped = np.any((raw < 0.0) | (raw > 1.0), axis=1)
    if np.any(clipped):
        logger.warning("%d of %d points fall outside the normalization box and were clipped",
                       int(clipped.sum()), len(points))
    return np.clip(raw, 0.0, 1.0), clipped


def hypervolume(front, cfg: HypervolumeConfig | None = None) -> float:
    """Volume dominated by the front inside the normalized unit box.

    Exact two-objective sweep: after sorting by cost, each point
    contributes a rectangle between its flight time and the best one seen
    so far, measured against the reference corner.
    """
    cfg = cfg if cfg is not None else HypervolumeConfig()
    front = pareto_front(list(front))
    if not front:
        return 0.0
    pts, _ = normalize_points(front, cfg)
    ref_x, ref_y = cfg.reference
    order = np.lexsort((pts[:, 1], pts[:, 0]))
    total = 0.0
    best_y = ref_y
    for i in order:
        x, y = pts[i]
        if y < best_y and x < ref_x:
            total += (ref_x - x) * (best_y - y)
            best_y = y
    return total


def hamiltonian_at_arrival(ctx, record) -> float:
    """Hamiltonian of the record's extremal, evaluated via its invariance.

    The extremal flow conserves the Hamiltonian, so the arrival value
    equals the departure value, which is available without propagation.
    """
    from .screening import initial_extremal_state

    sc = ctx.spacecraft
    y0 = initial_extremal_state(ctx.initial_rv, record.lam)
    throttle = 1.0 if dynamics.switching_function(y0, sc.exhaust_velocity) > 0.0 else 0.0
    return dynamics.hamiltonian(y0, ctx.mu, sc.thrust, sc.exhaust_velocity, throttle)


def summarize_traces(traces) -> dict:
    """Flatten stage traces into one row per stage.

    Returns plain columns: stage index, family parameter, iteration
    count, mean and minimum of the per-iteration mean objective, mean
    components, and the mean acceptance rate.
    """
    cols = {key: [] for key in ("stage", "alpha", "iterations", "j_mean", "j_min",
                                "e_mean", "dm_mean", "tau_s_mean", "acceptance")}
    for t in traces:
        cols["stage"].append(t.stage)
        cols["alpha"].append(t.alpha)
        cols["iterations"].append(t.iterations.size)
        cols["j_mean"].append(float(np.nanmean(t.mean_j)) if t.mean_j.size else np.nan)
        cols["j_min"].append(float(np.nanmin(t.mean_j)) if t.mean_j.size else np.nan)
        cols["e_mean"].append(float(np.nanmean(t.mean_e)) if t.mean_e.size else np.nan)
        cols["dm_mean"].append(float(np.nanmean(t.mean_dm)) if t.mean_dm.size else np.nan)
        cols["tau_s_mean"].append(float(np.nanmean(t.mean_tau_s)) if t.mean_tau_s.size else np.nan)
        cols["acceptance"].append(float(np.nanmean(t.acceptance)) if t.acceptance.size else np.nan)
    return {k: np.asarray(v) for k, v in cols.items()}


def write_objective_table(path, points, front=None, *, manifest_hash: str = "") -> None:
    """Columnar text export of the objective cloud with a front marker."""
    front_ids = {id(p) for p in (front or [])}
    marked = {(p.dv_mps, p.tof_days, p.source_id) for p in (front or [])}
    with open(path, "w") as fh:
        fh.write(f"# manifest: {manifest_hash}\n")
        fh.write("# dv_mps tof_days source_id on_front\n")
        for p in points:
            on_front = int(id(p) in front_ids
                           or (p.dv_mps, p.tof_days, p.source_id) in marked)
            fh.write(f"{p.dv_mps!r} {p.tof_days!r} {p.source_id} {on_front}\n")


def write_trace_table(path, traces, *, manifest_hash: str = "") -> None:
    """Columnar text export of per-stage summaries."""
    table = summarize_traces(traces)
    keys = list(table.keys())
    with open(path, "w") as fh:
        fh.write(f"# manifest: {manifest_hash}\n")
        fh.write("# " + " ".join(keys) + "\n")
        for i in range(len(table["stage"])):
            fh.write(" ".join(repr(table[k][i].item()) for k in keys) + "\n")
