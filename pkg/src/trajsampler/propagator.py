"""Bang-bang extremal propagation with switch relocation and sensitivities.

The integrator is a Dormand-Prince 5(4) pair with FSAL and adaptive step
control. Every accepted step becomes a stored node; these nodes double as
the shooting-time candidates used by the screening objective, so nothing
is ever interpolated for downstream consumers.

Arc structure: throttle is fixed within an arc. When the switching
function changes sign across an accepted step, the switch time is located
inside that step by safeguarded Newton iteration on the re-integrated
switching function (analytic rate as the derivative), and the integration
restarts from the located state with the throttle flipped. The located
node satisfies |S| <= switch_tol.

Sensitivities: the 14x14 state transition matrix is integrated jointly
with the state (error control stays on the state components, so the step
sequence is identical with and without the variational block). The STM is
reset to identity at every switch and the per-arc blocks are chained with
rank-one discontinuity maps that account for the moving switch time:

    Psi = I + (ydot_after - ydot_before) (dS/dy) / Sdot_before
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from numba import njit

from . import dynamics
from .dynamics import _jac, _rhs, switching_function, switching_rate
from .errors import (
    CollisionError,
    DegeneratePrimerError,
    GrazingSwitchError,
    PropagationError,
    SingularArcError,
    StepSizeUnderflowError,
)

# Dormand-Prince 5(4) tableau. The problem is autonomous so the stage
# abscissae are not needed.
A21 = 1.0 / 5.0
A31, A32 = 3.0 / 40.0, 9.0 / 40.0
A41, A42, A43 = 44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0
A51, A52, A53, A54 = 19372.0 / 6561.0, -25360.0 / 2187.0, 64448.0 / 6561.0, -212.0 / 729.0
A61, A62, A63, A64, A65 = (
    9017.0 / 3168.0,
    -355.0 / 33.0,
    46732.0 / 5247.0,
    49.0 / 176.0,
    -5103.0 / 18656.0,
)
B1, B3, B4, B5, B6 = 35.0 / 384.0, 500.0 / 1113.0, 125.0 / 192.0, -2187.0 / 6784.0, 11.0 / 84.0
E1, E3, E4, E5, E6, E7 = (
    71.0 / 57600.0,
    -71.0 / 16695.0,
    71.0 / 1920.0,
    -17253.0 / 339200.0,
    22.0 / 525.0,
    -1.0 / 40.0,
)

# integration abort codes
OK = 0
HIT_PRIMARY = 1
HIT_SECONDARY = 2
DEGENERATE_PRIMER = 3
SINGULAR_ARC = 4
STEP_UNDERFLOW = 5
NODE_OVERFLOW = 6
GRAZING_SWITCH = 7
SWITCH_LOCATE_FAILED = 8
SWITCH_OVERFLOW = 9

N = dynamics.STATE_DIM


@njit(cache=True)
def _mm(a, b, out):
    for i in range(N):
        for j in range(N):
            s = 0.0
            for k in range(N):
                s += a[i, k] * b[k, j]
            out[i, j] = s


@njit(cache=True)
def _step_core(y, phi, h, mu, tmax, c_ex, throttle, with_stm, K, KP, AB, YT, PT, ynew, phinew, atol, rtol):
    """One RK5(4) attempt of size h. K[0] (and KP[0]) must hold f(y).

    Fills ynew, K[6] = f(ynew) and, with the variational block, phinew
    and KP[6]. Returns the scaled error norm over the state components.
    """
    # stage 2
    for i in range(N):
        YT[i] = y[i] + h * (A21 * K[0, i])
    if with_stm:
        for i in range(N):
            for j in range(N):
                PT[i, j] = phi[i, j] + h * (A21 * KP[0, i, j])
        _jac(YT, mu, tmax, c_ex, throttle, AB)
        _mm(AB, PT, KP[1])
    _rhs(YT, mu, tmax, c_ex, throttle, K[1])

    # stage 3
    for i in range(N):
        YT[i] = y[i] + h * (A31 * K[0, i] + A32 * K[1, i])
    if with_stm:
        for i in range(N):
            for j in range(N):
                PT[i, j] = phi[i, j] + h * (A31 * KP[0, i, j] + A32 * KP[1, i, j])
        _jac(YT, mu, tmax, c_ex, throttle, AB)
        _mm(AB, PT, KP[2])
    _rhs(YT, mu, tmax, c_ex, throttle, K[2])

    # stage 4
    for i in range(N):
        YT[i] = y[i] + h * (A41 * K[0, i] + A42 * K[1, i] + A43 * K[2, i])
    if with_stm:
        for i in range(N):
            for j in range(N):
                PT[i, j] = phi[i, j] + h * (
                    A41 * KP[0, i, j] + A42 * KP[1, i, j] + A43 * KP[2, i, j]
                )
        _jac(YT, mu, tmax, c_ex, throttle, AB)
        _mm(AB, PT, KP[3])
    _rhs(YT, mu, tmax, c_ex, throttle, K[3])

    # stage 5
    for i in range(N):
        YT[i] = y[i] + h * (
            A51 * K[0, i] + A52 * K[1, i] + A53 * K[2, i] + A54 * K[3, i]
        )
    if with_stm:
        for i in range(N):
            for j in range(N):
                PT[i, j] = phi[i, j] + h * (
                    A51 * KP[0, i, j]
                    + A52 * KP[1, i, j]
                    + A53 * KP[2, i, j]
                    + A54 * KP[3, i, j]
                )
        _jac(YT, mu, tmax, c_ex, throttle, AB)
        _mm(AB, PT, KP[4])
    _rhs(YT, mu, tmax, c_ex, throttle, K[4])

    # stage 6
    for i in range(N):
        YT[i] = y[i] + h * (
            A61 * K[0, i] + A62 * K[1, i] + A63 * K[2, i] + A64 * K[3, i] + A65 * K[4, i]
        )
    if with_stm:
        for i in range(N):
            for j in range(N):
                PT[i, j] = phi[i, j] + h * (
                    A61 * KP[0, i, j]
                    + A62 * KP[1, i, j]
                    + A63 * KP[2, i, j]
                    + A64 * KP[3, i, j]
                    + A65 * KP[4, i, j]
                )
        _jac(YT, mu, tmax, c_ex, throttle, AB)
        _mm(AB, PT, KP[5])
    _rhs(YT, mu, tmax, c_ex, throttle, K[5])

    # 5th order solution (stage 7 = FSAL)
    for i in range(N):
        ynew[i] = y[i] + h * (
            B1 * K[0, i] + B3 * K[2, i] + B4 * K[3, i] + B5 * K[4, i] + B6 * K[5, i]
        )
    _rhs(ynew, mu, tmax, c_ex, throttle, K[6])

    err = 0.0
    for i in range(N):
        e = h * (
            E1 * K[0, i]
            + E3 * K[2, i]
            + E4 * K[3, i]
            + E5 * K[4, i]
            + E6 * K[5, i]
            + E7 * K[6, i]
        )
        ay = abs(y[i])
        an = abs(ynew[i])
        sc = atol + rtol * (ay if ay > an else an)
        r = e / sc
        err += r * r
    err = math.sqrt(err / N)

    if with_stm:
        for i in range(N):
            for j in range(N):
                phinew[i, j] = phi[i, j] + h * (
                    B1 * KP[0, i, j]
                    + B3 * KP[2, i, j]
                    + B4 * KP[3, i, j]
                    + B5 * KP[4, i, j]
                    + B6 * KP[5, i, j]
                )
        _jac(ynew, mu, tmax, c_ex, throttle, AB)
        _mm(AB, phinew, KP[6])
    return err


@njit(cache=True)
def _land(y0, phi0, dt, mu, tmax, c_ex, throttle, with_stm, K, KP, AB, YT, PT, ywork, phiwork, yout, phiout, atol, rtol):
    """Integrate exactly dt from y0 with two fixed half-steps.

    Used to re-integrate into a switch bracket; dt never exceeds one
    accepted adaptive step, so two halves keep the local error at or
    below the error-controlled level. Smooth in dt, which Newton needs.
    """
    half = 0.5 * dt
    for i in range(N):
        ywork[i] = y0[i]
    if with_stm:
        for i in range(N):
            for j in range(N):
                phiwork[i, j] = phi0[i, j]
    _rhs(ywork, mu, tmax, c_ex, throttle, K[0])
    if with_stm:
        _jac(ywork, mu, tmax, c_ex, throttle, AB)
        _mm(AB, phiwork, KP[0])
    _step_core(ywork, phiwork, half, mu, tmax, c_ex, throttle, with_stm, K, KP, AB, YT, PT, yout, phiout, atol, rtol)
    for i in range(N):
        ywork[i] = yout[i]
    if with_stm:
        for i in range(N):
            for j in range(N):
                phiwork[i, j] = phiout[i, j]
    for i in range(N):
        K[0, i] = K[6, i]
    if with_stm:
        for i in range(N):
            for j in range(N):
                KP[0, i, j] = KP[6, i, j]
    _step_core(ywork, phiwork, half, mu, tmax, c_ex, throttle, with_stm, K, KP, AB, YT, PT, yout, phiout, atol, rtol)


@njit(cache=True)
def _psi_fill(y, mu, tmax, c_ex, thr_old, thr_new, sdot_old, fa, fb, psi):
    """Discontinuity map at a located switch, from the pre-switch side."""
    _rhs(y, mu, tmax, c_ex, thr_new, fa)
    _rhs(y, mu, tmax, c_ex, thr_old, fb)
    m = y[6]
    lm = y[13]
    lvx, lvy, lvz = y[10], y[11], y[12]
    lv = math.sqrt(lvx * lvx + lvy * lvy + lvz * lvz)
    for i in range(N):
        for j in range(N):
            psi[i, j] = 1.0 if i == j else 0.0
    inv = 1.0 / sdot_old
    for i in range(N):
        dyi = (fa[i] - fb[i]) * inv
        if dyi != 0.0:
            psi[i, 6] += dyi * lm / c_ex
            psi[i, 10] += dyi * lvx / lv
            psi[i, 11] += dyi * lvy / lv
            psi[i, 12] += dyi * lvz / lv
            psi[i, 13] += dyi * m / c_ex


@njit(cache=True)
def _node_checks(y, throttle, mu, tmax, c_ex, collision_radius, degenerate_tol, switch_tol, singular_rate_tol, is_switch_node):
    x, yy, z = y[0], y[1], y[2]
    d1x = x + mu
    d2x = x - 1.0 + mu
    if math.sqrt(d1x * d1x + yy * yy + z * z) < collision_radius:
        return HIT_PRIMARY
    if mu > 0.0 and math.sqrt(d2x * d2x + yy * yy + z * z) < collision_radius:
        return HIT_SECONDARY
    lv = math.sqrt(y[10] * y[10] + y[11] * y[11] + y[12] * y[12])
    if throttle == 1 and lv < degenerate_tol:
        return DEGENERATE_PRIMER
    if not is_switch_node and lv > degenerate_tol:
        s = switching_function(y, c_ex)
        if abs(s) < switch_tol:
            sdot = switching_rate(y, mu, tmax, c_ex, throttle)
            if abs(sdot) < singular_rate_tol:
                return SINGULAR_ARC
    return OK


@njit(cache=True)
def _integrate(
    y0,
    t_max,
    mu,
    tmax,
    c_ex,
    rel_tol,
    abs_tol,
    max_step,
    switch_tol,
    collision_radius,
    degenerate_tol,
    grazing_rate_tol,
    singular_rate_tol,
    with_stm,
    store_products,
    ts,
    ys,
    ss,
    thr,
    sw_times,
    sw_nodes,
    sw_denoms,
    sw_deltas,
    psis,
    arc_phis,
    products,
    p_total,
):
    """Main integration loop. Returns (status, n_nodes, n_switches, t_abort)."""
    max_nodes = ts.shape[0]
    max_switches = sw_times.shape[0]

    y = y0.copy()
    ynew = np.empty(N)
    ywork = np.empty(N)
    yloc = np.empty(N)
    YT = np.empty(N)
    fa = np.empty(N)
    fb = np.empty(N)
    K = np.empty((7, N))
    if with_stm:
        KP = np.empty((7, N, N))
        AB = np.empty((N, N))
        PT = np.empty((N, N))
        phi = np.eye(N)
        phinew = np.empty((N, N))
        philoc = np.empty((N, N))
        phiwork = np.empty((N, N))
        p_base = np.eye(N)
        scratch = np.empty((N, N))
    else:
        KP = np.empty((1, 1, 1))
        AB = np.empty((1, 1))
        PT = np.empty((1, 1))
        phi = np.eye(1)
        phinew = np.empty((1, 1))
        philoc = np.empty((1, 1))
        phiwork = np.empty((1, 1))
        p_base = np.eye(1)
        scratch = np.empty((1, 1))

    # initial throttle from the sign of S; on a grazing start use the
    # coast-side rate to decide which side the arc is entering
    s0 = switching_function(y, c_ex)
    if s0 > switch_tol:
        throttle = 1
    elif s0 < -switch_tol:
        throttle = 0
    else:
        lv0 = math.sqrt(y[10] * y[10] + y[11] * y[11] + y[12] * y[12])
        if lv0 <= degenerate_tol:
            throttle = 0
        else:
            throttle = 1 if switching_rate(y, mu, tmax, c_ex, 0) > 0.0 else 0
    arc_sign = 1.0 if throttle == 1 else -1.0

    t = 0.0
    n = 0
    nsw = 0
    ts[0] = 0.0
    for i in range(N):
        ys[0, i] = y[i]
    ss[0] = s0
    thr[0] = throttle
    if with_stm and store_products:
        for i in range(N):
            for j in range(N):
                products[0, i, j] = 1.0 if i == j else 0.0
    code = _node_checks(y, throttle, mu, tmax, c_ex, collision_radius, degenerate_tol, switch_tol, singular_rate_tol, False)
    if code != OK:
        return code, 1, 0, 0.0

    h = max_step if max_step < 1e-3 else 1e-3
    if h > t_max:
        h = t_max
    k1_valid = False

    while t < t_max:
        if n + 1 >= max_nodes:
            return NODE_OVERFLOW, n + 1, nsw, t
        if h > max_step:
            h = max_step
        if t + h > t_max:
            h = t_max - t
        if not k1_valid:
            _rhs(y, mu, tmax, c_ex, throttle, K[0])
            if with_stm:
                _jac(y, mu, tmax, c_ex, throttle, AB)
                _mm(AB, phi, KP[0])
            k1_valid = True
        err = _step_core(y, phi, h, mu, tmax, c_ex, throttle, with_stm, K, KP, AB, YT, PT, ynew, phinew, abs_tol, rel_tol)
        if err > 1.0:
            fac = 0.9 * err ** -0.2
            if fac < 0.2:
                fac = 0.2
            if fac > 1.0:
                fac = 1.0
            h *= fac
            if h < 1e-14 * (1.0 if t < 1.0 else t):
                return STEP_UNDERFLOW, n + 1, nsw, t
            continue

        s_new = switching_function(ynew, c_ex)
        if s_new * arc_sign < -switch_tol:
            # switch inside (t, t+h): safeguarded Newton on the landed S
            if nsw >= max_switches:
                return SWITCH_OVERFLOW, n + 1, nsw, t
            s_at_node = ss[n]
            s_lo = s_at_node if s_at_node * arc_sign > 0.0 else 0.0
            lo = 0.0
            hi = h
            # secant guess from the bracket endpoints
            dt = h * s_lo / (s_lo - s_new) if s_lo != 0.0 else 0.5 * h
            if dt <= 0.0 or dt >= h:
                dt = 0.5 * h
            best_dt = dt
            best_s = 1e300
            located = False
            for _ in range(80):
                _land(y, phi, dt, mu, tmax, c_ex, throttle, False, K, KP, AB, YT, PT, ywork, phiwork, yloc, philoc, abs_tol, rel_tol)
                s_here = switching_function(yloc, c_ex)
                if abs(s_here) < best_s:
                    best_s = abs(s_here)
                    best_dt = dt
                if abs(s_here) <= switch_tol:
                    located = True
                    break
                if s_here * arc_sign > 0.0:
                    lo = dt
                else:
                    hi = dt
                sdot_here = switching_rate(yloc, mu, tmax, c_ex, throttle)
                step_ok = False
                if abs(sdot_here) > 0.0:
                    dt_next = dt - s_here / sdot_here
                    if lo < dt_next < hi:
                        dt = dt_next
                        step_ok = True
                if not step_ok:
                    dt = 0.5 * (lo + hi)
                if hi - lo < 1e-16 * (1.0 if t + hi < 1.0 else t + hi):
                    break
            if not located:
                # bracket collapsed; accept the best point only if it is
                # within an order of magnitude of the target
                if best_s <= 10.0 * switch_tol:
                    dt = best_dt
                else:
                    return SWITCH_LOCATE_FAILED, n + 1, nsw, t
            # final landing, with the variational block this time
            _land(y, phi, dt, mu, tmax, c_ex, throttle, with_stm, K, KP, AB, YT, PT, ywork, phiwork, yloc, philoc, abs_tol, rel_tol)
            sdot_old = switching_rate(yloc, mu, tmax, c_ex, throttle)
            if abs(sdot_old) < singular_rate_tol:
                return SINGULAR_ARC, n + 1, nsw, t + dt
            if abs(sdot_old) < grazing_rate_tol:
                return GRAZING_SWITCH, n + 1, nsw, t + dt
            new_throttle = 1 - throttle
            t = t + dt
            for i in range(N):
                y[i] = yloc[i]
            n += 1
            ts[n] = t
            for i in range(N):
                ys[n, i] = y[i]
            ss[n] = switching_function(y, c_ex)
            thr[n] = new_throttle
            sw_times[nsw] = t
            sw_nodes[nsw] = n
            sw_denoms[nsw] = sdot_old
            # delta = T(before) - T(after)
            sw_deltas[nsw] = tmax if throttle == 1 else -tmax
            if with_stm:
                _mm(philoc, p_base, scratch)  # STM up to the switch, left limit
                if store_products:
                    for i in range(N):
                        for j in range(N):
                            products[n, i, j] = scratch[i, j]
                for i in range(N):
                    for j in range(N):
                        arc_phis[nsw, i, j] = philoc[i, j]
                _psi_fill(y, mu, tmax, c_ex, throttle, new_throttle, sdot_old, fa, fb, psis[nsw])
                _mm(psis[nsw], scratch, p_base)
                for i in range(N):
                    for j in range(N):
                        phi[i, j] = 1.0 if i == j else 0.0
            nsw += 1
            throttle = new_throttle
            arc_sign = -arc_sign
            code = _node_checks(y, throttle, mu, tmax, c_ex, collision_radius, degenerate_tol, switch_tol, singular_rate_tol, True)
            if code != OK:
                return code, n + 1, nsw, t
            k1_valid = False
            continue

        # plain accepted step
        t = t + h if t + h < t_max else t_max
        for i in range(N):
            y[i] = ynew[i]
        n += 1
        ts[n] = t
        for i in range(N):
            ys[n, i] = y[i]
        ss[n] = s_new
        thr[n] = throttle
        if with_stm:
            for i in range(N):
                for j in range(N):
                    phi[i, j] = phinew[i, j]
            if store_products:
                _mm(phi, p_base, scratch)
                for i in range(N):
                    for j in range(N):
                        products[n, i, j] = scratch[i, j]
        code = _node_checks(y, throttle, mu, tmax, c_ex, collision_radius, degenerate_tol, switch_tol, singular_rate_tol, False)
        if code != OK:
            return code, n + 1, nsw, t
        for i in range(N):
            K[0, i] = K[6, i]
        if with_stm:
            for i in range(N):
                for j in range(N):
                    KP[0, i, j] = KP[6, i, j]
        k1_valid = True
        if err == 0.0:
            fac = 5.0
        else:
            fac = 0.9 * err ** -0.2
            if fac < 0.2:
                fac = 0.2
            if fac > 5.0:
                fac = 5.0
        h *= fac

    if with_stm:
        _mm(phi, p_base, p_total)
        for i in range(N):
            for j in range(N):
                arc_phis[nsw, i, j] = phi[i, j]
    return OK, n + 1, nsw, t


@dataclass(frozen=True)
class PropagatorOptions:
    """Tolerances and guards for extremal propagation (all in NU)."""

    rel_tol: float = 1e-12
    abs_tol: float = 1e-12
    max_step: float = 1e-2
    switch_tol: float = 1e-13
    collision_radius: float = 1e-6
    degenerate_primer_tol: float = 1e-12
    grazing_rate_tol: float = 1e-8
    singular_rate_tol: float = 1e-10
    max_switches: int = 4096
    node_margin: int = 8


@dataclass
class Trajectory:
    """Propagation output sampled at the accepted integrator nodes."""

    times: np.ndarray
    states: np.ndarray
    switching: np.ndarray
    throttle: np.ndarray
    switch_times: np.ndarray
    switch_node_indices: np.ndarray
    t_final: float
    mu: float
    thrust: float
    exhaust_velocity: float

    @property
    def n_nodes(self) -> int:
        return self.times.shape[0]

    @property
    def n_switches(self) -> int:
        return self.switch_times.shape[0]

    def node_index_at(self, tau: float, tol: float = 1e-9) -> int:
        """Index of the node at time tau (must match a node)."""
        i = int(np.searchsorted(self.times, tau))
        for j in (i - 1, i, i + 1):
            if 0 <= j < self.n_nodes and abs(self.times[j] - tau) <= tol:
                return j
        raise ValueError(f"no node at t={tau}")


@dataclass
class StmChain:
    """Chained state-transition structure over a propagated extremal.

    total is the fixed-time sensitivity d y(t_final) / d y(0) including
    every per-arc STM block and every switch discontinuity map.
    node_products, when stored, give the same quantity at each node
    (left-sided limits at switch nodes).
    """

    total: np.ndarray
    psis: np.ndarray
    arc_phis: np.ndarray
    switch_times: np.ndarray
    switch_node_indices: np.ndarray
    denominators: np.ndarray
    delta_thrust: np.ndarray
    node_products: np.ndarray | None = None

    def sensitivity_at_node(self, index: int) -> np.ndarray:
        if self.node_products is None:
            raise ValueError("node products were not stored")
        return self.node_products[index]

    def total_without_discontinuities(self) -> np.ndarray:
        """Chain of the per-arc STM blocks with every switch map ablated.

        Exists for diagnostics: comparing this against finite differences
        shows how much accuracy the discontinuity maps carry.
        """
        out = np.eye(N)
        for k in range(self.arc_phis.shape[0]):
            out = self.arc_phis[k] @ out
        return out


_STATUS_MESSAGES = {
    HIT_PRIMARY: "state entered the primary's collision radius",
    HIT_SECONDARY: "state entered the secondary's collision radius",
    DEGENERATE_PRIMER: "velocity costate vanished on a thrust arc",
    SINGULAR_ARC: "switching function and rate both near zero (singular arc?)",
    STEP_UNDERFLOW: "adaptive step underflow",
    NODE_OVERFLOW: "node buffer overflow",
    GRAZING_SWITCH: "switch rate below discontinuity-map tolerance",
    SWITCH_LOCATE_FAILED: "switch location did not converge",
    SWITCH_OVERFLOW: "too many switches",
}

_STATUS_ERRORS = {
    HIT_PRIMARY: CollisionError,
    HIT_SECONDARY: CollisionError,
    DEGENERATE_PRIMER: DegeneratePrimerError,
    SINGULAR_ARC: SingularArcError,
    STEP_UNDERFLOW: StepSizeUnderflowError,
    NODE_OVERFLOW: PropagationError,
    GRAZING_SWITCH: GrazingSwitchError,
    SWITCH_LOCATE_FAILED: PropagationError,
    SWITCH_OVERFLOW: PropagationError,
}


def _run(y0, t_max, system, spacecraft, options, with_stm, store_products):
    y0 = np.asarray(y0, dtype=float)
    if y0.shape != (N,):
        raise ValueError(f"expected a {N}-dim combined state, got shape {y0.shape}")
    if t_max <= 0.0:
        raise ValueError(f"t_max must be positive, got {t_max}")
    opt = options or PropagatorOptions()

    max_nodes = int(t_max / opt.max_step * opt.node_margin) + 2048
    ts = np.empty(max_nodes)
    ys = np.empty((max_nodes, N))
    ss = np.empty(max_nodes)
    thr = np.empty(max_nodes, dtype=np.uint8)
    sw_times = np.empty(opt.max_switches)
    sw_nodes = np.empty(opt.max_switches, dtype=np.int64)
    sw_denoms = np.empty(opt.max_switches)
    sw_deltas = np.empty(opt.max_switches)
    if with_stm:
        psis = np.empty((opt.max_switches, N, N))
        arc_phis = np.empty((opt.max_switches + 1, N, N))
        products = np.empty((max_nodes if store_products else 1, N, N))
    else:
        psis = np.empty((1, N, N))
        arc_phis = np.empty((1, N, N))
        products = np.empty((1, N, N))
    p_total = np.eye(N)

    status, n_nodes, n_sw, t_abort = _integrate(
        y0,
        float(t_max),
        system.mu,
        spacecraft.thrust,
        spacecraft.exhaust_velocity,
        opt.rel_tol,
        opt.abs_tol,
        opt.max_step,
        opt.switch_tol,
        opt.collision_radius,
        opt.degenerate_primer_tol,
        opt.grazing_rate_tol,
        opt.singular_rate_tol,
        with_stm,
        store_products,
        ts,
        ys,
        ss,
        thr,
        sw_times,
        sw_nodes,
        sw_denoms,
        sw_deltas,
        psis,
        arc_phis,
        products,
        p_total,
    )
    if status != OK:
        exc = _STATUS_ERRORS[status]
        raise exc(f"{_STATUS_MESSAGES[status]} at t={t_abort:.6f}", status=status, t=t_abort)

    traj = Trajectory(
        times=ts[:n_nodes].copy(),
        states=ys[:n_nodes].copy(),
        switching=ss[:n_nodes].copy(),
        throttle=thr[:n_nodes].copy(),
        switch_times=sw_times[:n_sw].copy(),
        switch_node_indices=sw_nodes[:n_sw].copy(),
        t_final=float(ts[n_nodes - 1]),
        mu=system.mu,
        thrust=spacecraft.thrust,
        exhaust_velocity=spacecraft.exhaust_velocity,
    )
    if not with_stm:
        return traj, None
    chain = StmChain(
        total=p_total.copy(),
        psis=psis[:n_sw].copy(),
        arc_phis=arc_phis[: n_sw + 1].copy(),
        switch_times=sw_times[:n_sw].copy(),
        switch_node_indices=sw_nodes[:n_sw].copy(),
        denominators=sw_denoms[:n_sw].copy(),
        delta_thrust=sw_deltas[:n_sw].copy(),
        node_products=products[:n_nodes].copy() if store_products else None,
    )
    return traj, chain


def propagate(y0, t_max, system, spacecraft, options: PropagatorOptions | None = None) -> Trajectory:
    """Propagate a combined state for t_max NU, relocating every switch."""
    traj, _ = _run(y0, t_max, system, spacecraft, options, False, False)
    return traj


def propagate_with_stm(
    y0,
    t_max,
    system,
    spacecraft,
    options: PropagatorOptions | None = None,
    store_node_products: bool = True,
):
    """Propagate with the chained state-transition structure.

    The step sequence is identical to propagate() for the same inputs;
    error control never looks at the variational block.
    """
    return _run(y0, t_max, system, spacecraft, options, True, store_node_products)


def discontinuity_map(y_switch, system, spacecraft, throttle_before: int):
    """Rank-one switch discontinuity map at a state with S = 0.

    Returns (psi, denominator) where denominator is the switching rate
    on the incoming arc. Raises GrazingSwitchError when it is too small
    to divide by.
    """
    y = np.asarray(y_switch, dtype=float)
    opt = PropagatorOptions()
    sdot = switching_rate(y, system.mu, spacecraft.thrust, spacecraft.exhaust_velocity, throttle_before)
    if abs(sdot) < opt.grazing_rate_tol:
        raise GrazingSwitchError(
            f"switching rate {sdot:.3e} below tolerance {opt.grazing_rate_tol:.0e}",
            status=GRAZING_SWITCH,
        )
    psi = np.empty((N, N))
    fa = np.empty(N)
    fb = np.empty(N)
    _psi_fill(
        y,
        system.mu,
        spacecraft.thrust,
        spacecraft.exhaust_velocity,
        throttle_before,
        1 - throttle_before,
        sdot,
        fa,
        fb,
        psi,
    )
    return psi, sdot


def boundary_sensitivities(total: np.ndarray):
    """Split a chained STM into terminal-constraint blocks.

    G1 (6x6) is minus the sensitivity of final (r, v) to the initial
    (lam_r, lam_v); G2 (6,) the same for the final mass. The mass-costate
    column is excluded because lam_m(t0) is pinned.
    """
    g1 = -total[0:6, 7:13]
    g2 = -total[6, 7:13]
    return g1, g2
