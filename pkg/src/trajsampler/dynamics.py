"""Extremal dynamics for low-thrust motion in the CR3BP.

The combined state is a 14-vector

    y = (r, v, m, lam_r, lam_v, lam_m)

in the rotating frame, natural units, mass normalized by the initial wet
mass. Control is bang-bang: thrust direction opposes the velocity
costate, throttle follows the sign of the switching function

    S = |lam_v| + lam_m * m / c.

Throttle is passed in explicitly everywhere (0 or 1). The propagator owns
the arc structure; these functions never look at sign(S) themselves, so a
single arc integrates a genuinely smooth vector field.

All heavy functions are numba-compiled and have in-place twins (prefixed
with an underscore) used by the integration cores.
"""

from __future__ import annotations

import math

import numpy as np
from numba import njit

# state layout offsets
IR = 0   # position r[0:3]
IV = 3   # velocity v[3:6]
IM = 6   # mass
ILR = 7  # position costate
ILV = 10  # velocity costate
ILM = 13  # mass costate

STATE_DIM = 14


@njit(cache=True)
def _gravity_terms(x, y, z, mu):
    """Shared distance/coefficient bundle for both primaries.

    Returns (d1x, d2x, ir13, ir23, ir15, ir25) where d*x are x-offsets
    from the primaries and ir* are mass-weighted inverse distance powers
    (1-mu)/rho1^n, mu/rho2^n.
    """
    d1x = x + mu
    d2x = x - 1.0 + mu
    rho1sq = d1x * d1x + y * y + z * z
    rho2sq = d2x * d2x + y * y + z * z
    rho1 = math.sqrt(rho1sq)
    rho2 = math.sqrt(rho2sq)
    one_mu = 1.0 - mu
    ir13 = one_mu / (rho1sq * rho1)
    ir15 = ir13 / rho1sq
    if mu == 0.0:
        # massless secondary: its terms vanish even at rho2 = 0
        return d1x, d2x, ir13, 0.0, ir15, 0.0
    ir23 = mu / (rho2sq * rho2)
    ir25 = ir23 / rho2sq
    return d1x, d2x, ir13, ir23, ir15, ir25


@njit(cache=True)
def _accel(state, mu, out):
    """Ballistic acceleration (gravity + centrifugal + Coriolis) into out[0:3]."""
    x, y, z = state[0], state[1], state[2]
    vx, vy = state[3], state[4]
    d1x, d2x, ir13, ir23, _, _ = _gravity_terms(x, y, z, mu)
    out[0] = x + 2.0 * vy - ir13 * d1x - ir23 * d2x
    out[1] = y - 2.0 * vx - (ir13 + ir23) * y
    out[2] = -(ir13 + ir23) * z


@njit(cache=True)
def accel(state, mu):
    """Ballistic acceleration of a 6-state (position and Coriolis terms)."""
    out = np.empty(3)
    _accel(state, mu, out)
    return out


@njit(cache=True)
def _gravity_gradient(x, y, z, mu, out):
    """d(accel)/dr without the Coriolis part, written into out (3x3)."""
    d1x, d2x, ir13, ir23, ir15, ir25 = _gravity_terms(x, y, z, mu)
    s3 = ir13 + ir23
    gxx = 1.0 - s3 + 3.0 * (ir15 * d1x * d1x + ir25 * d2x * d2x)
    gxy = 3.0 * (ir15 * d1x + ir25 * d2x) * y
    gxz = 3.0 * (ir15 * d1x + ir25 * d2x) * z
    gyy = 1.0 - s3 + 3.0 * (ir15 + ir25) * y * y
    gyz = 3.0 * (ir15 + ir25) * y * z
    gzz = -s3 + 3.0 * (ir15 + ir25) * z * z
    out[0, 0] = gxx
    out[0, 1] = gxy
    out[0, 2] = gxz
    out[1, 0] = gxy
    out[1, 1] = gyy
    out[1, 2] = gyz
    out[2, 0] = gxz
    out[2, 1] = gyz
    out[2, 2] = gzz


@njit(cache=True)
def gravity_gradient(r, mu):
    """Symmetric 3x3 gradient of the position-dependent acceleration."""
    out = np.empty((3, 3))
    _gravity_gradient(r[0], r[1], r[2], mu, out)
    return out


@njit(cache=True)
def _third_partials_contraction(x, y, z, mu, lvx, lvy, lvz, out):
    """M_ik = sum_j d(G_ij)/d(r_k) * lam_v_j, written into out (3x3).

    Only the gravity terms contribute; the centrifugal part of G is
    constant. For each primary with mass weight nu and offset d:

        M += nu * (3 (lam d^T + d lam^T + (d.lam) I) / rho^5
                   - 15 (d.lam) d d^T / rho^7)
    """
    d1x = x + mu
    d2x = x - 1.0 + mu
    for i in range(3):
        for k in range(3):
            out[i, k] = 0.0
    for body in range(2):
        if body == 0:
            dx, dy, dz = d1x, y, z
            nu = 1.0 - mu
        else:
            dx, dy, dz = d2x, y, z
            nu = mu
        if nu == 0.0:
            continue
        rhosq = dx * dx + dy * dy + dz * dz
        rho = math.sqrt(rhosq)
        ir5 = nu / (rhosq * rhosq * rho)
        ir7 = ir5 / rhosq
        ddotl = dx * lvx + dy * lvy + dz * lvz
        d = (dx, dy, dz)
        lam = (lvx, lvy, lvz)
        for i in range(3):
            for k in range(3):
                val = 3.0 * (lam[i] * d[k] + d[i] * lam[k]) * ir5 - 15.0 * ddotl * d[i] * d[k] * ir7
                if i == k:
                    val += 3.0 * ddotl * ir5
                out[i, k] += val


@njit(cache=True)
def third_partials_contraction(r, mu, lam_v):
    """d(G lam_v)/dr for fixed lam_v; equals the third-derivative tensor
    of the gravity potential contracted against lam_v."""
    out = np.empty((3, 3))
    _third_partials_contraction(r[0], r[1], r[2], mu, lam_v[0], lam_v[1], lam_v[2], out)
    return out


@njit(cache=True)
def switching_function(y, exhaust_velocity):
    """S = |lam_v| + lam_m * m / c. Thrust is optimal where S > 0."""
    lvx, lvy, lvz = y[10], y[11], y[12]
    lv = math.sqrt(lvx * lvx + lvy * lvy + lvz * lvz)
    return lv + y[13] * y[6] / exhaust_velocity


@njit(cache=True)
def _rhs(y, mu, tmax, c_ex, throttle, out):
    """Extremal vector field into out (14,). throttle is 0 or 1.

    Caller must guarantee |lam_v| > 0 on thrust arcs.
    """
    x, yy, z = y[0], y[1], y[2]
    vx, vy, vz = y[3], y[4], y[5]
    m = y[6]
    lrx, lry, lrz = y[7], y[8], y[9]
    lvx, lvy, lvz = y[10], y[11], y[12]

    d1x, d2x, ir13, ir23, ir15, ir25 = _gravity_terms(x, yy, z, mu)
    gx = x + 2.0 * vy - ir13 * d1x - ir23 * d2x
    gy = yy - 2.0 * vx - (ir13 + ir23) * yy
    gz = -(ir13 + ir23) * z

    out[0] = vx
    out[1] = vy
    out[2] = vz

    lv = math.sqrt(lvx * lvx + lvy * lvy + lvz * lvz)
    if throttle == 1:
        a = tmax / (m * lv)
        out[3] = gx - a * lvx
        out[4] = gy - a * lvy
        out[5] = gz - a * lvz
        out[6] = -tmax / c_ex
        out[13] = -lv * tmax / (m * m)
    else:
        out[3] = gx
        out[4] = gy
        out[5] = gz
        out[6] = 0.0
        out[13] = 0.0

    # lam_r_dot = -G lam_v (G symmetric)
    s3 = ir13 + ir23
    s5 = ir15 + ir25
    gxx = 1.0 - s3 + 3.0 * (ir15 * d1x * d1x + ir25 * d2x * d2x)
    gxy = 3.0 * (ir15 * d1x + ir25 * d2x) * yy
    gxz = 3.0 * (ir15 * d1x + ir25 * d2x) * z
    gyy = 1.0 - s3 + 3.0 * s5 * yy * yy
    gyz = 3.0 * s5 * yy * z
    gzz = -s3 + 3.0 * s5 * z * z
    out[7] = -(gxx * lvx + gxy * lvy + gxz * lvz)
    out[8] = -(gxy * lvx + gyy * lvy + gyz * lvz)
    out[9] = -(gxz * lvx + gyz * lvy + gzz * lvz)

    # lam_v_dot = -lam_r - H^T lam_v
    out[10] = -lrx + 2.0 * lvy
    out[11] = -lry - 2.0 * lvx
    out[12] = -lrz


@njit(cache=True)
def vector_field(y, mu, tmax, c_ex, throttle):
    """Extremal vector field ydot(y) for a fixed throttle arc."""
    out = np.empty(STATE_DIM)
    _rhs(y, mu, tmax, c_ex, throttle, out)
    return out


@njit(cache=True)
def switching_rate(y, mu, tmax, c_ex, throttle):
    """Time derivative of the switching function along the flow.

    Sdot = unit(lam_v) . lam_v_dot + (lam_m_dot * m + lam_m * m_dot) / c

    evaluated with the given throttle. Undefined for |lam_v| = 0.
    """
    m = y[6]
    lrx, lry, lrz = y[7], y[8], y[9]
    lvx, lvy, lvz = y[10], y[11], y[12]
    lm = y[13]
    lv = math.sqrt(lvx * lvx + lvy * lvy + lvz * lvz)
    lvdot_x = -lrx + 2.0 * lvy
    lvdot_y = -lry - 2.0 * lvx
    lvdot_z = -lrz
    sdot = (lvx * lvdot_x + lvy * lvdot_y + lvz * lvdot_z) / lv
    if throttle == 1:
        mdot = -tmax / c_ex
        lmdot = -lv * tmax / (m * m)
        sdot += (lmdot * m + lm * mdot) / c_ex
    return sdot


@njit(cache=True)
def hamiltonian(y, mu, tmax, c_ex, throttle):
    """Control Hamiltonian; constant along an extremal of the autonomous
    problem, continuous across optimal switches (where S = 0)."""
    x, yy, z = y[0], y[1], y[2]
    vx, vy, vz = y[3], y[4], y[5]
    m = y[6]
    d1x, d2x, ir13, ir23, _, _ = _gravity_terms(x, yy, z, mu)
    gx = x + 2.0 * vy - ir13 * d1x - ir23 * d2x
    gy = yy - 2.0 * vx - (ir13 + ir23) * yy
    gz = -(ir13 + ir23) * z
    h = (
        y[7] * vx
        + y[8] * vy
        + y[9] * vz
        + y[10] * gx
        + y[11] * gy
        + y[12] * gz
    )
    if throttle == 1:
        s = switching_function(y, c_ex)
        h -= tmax / m * s
    return h


@njit(cache=True)
def _jac(y, mu, tmax, c_ex, throttle, out):
    """Jacobian A = d(ydot)/dy of the extremal field into out (14x14)."""
    x, yy, z = y[0], y[1], y[2]
    m = y[6]
    lvx, lvy, lvz = y[10], y[11], y[12]

    for i in range(STATE_DIM):
        for j in range(STATE_DIM):
            out[i, j] = 0.0

    # dr_dot/dv = I
    out[0, 3] = 1.0
    out[1, 4] = 1.0
    out[2, 5] = 1.0

    d1x, d2x, ir13, ir23, ir15, ir25 = _gravity_terms(x, yy, z, mu)
    s3 = ir13 + ir23
    s5 = ir15 + ir25
    gxx = 1.0 - s3 + 3.0 * (ir15 * d1x * d1x + ir25 * d2x * d2x)
    gxy = 3.0 * (ir15 * d1x + ir25 * d2x) * yy
    gxz = 3.0 * (ir15 * d1x + ir25 * d2x) * z
    gyy = 1.0 - s3 + 3.0 * s5 * yy * yy
    gyz = 3.0 * s5 * yy * z
    gzz = -s3 + 3.0 * s5 * z * z

    # dv_dot/dr = G, dv_dot/dv = Coriolis
    out[3, 0] = gxx
    out[3, 1] = gxy
    out[3, 2] = gxz
    out[4, 0] = gxy
    out[4, 1] = gyy
    out[4, 2] = gyz
    out[5, 0] = gxz
    out[5, 1] = gyz
    out[5, 2] = gzz
    out[3, 4] = 2.0
    out[4, 3] = -2.0

    lv = math.sqrt(lvx * lvx + lvy * lvy + lvz * lvz)
    if throttle == 1:
        # thrust acceleration terms
        tm2 = tmax / (m * m)
        out[3, 6] = tm2 * lvx / lv
        out[4, 6] = tm2 * lvy / lv
        out[5, 6] = tm2 * lvz / lv
        # dv_dot/dlam_v = -(T / (m |lv|)) (I - unit unit^T)
        coef = tmax / (m * lv)
        lvsq = lv * lv
        uxx = lvx * lvx / lvsq
        uxy = lvx * lvy / lvsq
        uxz = lvx * lvz / lvsq
        uyy = lvy * lvy / lvsq
        uyz = lvy * lvz / lvsq
        uzz = lvz * lvz / lvsq
        out[3, 10] = -coef * (1.0 - uxx)
        out[3, 11] = coef * uxy
        out[3, 12] = coef * uxz
        out[4, 10] = coef * uxy
        out[4, 11] = -coef * (1.0 - uyy)
        out[4, 12] = coef * uyz
        out[5, 10] = coef * uxz
        out[5, 11] = coef * uyz
        out[5, 12] = -coef * (1.0 - uzz)
        # mass costate row
        out[13, 6] = 2.0 * tmax * lv / (m * m * m)
        out[13, 10] = -tm2 * lvx / lv
        out[13, 11] = -tm2 * lvy / lv
        out[13, 12] = -tm2 * lvz / lv

    # dlam_r_dot/dr = -d(G lam_v)/dr
    mterm = np.empty((3, 3))
    _third_partials_contraction(x, yy, z, mu, lvx, lvy, lvz, mterm)
    for i in range(3):
        for k in range(3):
            out[7 + i, k] = -mterm[i, k]
    # dlam_r_dot/dlam_v = -G
    out[7, 10] = -gxx
    out[7, 11] = -gxy
    out[7, 12] = -gxz
    out[8, 10] = -gxy
    out[8, 11] = -gyy
    out[8, 12] = -gyz
    out[9, 10] = -gxz
    out[9, 11] = -gyz
    out[9, 12] = -gzz

    # dlam_v_dot/dlam_r = -I, dlam_v_dot/dlam_v = -H^T
    out[10, 7] = -1.0
    out[11, 8] = -1.0
    out[12, 9] = -1.0
    out[10, 11] = 2.0
    out[11, 10] = -2.0


@njit(cache=True)
def jacobian(y, mu, tmax, c_ex, throttle):
    """14x14 variational Jacobian of the extremal field on a fixed arc."""
    out = np.empty((STATE_DIM, STATE_DIM))
    _jac(y, mu, tmax, c_ex, throttle, out)
    return out


def control_direction(y):
    """Optimal thrust unit vector -lam_v/|lam_v|, or None when degenerate."""
    lam_v = np.asarray(y, dtype=float)[ILV:ILV + 3]
    norm = float(np.linalg.norm(lam_v))
    if norm == 0.0:
        return None
    return -lam_v / norm


def assemble_state(r, v, m, lam_r, lam_v, lam_m):
    """Pack components into the 14-dim combined state."""
    y = np.empty(STATE_DIM)
    y[IR:IR + 3] = r
    y[IV:IV + 3] = v
    y[IM] = m
    y[ILR:ILR + 3] = lam_r
    y[ILV:ILV + 3] = lam_v
    y[ILM] = lam_m
    return y
