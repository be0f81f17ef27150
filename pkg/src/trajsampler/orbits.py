"""Distant retrograde orbits bounding the transfer.

Both transfer endpoints are planar DROs about the secondary, pinned down
by their positive-x crossing of the rotating-frame x axis. The family
member at a given alpha is found by Newton correction on the crossing
speed v2 with the crossing position x0 held fixed, driving the x velocity
at the next axis crossing (the half period) to zero.

Crossing positions interpolate linearly in alpha through the distance of
the anchor crossing from the secondary, so the endpoint systems reproduce
the reference orbits exactly.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from numba import njit

from . import systems
from .dynamics import _accel, _gravity_gradient
from .errors import CorrectionError, PropagationError
from .propagator import (
    A21, A31, A32, A41, A42, A43, A51, A52, A53, A54,
    A61, A62, A63, A64, A65, B1, B3, B4, B5, B6,
    E1, E3, E4, E5, E6, E7,
    NODE_OVERFLOW, OK, STEP_UNDERFLOW,
)

M = 6

# x-axis crossing anchors of the two endpoint systems: distance of the
# anchor crossing from the secondary, and crossing speed, at alpha = 0, 1
DEPART_DISTANCE = (1.0752 - (1.0 - systems.MU_ALPHA0), 1.0758 - (1.0 - systems.MU_ALPHA1))
TARGET_DISTANCE = (1.0306 - (1.0 - systems.MU_ALPHA0), 1.0304 - (1.0 - systems.MU_ALPHA1))
DEPART_SPEED = (-0.1499, -0.1684)
TARGET_SPEED = (-0.0727, -0.1248)

DEFAULT_SAMPLES = 2000

CROSSING_EVENT = 100


@njit(cache=True)
def _rhs6(x, mu, out):
    out[0] = x[3]
    out[1] = x[4]
    out[2] = x[5]
    acc = out[3:6]
    _accel(x, mu, acc)


@njit(cache=True)
def _jac6(x, mu, out):
    for i in range(M):
        for j in range(M):
            out[i, j] = 0.0
    out[0, 3] = 1.0
    out[1, 4] = 1.0
    out[2, 5] = 1.0
    g = out[3:6, 0:3]
    _gravity_gradient(x[0], x[1], x[2], mu, g)
    out[3, 4] = 2.0
    out[4, 3] = -2.0


@njit(cache=True)
def _mm6(a, b, out):
    for i in range(M):
        for j in range(M):
            s = 0.0
            for k in range(M):
                s += a[i, k] * b[k, j]
            out[i, j] = s


@njit(cache=True)
def _step6(y, phi, h, mu, with_stm, K, KP, AB, YT, PT, ynew, phinew, atol, rtol):
    """One ballistic RK5(4) attempt. K[0]/KP[0] must hold the RHS at y."""
    for i in range(M):
        YT[i] = y[i] + h * (A21 * K[0, i])
    if with_stm:
        for i in range(M):
            for j in range(M):
                PT[i, j] = phi[i, j] + h * (A21 * KP[0, i, j])
        _jac6(YT, mu, AB)
        _mm6(AB, PT, KP[1])
    _rhs6(YT, mu, K[1])

    for i in range(M):
        YT[i] = y[i] + h * (A31 * K[0, i] + A32 * K[1, i])
    if with_stm:
        for i in range(M):
            for j in range(M):
                PT[i, j] = phi[i, j] + h * (A31 * KP[0, i, j] + A32 * KP[1, i, j])
        _jac6(YT, mu, AB)
        _mm6(AB, PT, KP[2])
    _rhs6(YT, mu, K[2])

    for i in range(M):
        YT[i] = y[i] + h * (A41 * K[0, i] + A42 * K[1, i] + A43 * K[2, i])
    if with_stm:
        for i in range(M):
            for j in range(M):
                PT[i, j] = phi[i, j] + h * (
                    A41 * KP[0, i, j] + A42 * KP[1, i, j] + A43 * KP[2, i, j]
                )
        _jac6(YT, mu, AB)
        _mm6(AB, PT, KP[3])
    _rhs6(YT, mu, K[3])

    for i in range(M):
        YT[i] = y[i] + h * (
            A51 * K[0, i] + A52 * K[1, i] + A53 * K[2, i] + A54 * K[3, i]
        )
    if with_stm:
        for i in range(M):
            for j in range(M):
                PT[i, j] = phi[i, j] + h * (
                    A51 * KP[0, i, j]
                    + A52 * KP[1, i, j]
                    + A53 * KP[2, i, j]
                    + A54 * KP[3, i, j]
                )
        _jac6(YT, mu, AB)
        _mm6(AB, PT, KP[4])
    _rhs6(YT, mu, K[4])

    for i in range(M):
        YT[i] = y[i] + h * (
            A61 * K[0, i] + A62 * K[1, i] + A63 * K[2, i] + A64 * K[3, i] + A65 * K[4, i]
        )
    if with_stm:
        for i in range(M):
            for j in range(M):
                PT[i, j] = phi[i, j] + h * (
                    A61 * KP[0, i, j]
                    + A62 * KP[1, i, j]
                    + A63 * KP[2, i, j]
                    + A64 * KP[3, i, j]
                    + A65 * KP[4, i, j]
                )
        _jac6(YT, mu, AB)
        _mm6(AB, PT, KP[5])
    _rhs6(YT, mu, K[5])

    for i in range(M):
        ynew[i] = y[i] + h * (
            B1 * K[0, i] + B3 * K[2, i] + B4 * K[3, i] + B5 * K[4, i] + B6 * K[5, i]
        )
    _rhs6(ynew, mu, K[6])

    err = 0.0
    for i in range(M):
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
    err = math.sqrt(err / M)

    if with_stm:
        for i in range(M):
            for j in range(M):
                phinew[i, j] = phi[i, j] + h * (
                    B1 * KP[0, i, j]
                    + B3 * KP[2, i, j]
                    + B4 * KP[3, i, j]
                    + B5 * KP[4, i, j]
                    + B6 * KP[5, i, j]
                )
        _jac6(ynew, mu, AB)
        _mm6(AB, phinew, KP[6])
    return err


@njit(cache=True)
def _land6(y0, phi0, dt, mu, with_stm, K, KP, AB, YT, PT, ywork, phiwork, yout, phiout, atol, rtol):
    half = 0.5 * dt
    for i in range(M):
        ywork[i] = y0[i]
    if with_stm:
        for i in range(M):
            for j in range(M):
                phiwork[i, j] = phi0[i, j]
    _rhs6(ywork, mu, K[0])
    if with_stm:
        _jac6(ywork, mu, AB)
        _mm6(AB, phiwork, KP[0])
    _step6(ywork, phiwork, half, mu, with_stm, K, KP, AB, YT, PT, yout, phiout, atol, rtol)
    for i in range(M):
        ywork[i] = yout[i]
        K[0, i] = K[6, i]
    if with_stm:
        for i in range(M):
            for j in range(M):
                phiwork[i, j] = phiout[i, j]
                KP[0, i, j] = KP[6, i, j]
    _step6(ywork, phiwork, half, mu, with_stm, K, KP, AB, YT, PT, yout, phiout, atol, rtol)


@njit(cache=True)
def _integrate6(
    x0,
    t_max,
    mu,
    rtol,
    atol,
    max_step,
    with_stm,
    stop_on_crossing,
    detect_after,
    required_ts,
    samples,
    x_final,
    phi_final,
):
    """Ballistic propagation with optional x-axis crossing stop.

    required_ts must be sorted; the integrator lands on each exactly and
    copies the state into samples. With stop_on_crossing, integration
    ends at the first y=0 crossing after detect_after, leaving the
    crossing state/STM in x_final/phi_final and returning the crossing
    time. Otherwise it runs to t_max.

    Returns (status, t_end).
    """
    y = x0.copy()
    ynew = np.empty(M)
    ywork = np.empty(M)
    yloc = np.empty(M)
    YT = np.empty(M)
    K = np.empty((7, M))
    if with_stm:
        KP = np.empty((7, M, M))
        AB = np.empty((M, M))
        PT = np.empty((M, M))
        phi = np.eye(M)
        phinew = np.empty((M, M))
        philoc = np.empty((M, M))
        phiwork = np.empty((M, M))
    else:
        KP = np.empty((1, 1, 1))
        AB = np.empty((1, 1))
        PT = np.empty((1, 1))
        phi = np.eye(1)
        phinew = np.empty((1, 1))
        philoc = np.empty((1, 1))
        phiwork = np.empty((1, 1))

    n_req = required_ts.shape[0]
    req_i = 0
    while req_i < n_req and required_ts[req_i] <= 0.0:
        for i in range(M):
            samples[req_i, i] = y[i]
        req_i += 1

    t = 0.0
    h = max_step if max_step < 1e-3 else 1e-3
    if h > t_max:
        h = t_max
    k1_valid = False
    max_iters = int(t_max / max_step * 64) + 100000

    for _ in range(max_iters):
        if t >= t_max:
            break
        if h > max_step:
            h = max_step
        forced_req = False
        if req_i < n_req and t + h >= required_ts[req_i]:
            h = required_ts[req_i] - t
            forced_req = True
        if t + h > t_max:
            h = t_max - t
            forced_req = False
        if not k1_valid:
            _rhs6(y, mu, K[0])
            if with_stm:
                _jac6(y, mu, AB)
                _mm6(AB, phi, KP[0])
            k1_valid = True
        err = _step6(y, phi, h, mu, with_stm, K, KP, AB, YT, PT, ynew, phinew, atol, rtol)
        if err > 1.0:
            fac = 0.9 * err ** -0.2
            if fac < 0.2:
                fac = 0.2
            if fac > 1.0:
                fac = 1.0
            h *= fac
            if h < 1e-14 * (1.0 if t < 1.0 else t):
                return STEP_UNDERFLOW, t
            continue

        t_new = t + h
        if stop_on_crossing and t_new > detect_after and y[1] * ynew[1] < 0.0 and t > detect_after:
            # crossing inside (t, t_new): Newton on the landed y-coordinate
            lo = 0.0
            hi = h
            dt = h * y[1] / (y[1] - ynew[1])
            if dt <= 0.0 or dt >= h:
                dt = 0.5 * h
            sign_lo = 1.0 if y[1] > 0.0 else -1.0
            for _it in range(80):
                _land6(y, phi, dt, mu, with_stm, K, KP, AB, YT, PT, ywork, phiwork, yloc, philoc, atol, rtol)
                ry = yloc[1]
                if abs(ry) <= 1e-13:
                    break
                if ry * sign_lo > 0.0:
                    lo = dt
                else:
                    hi = dt
                step_ok = False
                if yloc[4] != 0.0:
                    dt_next = dt - ry / yloc[4]
                    if lo < dt_next < hi:
                        dt = dt_next
                        step_ok = True
                if not step_ok:
                    dt = 0.5 * (lo + hi)
                if hi - lo < 1e-16 * (1.0 if t + hi < 1.0 else t + hi):
                    break
            for i in range(M):
                x_final[i] = yloc[i]
            if with_stm:
                for i in range(M):
                    for j in range(M):
                        phi_final[i, j] = philoc[i, j]
            return CROSSING_EVENT, t + dt

        t = t_new
        for i in range(M):
            y[i] = ynew[i]
        if with_stm:
            for i in range(M):
                for j in range(M):
                    phi[i, j] = phinew[i, j]
        if forced_req:
            for i in range(M):
                samples[req_i, i] = y[i]
            req_i += 1
        for i in range(M):
            K[0, i] = K[6, i]
        if with_stm:
            for i in range(M):
                for j in range(M):
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

    for i in range(M):
        x_final[i] = y[i]
    if with_stm:
        for i in range(M):
            for j in range(M):
                phi_final[i, j] = phi[i, j]
    return OK, t


_EMPTY_TS = np.empty(0)
_EMPTY_SAMPLES = np.empty((0, M))


def propagate_ballistic(state, t_max, mu, *, rel_tol=1e-13, abs_tol=1e-13, max_step=1e-2, sample_times=None, with_stm=False):
    """Coast a 6-state for t_max NU. Returns (final_state, stm_or_None,
    samples) where samples holds the states at sample_times."""
    x0 = np.asarray(state, dtype=float)
    if sample_times is None:
        req = _EMPTY_TS
        samples = _EMPTY_SAMPLES
    else:
        req = np.asarray(sample_times, dtype=float)
        samples = np.empty((req.shape[0], M))
    x_final = np.empty(M)
    phi_final = np.eye(M)
    status, t_end = _integrate6(
        x0, float(t_max), mu, rel_tol, abs_tol, max_step, with_stm,
        False, 0.0, req, samples, x_final, phi_final,
    )
    if status != OK:
        raise PropagationError(f"ballistic propagation aborted (code {status})", status=status, t=t_end)
    return x_final, (phi_final if with_stm else None), samples


def _next_crossing(state, mu, *, detect_after, t_cap, rel_tol, abs_tol, max_step=1e-2):
    x0 = np.asarray(state, dtype=float)
    x_final = np.empty(M)
    phi_final = np.eye(M)
    status, t_end = _integrate6(
        x0, float(t_cap), mu, rel_tol, abs_tol, max_step, True,
        True, detect_after, _EMPTY_TS, _EMPTY_SAMPLES, x_final, phi_final,
    )
    if status != CROSSING_EVENT:
        raise CorrectionError(f"no axis crossing found within {t_cap} NU (code {status})")
    return x_final, phi_final, t_end


@dataclass(frozen=True)
class PeriodicOrbit:
    """A corrected periodic orbit with perpendicular axis crossings."""

    initial_state: np.ndarray
    period: float
    mu: float
    alpha: float
    v1_residual: float
    defect: float


@dataclass
class OrbitSamples:
    """Discretization of one period into candidate arrival points."""

    tau_f: np.ndarray
    states: np.ndarray
    orbit: PeriodicOrbit

    @property
    def n(self) -> int:
        return self.tau_f.shape[0]


def correct_perpendicular_crossing(
    x0: float,
    vy_guess: float,
    mu: float,
    alpha: float = 0.0,
    *,
    tol: float = 1e-12,
    max_iter: int = 50,
    rel_tol: float = 1e-13,
    abs_tol: float = 1e-13,
    t_cap: float = 40.0,
) -> PeriodicOrbit:
    """Newton-correct the crossing speed of a symmetric periodic orbit.

    x0 is held fixed; v2 is adjusted until the x velocity at the next
    axis crossing is below tol. The crossing-time variation is folded
    into the Newton derivative through the flow direction.
    """
    vy = float(vy_guess)
    detect_after = 1e-2
    v1 = math.inf
    for _ in range(max_iter):
        state = np.array([x0, 0.0, 0.0, 0.0, vy, 0.0])
        xc, phic, t_half = _next_crossing(
            state, mu, detect_after=detect_after, t_cap=t_cap, rel_tol=rel_tol, abs_tol=abs_tol
        )
        v1 = xc[3]
        if abs(v1) < tol:
            break
        acc = np.empty(3)
        _accel(xc, mu, acc)
        if xc[4] == 0.0:
            raise CorrectionError("crossing is tangent to the axis (v2 = 0)")
        deriv = phic[3, 4] - acc[0] * phic[1, 4] / xc[4]
        if deriv == 0.0:
            raise CorrectionError("singular Newton derivative in crossing correction")
        vy -= v1 / deriv
    else:
        raise CorrectionError(
            f"crossing correction stalled at |v1| = {abs(v1):.3e} after {max_iter} iterations"
        )

    initial = np.array([x0, 0.0, 0.0, 0.0, vy, 0.0])
    period = 2.0 * t_half
    final, _, _ = propagate_ballistic(initial, period, mu, rel_tol=rel_tol, abs_tol=abs_tol)
    defect = float(np.max(np.abs(final - initial)))
    return PeriodicOrbit(
        initial_state=initial,
        period=period,
        mu=mu,
        alpha=alpha,
        v1_residual=float(abs(v1)),
        defect=defect,
    )


def _interp(pair, alpha):
    return pair[0] + alpha * (pair[1] - pair[0])


def boundary_orbit(alpha: float, role: str, *, vy_seed: float | None = None, **kwargs) -> PeriodicOrbit:
    """Correct the departure or target orbit of the family member at alpha.

    The crossing distance from the secondary interpolates linearly
    between the endpoint anchors; the crossing speed seed does too unless
    a continuation seed is given.
    """
    if role == "depart":
        dist, speed = DEPART_DISTANCE, DEPART_SPEED
    elif role == "target":
        dist, speed = TARGET_DISTANCE, TARGET_SPEED
    else:
        raise ValueError(f"unknown orbit role: {role!r}")
    mu = systems.MU_ALPHA0 + alpha * (systems.MU_ALPHA1 - systems.MU_ALPHA0)
    x0 = 1.0 - mu + _interp(dist, alpha)
    vy = vy_seed if vy_seed is not None else _interp(speed, alpha)
    return correct_perpendicular_crossing(x0, vy, mu, alpha, **kwargs)


def discretize_orbit(orbit: PeriodicOrbit, n: int = DEFAULT_SAMPLES) -> OrbitSamples:
    """Sample one period at n equally spaced arrival times."""
    if n < 2:
        raise ValueError(f"need at least 2 samples, got {n}")
    tau_f = np.linspace(0.0, orbit.period, n, endpoint=False)
    _, _, states = propagate_ballistic(
        orbit.initial_state, orbit.period, orbit.mu, sample_times=tau_f
    )
    return OrbitSamples(tau_f=tau_f, states=states, orbit=orbit)


# ---------------------------------------------------------------------------
# per-alpha cache files

CACHE_VERSION = "orbit-cache v1"


def cache_path(cache_dir, alpha: float, role: str) -> Path:
    return Path(cache_dir) / f"orbit_{role}_a{alpha:.6f}.txt"


def write_cache(path, samples: OrbitSamples, role: str) -> None:
    orbit = samples.orbit
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as f:
        f.write(f"# {CACHE_VERSION}\n")
        f.write(
            f"# alpha={float(orbit.alpha)!r} role={role} mu={float(orbit.mu)!r} "
            f"x0={float(orbit.initial_state[0])!r} vy={float(orbit.initial_state[4])!r} "
            f"period={float(orbit.period)!r} v1_residual={float(orbit.v1_residual)!r} "
            f"defect={float(orbit.defect)!r} n={samples.n}\n"
        )
        f.write("tau_f r1 r2 r3 v1 v2 v3\n")
        for i in range(samples.n):
            row = [samples.tau_f[i]] + list(samples.states[i])
            f.write(" ".join(repr(float(v)) for v in row) + "\n")


def read_cache(path) -> OrbitSamples:
    path = Path(path)
    with open(path) as f:
        version = f.readline().strip().lstrip("# ")
        if version != CACHE_VERSION:
            raise ValueError(f"unsupported orbit cache format: {version!r}")
        meta = {}
        for item in f.readline().strip().lstrip("# ").split():
            key, _, val = item.partition("=")
            meta[key] = val
        f.readline()  # column header
        rows = [[float(v) for v in line.split()] for line in f if line.strip()]
    data = np.array(rows)
    orbit = PeriodicOrbit(
        initial_state=np.array(
            [float(meta["x0"]), 0.0, 0.0, 0.0, float(meta["vy"]), 0.0]
        ),
        period=float(meta["period"]),
        mu=float(meta["mu"]),
        alpha=float(meta["alpha"]),
        v1_residual=float(meta["v1_residual"]),
        defect=float(meta["defect"]),
    )
    return OrbitSamples(tau_f=data[:, 0].copy(), states=data[:, 1:7].copy(), orbit=orbit)


def load_boundary_samples(
    alpha: float,
    role: str,
    *,
    cache_dir=None,
    n: int = DEFAULT_SAMPLES,
    vy_seed: float | None = None,
) -> OrbitSamples:
    """Discretized boundary orbit, via the cache when possible."""
    if cache_dir is not None:
        path = cache_path(cache_dir, alpha, role)
        if path.exists():
            cached = read_cache(path)
            if cached.n == n:
                return cached
    orbit = boundary_orbit(alpha, role, vy_seed=vy_seed)
    samples = discretize_orbit(orbit, n)
    if cache_dir is not None:
        write_cache(cache_path(cache_dir, alpha, role), samples, role)
    return samples
