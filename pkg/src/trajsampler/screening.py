"""Screening of costate samples over shooting and coast times.

A costate draw is scored by propagating the extremal it induces and
searching the discrete grid of candidate shooting times (every accepted
propagation node) against candidate arrival phases (every sample on the
target orbit). The best combination of terminal mismatch, burned
propellant, and elapsed time is the sample's objective; a frozen-time
variant of the same objective supplies a cheap surrogate gradient
through the trajectory sensitivities.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from . import dynamics, orbits, propagator, systems
from .orbits import OrbitSamples, PeriodicOrbit
from .propagator import PropagatorOptions

logger = logging.getLogger(__name__)

# planar (r1, r2, v1, v2) columns of a 6-state; costate counterparts sit
# at the same offsets within the 6 sampled costate slots
PLANAR = np.array([0, 1, 3, 4])

DEFAULT_TAU_S_MAX = 90.0
DEFAULT_E_GUARD = 1e-9
REWARD_FLOOR = 0.1


@dataclass(frozen=True)
class ObjectiveWeights:
    """Weights of the screening objective and density sharpness."""

    kappa1: float = 1.2
    kappa2: float = 1e-6
    beta: float = 10_000.0

    def __post_init__(self):
        if not self.kappa1 > 0.0:
            raise ValueError(f"kappa1 must be positive, got {self.kappa1}")
        if self.kappa2 < 0.0:
            raise ValueError(f"kappa2 must be nonnegative, got {self.kappa2}")
        if not self.beta > 0.0:
            raise ValueError(f"beta must be positive, got {self.beta}")


@dataclass(frozen=True)
class SampledCostate:
    """A planar costate draw: (lam_r1, lam_r2, lam_v1, lam_v2) at alpha.

    Out-of-plane costates are zero and the mass costate starts at -1;
    both are fixed by construction, not sampled.
    """

    lam: np.ndarray
    alpha: float

    def __post_init__(self):
        lam = np.asarray(self.lam, dtype=float)
        if lam.shape != (4,) or not np.all(np.isfinite(lam)):
            raise ValueError("costate sample must be a finite 4-vector")
        object.__setattr__(self, "lam", lam)


@dataclass
class ScreeningResult:
    """Outcome of screening one costate over the (tau_s, tau_f) grid."""

    tau_s_star: float
    tau_f_star: float
    e: float
    e_vec: np.ndarray
    dm_frac: float
    j_star: float
    node_index: int
    sample_index: int
    switch_count: int


class ScreenContext:
    """Immutable per-alpha inputs shared by every evaluation.

    Bundles the interpolated system, the spacecraft, the departure
    crossing state the propagation always starts from, the discretized
    target orbit, and the nearest-neighbor tree over its planar states.
    The tree is built once and only read afterwards, so one context can
    serve any number of parallel chains.
    """

    def __init__(
        self,
        system: systems.SystemConfig,
        spacecraft: systems.SpacecraftConfig,
        depart: PeriodicOrbit,
        samples: OrbitSamples,
        weights: ObjectiveWeights,
        *,
        tau_s_max: float = DEFAULT_TAU_S_MAX,
        e_guard: float = DEFAULT_E_GUARD,
        options: PropagatorOptions | None = None,
    ):
        if tau_s_max <= 0.0:
            raise ValueError(f"tau_s_max must be positive, got {tau_s_max}")
        self.system = system
        self.spacecraft = spacecraft
        self.depart = depart
        self.samples = samples
        self.weights = weights
        self.tau_s_max = float(tau_s_max)
        self.e_guard = float(e_guard)
        self.options = options if options is not None else PropagatorOptions()
        self.initial_rv = np.asarray(depart.initial_state, dtype=float)
        self.tree = cKDTree(samples.states[:, PLANAR])

    @property
    def alpha(self) -> float:
        return self.system.alpha

    @property
    def mu(self) -> float:
        return self.system.mu


def make_context(
    alpha: float,
    weights: ObjectiveWeights | None = None,
    *,
    n_samples: int = orbits.DEFAULT_SAMPLES,
    tau_s_max: float = DEFAULT_TAU_S_MAX,
    e_guard: float = DEFAULT_E_GUARD,
    cache_dir=None,
    options: PropagatorOptions | None = None,
    spacecraft: systems.SpacecraftConfig | None = None,
    depart_vy_seed: float | None = None,
    target_vy_seed: float | None = None,
) -> ScreenContext:
    """Correct both boundary orbits at alpha and assemble a context."""
    system = systems.interpolate_system(alpha)
    if spacecraft is None:
        spacecraft = systems.default_spacecraft()
    # the departure orbit is cached too (2 samples suffice; only its
    # crossing state is consumed) so a resumed run sees bitwise the same
    # boundary conditions as the run that wrote the cache
    depart = orbits.load_boundary_samples(
        alpha, "depart", cache_dir=cache_dir, n=2, vy_seed=depart_vy_seed
    ).orbit
    samples = orbits.load_boundary_samples(
        alpha, "target", cache_dir=cache_dir, n=n_samples, vy_seed=target_vy_seed
    )
    if weights is None:
        weights = ObjectiveWeights()
    return ScreenContext(
        system,
        spacecraft,
        depart,
        samples,
        weights,
        tau_s_max=tau_s_max,
        e_guard=e_guard,
        options=options,
    )


def initial_extremal_state(boundary_rv: np.ndarray, lam: np.ndarray) -> np.ndarray:
    """Combined 14-state at departure for a planar costate draw."""
    lam = np.asarray(lam, dtype=float)
    return dynamics.assemble_state(
        boundary_rv[0:3],
        boundary_rv[3:6],
        1.0,
        (lam[0], lam[1], 0.0),
        (lam[2], lam[3], 0.0),
        -1.0,
    )


def screen_trajectory(ctx: ScreenContext, traj: propagator.Trajectory) -> ScreeningResult:
    """Grid-minimize J over the trajectory's nodes and the orbit samples."""
    n = traj.times.shape[0]
    if n == 0:
        raise ValueError("cannot screen an empty trajectory")
    dist, nn = ctx.tree.query(traj.states[:, PLANAR])
    m0 = traj.states[0, dynamics.IM]
    dm = 1.0 - traj.states[:, dynamics.IM] / m0
    k = ctx.weights
    j = dist + k.kappa1 * (dm + k.kappa2 * traj.times)
    i = int(np.argmin(j))
    target = ctx.samples.states[nn[i]]
    e_vec = target - traj.states[i, 0:6]
    return ScreeningResult(
        tau_s_star=float(traj.times[i]),
        tau_f_star=float(ctx.samples.tau_f[nn[i]]),
        e=float(dist[i]),
        e_vec=e_vec,
        dm_frac=float(dm[i]),
        j_star=float(j[i]),
        node_index=i,
        sample_index=int(nn[i]),
        switch_count=int(traj.switch_times.shape[0]),
    )


def evaluate(ctx: ScreenContext, lam: np.ndarray) -> ScreeningResult:
    """Screen one costate draw: propagate for tau_s_max, then grid-minimize."""
    y0 = initial_extremal_state(ctx.initial_rv, lam)
    traj = propagator.propagate(y0, ctx.tau_s_max, ctx.system, ctx.spacecraft, ctx.options)
    return screen_trajectory(ctx, traj)


def sample_index_for_tau_f(ctx: ScreenContext, tau_f: float) -> int:
    """Index of the orbit sample whose phase is tau_f (grid-locked)."""
    grid = ctx.samples.tau_f
    step = ctx.samples.orbit.period / grid.shape[0]
    idx = int(round(tau_f / step)) % grid.shape[0]
    if abs(grid[idx] - tau_f) > 1e-9:
        raise ValueError(f"tau_f={tau_f} is not an orbit sample phase")
    return idx


def _frozen_terminal(ctx, lam, tau_s, with_stm):
    """Terminal 14-state at exactly tau_s (and the sensitivity chain)."""
    y0 = initial_extremal_state(ctx.initial_rv, lam)
    if tau_s == 0.0:
        return y0, y0, None
    if with_stm:
        traj, chain = propagator.propagate_with_stm(
            y0, tau_s, ctx.system, ctx.spacecraft, ctx.options, store_node_products=False
        )
    else:
        traj = propagator.propagate(y0, tau_s, ctx.system, ctx.spacecraft, ctx.options)
        chain = None
    return y0, traj.states[-1], chain


def frozen_objective(ctx: ScreenContext, lam: np.ndarray, tau_s: float, tau_f: float) -> float:
    """J with the shooting and coast times frozen at an anchor's optimum.

    tau_s becomes the exact final propagation node, so at the anchor
    costate this reproduces the screened objective; everywhere else it
    upper-bounds it (the screen minimizes over times, this does not).
    """
    if not 0.0 <= tau_s <= ctx.tau_s_max:
        raise ValueError(f"tau_s={tau_s} outside [0, {ctx.tau_s_max}]")
    idx = sample_index_for_tau_f(ctx, tau_f)
    y0, y, _ = _frozen_terminal(ctx, lam, tau_s, with_stm=False)
    e = float(np.linalg.norm(ctx.samples.states[idx] - y[0:6]))
    dm = 1.0 - y[dynamics.IM] / y0[dynamics.IM]
    k = ctx.weights
    return e + k.kappa1 * (dm + k.kappa2 * tau_s)


def frozen_gradient(
    ctx: ScreenContext, lam: np.ndarray, tau_s: float, tau_f: float
) -> tuple[np.ndarray, bool]:
    """Gradient of the frozen objective in the 4 sampled costates.

    Returns (gradient, degenerate). The gradient chains the terminal
    error direction and the mass sensitivity through the state
    transition blocks; it is zero with degenerate=True when the error
    is within the guard (the 1/e direction is no longer meaningful) or
    when tau_s is zero (the terminal state does not depend on the
    costates at all).
    """
    idx = sample_index_for_tau_f(ctx, tau_f)
    if tau_s == 0.0:
        return np.zeros(4), True
    y0, y, chain = _frozen_terminal(ctx, lam, tau_s, with_stm=True)
    e_vec = ctx.samples.states[idx] - y[0:6]
    e = float(np.linalg.norm(e_vec))
    if e <= ctx.e_guard:
        logger.debug("terminal error %.3e within guard; returning zero gradient", e)
        return np.zeros(4), True
    g1, g2 = propagator.boundary_sensitivities(chain.total)
    grad6 = g1.T @ (e_vec / e) + (ctx.weights.kappa1 / y0[dynamics.IM]) * g2
    return grad6[PLANAR].copy(), False


def log_density_of(j_star: float, beta: float) -> float:
    """Unnormalized log target density for a screened objective value."""
    return -beta * j_star


def log_target_density(ctx: ScreenContext, lam: np.ndarray) -> float:
    """log pi(lam | alpha) = -beta * J*(lam; alpha), never normalized."""
    return log_density_of(evaluate(ctx, lam).j_star, ctx.weights.beta)


def reward(j_star: float, c1: float, c2: float) -> float:
    """Exponentially rescaled objective used to weight training samples."""
    return c1 * math.exp(-c2 * j_star)


def calibrate_reward(j_values) -> tuple[float, float]:
    """Fit (c1, c2) so rewards span [0.1, 1] over the given objectives.

    The best objective in the set maps to reward 1, the worst to 0.1.
    A degenerate (constant) set gets uniform unit rewards.
    """
    arr = np.asarray(j_values, dtype=float)
    if arr.size == 0:
        raise ValueError("cannot calibrate rewards on an empty objective set")
    if not np.all(np.isfinite(arr)):
        raise ValueError("objective values must be finite")
    jmin = float(arr.min())
    jmax = float(arr.max())
    if jmax <= jmin:
        logger.warning("degenerate objective range at %.6g; rewards are uniform", jmin)
        return 1.0, 0.0
    c2 = math.log(1.0 / REWARD_FLOOR) / (jmax - jmin)
    c1 = math.exp(c2 * jmin)
    return c1, c2
