"""Markov chain kernels over costate space and the homotopy driver.

All three kernels (random-walk, gradient-drifted, and Hamiltonian) share
one transition core written in standardized momentum coordinates
xi = M^(-1/2) p. In those coordinates a leapfrog step is

    xi += (eps/2) g(lam);   lam += sqrt(Sigma) xi;   xi += (eps/2) g(lam)

with g the unit-normalized gradient of the log density, and the
Metropolis correction is log pi difference plus the kinetic-energy
difference |xi_in|^2/2 - |xi_out|^2/2. The random-walk kernel is the
eps = 0 specialization, and the drifted kernel is the L = 1
specialization, so the documented kernel equivalences hold bitwise
rather than just in distribution.

Randomness is counter-based: every (chain, iteration) pair gets its own
stream derived from the master seed, so results do not depend on how
chains are scheduled across workers.
"""

from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from . import rng, screening
from .errors import NumericalError, CorrectionError
from .screening import ObjectiveWeights, ScreenContext, ScreeningResult

logger = logging.getLogger(__name__)

KERNEL_KINDS = ("rwm", "mala", "hmc")
GRAD_NORM_GUARD = 1e-12


@dataclass(frozen=True)
class KernelConfig:
    """One kernel's parameters; sigma may be deferred to a scale factor.

    sigma_lambda is the diagonal of Sigma^(1/2). When it is None the
    proposal scale is resolved at run start as sigma_scale times the
    componentwise standard deviation of the stage-initializing samples.
    """

    kind: str
    sigma_lambda: np.ndarray | None = None
    sigma_scale: float | None = None
    epsilon: float = 0.0
    leapfrog_L: int = 1
    beta: float = 10_000.0
    weights: ObjectiveWeights = field(default_factory=ObjectiveWeights)

    def __post_init__(self):
        if self.kind not in KERNEL_KINDS:
            raise ValueError(f"unknown kernel kind {self.kind!r}")
        if self.sigma_lambda is not None:
            sig = np.asarray(self.sigma_lambda, dtype=float)
            if not np.all(sig > 0.0):
                raise ValueError("sigma_lambda entries must be positive")
            object.__setattr__(self, "sigma_lambda", sig)
        elif self.sigma_scale is None:
            raise ValueError("need sigma_lambda or sigma_scale")
        if self.epsilon < 0.0:
            raise ValueError(f"epsilon must be nonnegative, got {self.epsilon}")
        if self.leapfrog_L < 1:
            raise ValueError(f"leapfrog_L must be at least 1, got {self.leapfrog_L}")
        if not self.beta > 0.0:
            raise ValueError(f"beta must be positive, got {self.beta}")

    @property
    def gradient_based(self) -> bool:
        return self.kind != "rwm"

    def resolved(self, sigma_init: np.ndarray) -> "KernelConfig":
        """Fix the proposal scale against a set of initializing samples."""
        if self.sigma_lambda is not None:
            return self
        sig = self.sigma_scale * np.asarray(sigma_init, dtype=float)
        return replace(self, sigma_lambda=sig, sigma_scale=None)


@dataclass(frozen=True)
class HomotopySchedule:
    """Stage layout of a homotopy run."""

    alphas: tuple
    per_stage_iterations: int
    burn_in: int
    refinement_iterations: int = 0

    def __post_init__(self):
        alphas = tuple(float(a) for a in self.alphas)
        if not alphas:
            raise ValueError("schedule needs at least one alpha")
        if any(not 0.0 <= a <= 1.0 for a in alphas):
            raise ValueError(f"alphas must lie in [0, 1], got {alphas}")
        if any(b <= a for a, b in zip(alphas, alphas[1:])):
            raise ValueError("alphas must be strictly increasing")
        object.__setattr__(self, "alphas", alphas)
        if self.per_stage_iterations < 0 or self.refinement_iterations < 0:
            raise ValueError("iteration counts must be nonnegative")
        if self.burn_in >= self.total_iterations and self.total_iterations > 0:
            raise ValueError("burn-in must leave at least one collected iteration")

    @property
    def total_iterations(self) -> int:
        return len(self.alphas) * self.per_stage_iterations + self.refinement_iterations


@dataclass
class Evaluation:
    """Target evaluation payload cached on a chain state."""

    log_pi: float
    j_star: float = math.nan
    result: ScreeningResult | None = None
    error: str | None = None

    @property
    def failed(self) -> bool:
        return self.error is not None


@dataclass
class ChainState:
    """One chain's position, caches, and counter-based RNG cursor."""

    chain_id: int
    lam: np.ndarray
    evaluation: Evaluation
    grad_unit: np.ndarray | None = None
    grad_degenerate: bool = False
    iteration: int = 0
    accepts: int = 0
    proposals: int = 0
    failed_proposals: int = 0
    n_evaluations: int = 0
    n_gradients: int = 0
    alive: bool = True
    error: str | None = None


class ScreeningTarget:
    """The sampling density -beta J*(lam; alpha) over costate space."""

    def __init__(self, ctx: ScreenContext, beta: float):
        self.ctx = ctx
        self.beta = float(beta)

    def evaluate(self, lam: np.ndarray) -> Evaluation:
        try:
            result = screening.evaluate(self.ctx, lam)
        except NumericalError as exc:
            return Evaluation(log_pi=-math.inf, error=str(exc))
        return Evaluation(
            log_pi=screening.log_density_of(result.j_star, self.beta),
            j_star=result.j_star,
            result=result,
        )

    def gradient_unit(self, lam: np.ndarray, ev: Evaluation) -> tuple[np.ndarray, bool]:
        """Unit direction of the log-density gradient at lam."""
        try:
            grad_j, degenerate = screening.frozen_gradient(
                self.ctx, lam, ev.result.tau_s_star, ev.result.tau_f_star
            )
        except NumericalError as exc:
            logger.debug("gradient failure treated as flat: %s", exc)
            return np.zeros(lam.shape[0]), True
        if degenerate:
            return np.zeros(lam.shape[0]), True
        grad_logpi = -self.beta * grad_j
        norm = float(np.linalg.norm(grad_logpi))
        if norm < GRAD_NORM_GUARD:
            return np.zeros(lam.shape[0]), True
        return grad_logpi / norm, False


class GaussianTarget:
    """Diagonal-Gaussian reference target for kernel validation."""

    def __init__(self, mean, std):
        self.mean = np.asarray(mean, dtype=float)
        self.std = np.asarray(std, dtype=float)

    def evaluate(self, lam: np.ndarray) -> Evaluation:
        z = (lam - self.mean) / self.std
        log_pi = -0.5 * float(z @ z)
        return Evaluation(log_pi=log_pi, j_star=-log_pi)

    def gradient_unit(self, lam: np.ndarray, ev: Evaluation) -> tuple[np.ndarray, bool]:
        grad = -(lam - self.mean) / self.std**2
        norm = float(np.linalg.norm(grad))
        if norm < GRAD_NORM_GUARD:
            return np.zeros(lam.shape[0]), True
        return grad / norm, False


def init_chain(chain_id: int, lam: np.ndarray, target, gradient_based: bool) -> ChainState:
    """Evaluate a starting point and build the chain's cache."""
    lam = np.array(lam, dtype=float)
    ev = target.evaluate(lam)
    state = ChainState(chain_id=chain_id, lam=lam, evaluation=ev, n_evaluations=1)
    if ev.failed:
        state.alive = False
        state.error = ev.error
        return state
    if gradient_based:
        state.grad_unit, state.grad_degenerate = target.gradient_unit(lam, ev)
        state.n_gradients = 1
    return state


def _transition(state: ChainState, cfg: KernelConfig, target, stream, eps: float, L: int) -> ChainState:
    """Shared Metropolis transition in standardized momentum coordinates."""
    xi0 = stream.standard_normal(state.lam.shape[0])
    u = stream.random()
    sigma = cfg.sigma_lambda

    lam = state.lam
    xi = xi0.copy()
    half = 0.5 * eps
    if eps != 0.0 and state.grad_unit is not None and not state.grad_degenerate:
        xi = xi + half * state.grad_unit

    n_evals = 0
    n_grads = 0
    ev = None
    grad_unit = None
    grad_degenerate = True
    failed = False
    for i in range(L):
        lam = lam + sigma * xi
        ev = target.evaluate(lam)
        n_evals += 1
        if ev.failed:
            failed = True
            break
        if cfg.gradient_based:
            grad_unit, grad_degenerate = target.gradient_unit(lam, ev)
            n_grads += 1
            if eps != 0.0 and not grad_degenerate:
                kick = eps if i < L - 1 else half
                xi = xi + kick * grad_unit

    state.iteration += 1
    state.proposals += 1
    state.n_evaluations += n_evals
    state.n_gradients += n_grads
    if failed:
        state.failed_proposals += 1
        logger.debug("chain %d: proposal rejected on failure: %s", state.chain_id, ev.error)
        return state

    log_a = (ev.log_pi - state.evaluation.log_pi) + 0.5 * (float(xi0 @ xi0) - float(xi @ xi))
    if math.isnan(log_a):
        state.failed_proposals += 1
        return state
    if log_a >= 0.0 or u < math.exp(log_a):
        state.lam = lam
        state.evaluation = ev
        state.grad_unit = grad_unit
        state.grad_degenerate = grad_degenerate
        state.accepts += 1
    return state


def rwm_step(state: ChainState, cfg: KernelConfig, target, stream) -> ChainState:
    """Symmetric random-walk proposal; accept on the density ratio."""
    return _transition(state, cfg, target, stream, eps=0.0, L=1)


def mala_step(state: ChainState, cfg: KernelConfig, target, stream) -> ChainState:
    """Unit-gradient drifted proposal with the asymmetric-ratio correction."""
    return _transition(state, cfg, target, stream, eps=cfg.epsilon, L=1)


def hmc_step(state: ChainState, cfg: KernelConfig, target, stream) -> ChainState:
    """L leapfrog steps on the standardized Hamiltonian, joint accept."""
    return _transition(state, cfg, target, stream, eps=cfg.epsilon, L=cfg.leapfrog_L)


_KERNELS = {"rwm": rwm_step, "mala": mala_step, "hmc": hmc_step}


@dataclass
class StageTrace:
    """Per-iteration cross-chain summaries of one stage."""

    stage: int
    alpha: float
    iterations: np.ndarray
    mean_j: np.ndarray
    mean_e: np.ndarray
    mean_dm: np.ndarray
    mean_tau_s: np.ndarray
    acceptance: np.ndarray


@dataclass
class CostateRecord:
    """One collected posterior sample with its screening summary."""

    chain_id: int
    iteration: int
    alpha: float
    stage: int
    lam: np.ndarray
    j_star: float
    e: float
    dm_frac: float
    tau_s: float
    tau_f: float
    node_index: int
    sample_index: int
    switch_count: int
    reward: float = math.nan


def _record_of(state: ChainState, alpha: float, stage: int) -> CostateRecord:
    res = state.evaluation.result
    return CostateRecord(
        chain_id=state.chain_id,
        iteration=state.iteration,
        alpha=alpha,
        stage=stage,
        lam=state.lam.copy(),
        j_star=state.evaluation.j_star,
        e=res.e if res is not None else math.nan,
        dm_frac=res.dm_frac if res is not None else math.nan,
        tau_s=res.tau_s_star if res is not None else math.nan,
        tau_f=res.tau_f_star if res is not None else math.nan,
        node_index=res.node_index if res is not None else -1,
        sample_index=res.sample_index if res is not None else -1,
        switch_count=res.switch_count if res is not None else -1,
    )


def _run_chain(state, iterations, cfg, target, master_seed, kernel, alpha, stage, burn_in):
    """Advance one chain; returns (state, per-iteration rows, records)."""
    rows = np.empty((iterations, 5))
    records = []
    for k in range(iterations):
        accepts_before = state.accepts
        stream = rng.chain_stream(master_seed, state.chain_id, state.iteration)
        state = kernel(state, cfg, target, stream)
        res = state.evaluation.result
        rows[k, 0] = state.evaluation.j_star
        rows[k, 1] = res.e if res is not None else math.nan
        rows[k, 2] = res.dm_frac if res is not None else math.nan
        rows[k, 3] = res.tau_s_star if res is not None else math.nan
        rows[k, 4] = 1.0 if state.accepts > accepts_before else 0.0
        if state.iteration > burn_in:
            records.append(_record_of(state, alpha, stage))
    return state, rows, records


def run_stage(
    chains: list,
    iterations: int,
    cfg: KernelConfig,
    target,
    master_seed: int,
    *,
    alpha: float = math.nan,
    stage: int = 0,
    burn_in: int = 0,
    collector: list | None = None,
    workers: int = 1,
) -> StageTrace:
    """Run every live chain for `iterations` steps of cfg's kernel.

    Chains are advanced independently (optionally on a thread pool; the
    counter-based streams make scheduling irrelevant to the results) and
    their per-iteration summaries are merged by chain id. States whose
    iteration counter exceeds burn_in are appended to the collector.
    """
    if cfg.sigma_lambda is None:
        raise ValueError("kernel config has an unresolved proposal scale")
    kernel = _KERNELS[cfg.kind]
    live = [c for c in chains if c.alive]
    if iterations == 0 or not live:
        empty = np.empty(0)
        return StageTrace(stage, alpha, np.empty(0, dtype=int), empty, empty, empty, empty, empty)

    def work(state):
        return _run_chain(state, iterations, cfg, target, master_seed, kernel, alpha, stage, burn_in)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            outcomes = list(pool.map(work, live))
    else:
        outcomes = [work(state) for state in live]

    stacked = np.stack([rows for _, rows, _ in outcomes])  # (chains, iters, 5)
    if collector is not None:
        for _, records in sorted(zip(live, (o[2] for o in outcomes)), key=lambda p: p[0].chain_id):
            collector.extend(records)

    first = live[0].iteration - iterations + 1
    means = _column_means(stacked[:, :, 0:4])
    return StageTrace(
        stage=stage,
        alpha=alpha,
        iterations=np.arange(first, first + iterations),
        mean_j=means[:, 0],
        mean_e=means[:, 1],
        mean_dm=means[:, 2],
        mean_tau_s=means[:, 3],
        acceptance=stacked[:, :, 4].mean(axis=0),
    )


def _column_means(block: np.ndarray) -> np.ndarray:
    """Mean over chains ignoring NaNs, NaN where no chain has a value."""
    finite = np.isfinite(block)
    counts = finite.sum(axis=0)
    sums = np.where(finite, block, 0.0).sum(axis=0)
    return np.where(counts > 0, sums / np.maximum(counts, 1), np.nan)


def sigma_init_of(lams: np.ndarray) -> np.ndarray:
    """Componentwise standard deviation of the initializing samples."""
    arr = np.asarray(lams, dtype=float)
    sig = arr.std(axis=0)
    if np.any(sig <= 0.0):
        raise ValueError("initial samples are degenerate in at least one component")
    return sig


def draw_initial_costates(
    ctx: ScreenContext,
    count: int,
    *,
    bound: float = 0.3,
    oversample: int = 8,
    master_seed: int = 0,
    workers: int = 1,
) -> np.ndarray:
    """Bootstrap chain seeds from a uniform reference distribution.

    Draws count * oversample costates uniformly in [-bound, bound]^4,
    screens each under ctx, and keeps the count best by objective.
    Stands in for an existing solution set or a trained generator when
    a run starts from nothing; the oversampling keeps hopeless draws
    (collisions, immediate escapes) out of the chain population.
    """
    if count < 1:
        raise ValueError(f"need at least one costate, got {count}")
    total = count * oversample
    lams = rng.substream(master_seed, rng.PURPOSE_SEARCH, 0).uniform(
        -bound, bound, size=(total, 4)
    )

    def objective(i):
        try:
            return screening.evaluate(ctx, lams[i]).j_star
        except NumericalError as exc:
            logger.debug("draw %d rejected: %s", i, exc)
            return math.inf

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            j = np.fromiter(pool.map(objective, range(total)), dtype=float, count=total)
    else:
        j = np.fromiter((objective(i) for i in range(total)), dtype=float, count=total)
    if not np.isfinite(j).any():
        raise NumericalError("every uniform draw failed screening; widen or shrink the bound")
    keep = np.sort(np.argsort(j, kind="stable")[:count])
    return lams[keep]


def _refresh_chain(state: ChainState, target, gradient_based: bool, *, count: bool = True) -> None:
    """Re-evaluate a carried chain state under a new stage's target."""
    ev = target.evaluate(state.lam)
    if count:
        state.n_evaluations += 1
    if ev.failed:
        state.alive = False
        state.error = ev.error
        logger.warning("chain %d lost at stage refresh: %s", state.chain_id, ev.error)
        return
    state.evaluation = ev
    if gradient_based:
        state.grad_unit, state.grad_degenerate = target.gradient_unit(state.lam, ev)
        if count:
            state.n_gradients += 1
    else:
        state.grad_unit = None
        state.grad_degenerate = False


def _concat_traces(parts: list) -> StageTrace:
    if len(parts) == 1:
        return parts[0]
    head = parts[0]
    cat = lambda pick: np.concatenate([pick(p) for p in parts])
    return StageTrace(
        stage=head.stage,
        alpha=head.alpha,
        iterations=cat(lambda p: p.iterations),
        mean_j=cat(lambda p: p.mean_j),
        mean_e=cat(lambda p: p.mean_e),
        mean_dm=cat(lambda p: p.mean_dm),
        mean_tau_s=cat(lambda p: p.mean_tau_s),
        acceptance=cat(lambda p: p.acceptance),
    )


@dataclass
class HomotopyResult:
    """Everything a finished (or interrupted) homotopy run produced."""

    records: list
    traces: list
    chains: list
    sigma_init: np.ndarray
    reward_coefficients: tuple[float, float]


# ---------------------------------------------------------------------------
# snapshot files

SNAPSHOT_VERSION = 1


def save_snapshot(path, *, master_seed, config_hash, phase, done_in_stage, chains, records, traces, sigma_init, sigma_stage, sigma_refine):
    """Persist the full mutable state of a homotopy run to one npz file."""
    from pathlib import Path

    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    n = len(chains)
    lam_dim = chains[0].lam.shape[0] if n else 0
    chain_block = {
        "chain_id": np.array([c.chain_id for c in chains], dtype=np.int64),
        "lam": np.array([c.lam for c in chains], dtype=float).reshape(n, lam_dim),
        "iteration": np.array([c.iteration for c in chains], dtype=np.int64),
        "accepts": np.array([c.accepts for c in chains], dtype=np.int64),
        "proposals": np.array([c.proposals for c in chains], dtype=np.int64),
        "failed_proposals": np.array([c.failed_proposals for c in chains], dtype=np.int64),
        "n_evaluations": np.array([c.n_evaluations for c in chains], dtype=np.int64),
        "n_gradients": np.array([c.n_gradients for c in chains], dtype=np.int64),
        "alive": np.array([c.alive for c in chains], dtype=bool),
        "chain_error": np.array([c.error or "" for c in chains], dtype=np.str_),
    }
    rec_block = {
        "rec_chain_id": np.array([r.chain_id for r in records], dtype=np.int64),
        "rec_iteration": np.array([r.iteration for r in records], dtype=np.int64),
        "rec_alpha": np.array([r.alpha for r in records], dtype=float),
        "rec_stage": np.array([r.stage for r in records], dtype=np.int64),
        "rec_lam": np.array([r.lam for r in records], dtype=float).reshape(len(records), lam_dim),
        "rec_j": np.array([r.j_star for r in records], dtype=float),
        "rec_e": np.array([r.e for r in records], dtype=float),
        "rec_dm": np.array([r.dm_frac for r in records], dtype=float),
        "rec_tau_s": np.array([r.tau_s for r in records], dtype=float),
        "rec_tau_f": np.array([r.tau_f for r in records], dtype=float),
        "rec_node": np.array([r.node_index for r in records], dtype=np.int64),
        "rec_sample": np.array([r.sample_index for r in records], dtype=np.int64),
        "rec_switches": np.array([r.switch_count for r in records], dtype=np.int64),
        "rec_reward": np.array([r.reward for r in records], dtype=float),
    }
    tr_block = {
        "tr_stage": np.concatenate([np.full(t.iterations.shape[0], t.stage, dtype=np.int64) for t in traces]) if traces else np.empty(0, dtype=np.int64),
        "tr_alpha": np.concatenate([np.full(t.iterations.shape[0], t.alpha) for t in traces]) if traces else np.empty(0),
        "tr_iteration": np.concatenate([t.iterations for t in traces]) if traces else np.empty(0, dtype=np.int64),
        "tr_j": np.concatenate([t.mean_j for t in traces]) if traces else np.empty(0),
        "tr_e": np.concatenate([t.mean_e for t in traces]) if traces else np.empty(0),
        "tr_dm": np.concatenate([t.mean_dm for t in traces]) if traces else np.empty(0),
        "tr_tau_s": np.concatenate([t.mean_tau_s for t in traces]) if traces else np.empty(0),
        "tr_acceptance": np.concatenate([t.acceptance for t in traces]) if traces else np.empty(0),
    }
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as fh:
        np.savez(
            fh,
            snapshot_version=np.int64(SNAPSHOT_VERSION),
            master_seed=np.int64(master_seed),
            config_hash=np.str_(config_hash),
            phase=np.int64(phase),
            done_in_stage=np.int64(done_in_stage),
            sigma_init=np.asarray(sigma_init, dtype=float),
            sigma_stage=np.asarray(sigma_stage, dtype=float),
            sigma_refine=np.asarray(sigma_refine, dtype=float),
            **chain_block,
            **rec_block,
            **tr_block,
        )
    tmp.replace(path)


def load_snapshot(path) -> dict:
    """Read a snapshot back into plain chains/records/traces structures."""
    with np.load(path) as z:
        version = int(z["snapshot_version"])
        if version != SNAPSHOT_VERSION:
            raise ValueError(f"unsupported snapshot version {version}")
        chains = []
        for i in range(z["chain_id"].shape[0]):
            state = ChainState(
                chain_id=int(z["chain_id"][i]),
                lam=z["lam"][i].copy(),
                evaluation=Evaluation(log_pi=-math.inf, error="stale snapshot cache"),
                iteration=int(z["iteration"][i]),
                accepts=int(z["accepts"][i]),
                proposals=int(z["proposals"][i]),
                failed_proposals=int(z["failed_proposals"][i]),
                n_evaluations=int(z["n_evaluations"][i]),
                n_gradients=int(z["n_gradients"][i]),
                alive=bool(z["alive"][i]),
            )
            err = str(z["chain_error"][i])
            state.error = err or None
            chains.append(state)
        records = []
        for i in range(z["rec_chain_id"].shape[0]):
            records.append(
                CostateRecord(
                    chain_id=int(z["rec_chain_id"][i]),
                    iteration=int(z["rec_iteration"][i]),
                    alpha=float(z["rec_alpha"][i]),
                    stage=int(z["rec_stage"][i]),
                    lam=z["rec_lam"][i].copy(),
                    j_star=float(z["rec_j"][i]),
                    e=float(z["rec_e"][i]),
                    dm_frac=float(z["rec_dm"][i]),
                    tau_s=float(z["rec_tau_s"][i]),
                    tau_f=float(z["rec_tau_f"][i]),
                    node_index=int(z["rec_node"][i]),
                    sample_index=int(z["rec_sample"][i]),
                    switch_count=int(z["rec_switches"][i]),
                    reward=float(z["rec_reward"][i]),
                )
            )
        traces = []
        stages = z["tr_stage"]
        for s in np.unique(stages):
            m = stages == s
            traces.append(
                StageTrace(
                    stage=int(s),
                    alpha=float(z["tr_alpha"][m][0]),
                    iterations=z["tr_iteration"][m].copy(),
                    mean_j=z["tr_j"][m].copy(),
                    mean_e=z["tr_e"][m].copy(),
                    mean_dm=z["tr_dm"][m].copy(),
                    mean_tau_s=z["tr_tau_s"][m].copy(),
                    acceptance=z["tr_acceptance"][m].copy(),
                )
            )
        return {
            "master_seed": int(z["master_seed"]),
            "config_hash": str(z["config_hash"]),
            "phase": int(z["phase"]),
            "done_in_stage": int(z["done_in_stage"]),
            "sigma_init": z["sigma_init"].copy(),
            "sigma_stage": z["sigma_stage"].copy(),
            "sigma_refine": z["sigma_refine"].copy(),
            "chains": chains,
            "records": records,
            "traces": traces,
        }


# ---------------------------------------------------------------------------
# homotopy driver


def default_context_factory(**context_kwargs):
    """Build stage contexts, seeding orbit corrections by continuation."""

    def factory(alpha: float, prev: ScreenContext | None) -> ScreenContext:
        seeds = {}
        if prev is not None:
            seeds["depart_vy_seed"] = float(prev.depart.initial_state[4])
            seeds["target_vy_seed"] = float(prev.samples.orbit.initial_state[4])
        return screening.make_context(alpha, **context_kwargs, **seeds)

    return factory


def run_homotopy(
    initial_lams,
    schedule: HomotopySchedule,
    cfg: KernelConfig,
    refine_cfg: KernelConfig | None = None,
    *,
    master_seed: int,
    workers: int = 1,
    context_factory=None,
    snapshot_path=None,
    snapshot_every: int | None = None,
    config_hash: str = "",
    resume: bool = False,
    **context_kwargs,
) -> HomotopyResult:
    """Carry a population of chains across the alpha schedule.

    Each stage rebuilds the system and boundary orbits at its alpha,
    re-evaluates every carried chain state there, runs the kernel, and
    hands the terminal states to the next stage. The optional refinement
    stage reruns the final alpha with an adapted kernel. Records are
    collected once a chain's cumulative iteration count passes the
    schedule's burn-in, and rewards are calibrated over the collected
    objectives at the end.

    With snapshot_path set, progress is persisted every snapshot_every
    iterations (and at stage ends); resume=True picks up from such a
    file and, because randomness is keyed by (chain, iteration) and
    orbit corrections are cached, reproduces the uninterrupted run
    bitwise.
    """
    from pathlib import Path

    if refine_cfg is None:
        refine_cfg = cfg
    if schedule.refinement_iterations > 0 and refine_cfg.kind != cfg.kind:
        raise ValueError("refinement must keep the kernel kind (adapted parameters only)")
    if context_factory is None:
        context_factory = default_context_factory(**context_kwargs)
    elif context_kwargs:
        raise ValueError("context_kwargs only apply to the default context factory")

    stages = [(i, a, schedule.per_stage_iterations, None) for i, a in enumerate(schedule.alphas)]
    if schedule.refinement_iterations > 0:
        stages.append((len(schedule.alphas), schedule.alphas[-1], schedule.refinement_iterations, "refine"))

    records: list = []
    traces: list = []
    start_phase = 0
    start_done = 0
    chains: list = []

    if resume:
        if snapshot_path is None or not Path(snapshot_path).exists():
            raise FileNotFoundError("resume requested but no snapshot file found")
        snap = load_snapshot(snapshot_path)
        if snap["config_hash"] != config_hash:
            from .errors import ResumeMismatchError

            raise ResumeMismatchError(
                f"snapshot was written under config {snap['config_hash']!r}, "
                f"current config is {config_hash!r}"
            )
        if snap["master_seed"] != master_seed:
            from .errors import ResumeMismatchError

            raise ResumeMismatchError("snapshot master seed differs from the requested seed")
        sigma_init = snap["sigma_init"]
        cfg = replace(cfg, sigma_lambda=snap["sigma_stage"], sigma_scale=None)
        refine_cfg = replace(refine_cfg, sigma_lambda=snap["sigma_refine"], sigma_scale=None)
        chains = snap["chains"]
        records = snap["records"]
        traces = snap["traces"]
        start_phase = snap["phase"]
        start_done = snap["done_in_stage"]
    else:
        lams = np.asarray(initial_lams, dtype=float)
        if lams.ndim != 2:
            raise ValueError("initial samples must be a 2-D array of costates")
        sigma_init = sigma_init_of(lams)
        logger.info("sigma_init from %d samples: %s", lams.shape[0], sigma_init)
        cfg = cfg.resolved(sigma_init)
        refine_cfg = refine_cfg.resolved(sigma_init)
        chains = [
            ChainState(chain_id=i, lam=lams[i].copy(), evaluation=Evaluation(log_pi=-math.inf), alive=True)
            for i in range(lams.shape[0])
        ]

    def snapshot(phase, done):
        if snapshot_path is None:
            return
        save_snapshot(
            snapshot_path,
            master_seed=master_seed,
            config_hash=config_hash,
            phase=phase,
            done_in_stage=done,
            chains=chains,
            records=records,
            traces=traces,
            sigma_init=sigma_init,
            sigma_stage=cfg.sigma_lambda,
            sigma_refine=refine_cfg.sigma_lambda,
        )

    prev_ctx: ScreenContext | None = None
    for stage_idx, alpha, iterations, tag in stages:
        stage_cfg = refine_cfg if tag == "refine" else cfg
        if stage_idx < start_phase:
            # Stage finished before the snapshot was taken.  Rebuild its
            # context anyway: the next stage seeds its orbit corrections from
            # this one, and resuming must replay that chain bit for bit.
            prev_ctx = context_factory(alpha, prev_ctx)
            continue
        try:
            ctx = context_factory(alpha, prev_ctx)
        except CorrectionError as exc:
            snapshot(stage_idx, 0)
            raise CorrectionError(
                f"orbit correction failed at alpha={alpha}: {exc}; snapshot saved"
            ) from exc
        target = ScreeningTarget(ctx, stage_cfg.beta)
        done = start_done if stage_idx == start_phase else 0
        if done == 0:
            for state in chains:
                if state.alive:
                    _refresh_chain(state, target, stage_cfg.gradient_based)
            if not any(c.alive for c in chains):
                raise NumericalError(f"all chains failed evaluation at alpha={alpha}")
        else:
            for state in chains:  # resume mid-stage: rebuild caches, keep counters
                if state.alive:
                    _refresh_chain(state, target, stage_cfg.gradient_based, count=False)
        if iterations == 0 and schedule.burn_in == 0:
            # identity pipeline: with no kernel steps the stage's dataset
            # is the re-evaluated population itself
            for state in chains:
                if state.alive:
                    records.append(_record_of(state, alpha, stage_idx))
        # a mid-stage resume already holds the first chunks' trace
        parts = [t for t in traces if t.stage == stage_idx]
        finished = [t for t in traces if t.stage != stage_idx]
        while done < iterations:
            chunk = iterations - done if snapshot_every is None else min(snapshot_every, iterations - done)
            parts.append(
                run_stage(
                    chains,
                    chunk,
                    stage_cfg,
                    target,
                    master_seed,
                    alpha=alpha,
                    stage=stage_idx,
                    burn_in=schedule.burn_in,
                    collector=records,
                    workers=workers,
                )
            )
            done += chunk
            traces = sorted(finished + [_concat_traces(parts)], key=lambda t: t.stage)
            if done < iterations:
                snapshot(stage_idx, done)
        snapshot(stage_idx + 1, 0)
        prev_ctx = ctx
        n_alive = sum(c.alive for c in chains)
        logger.info(
            "stage %d (alpha=%.3f) done: %d/%d chains alive, %d records",
            stage_idx, alpha, n_alive, len(chains), len(records),
        )

    # snapshot cadence chunks the stages, which would otherwise leak into
    # the collection order
    records.sort(key=lambda r: (r.stage, r.chain_id, r.iteration))
    if records:
        c1, c2 = screening.calibrate_reward([r.j_star for r in records])
        for r in records:
            r.reward = screening.reward(r.j_star, c1, c2)
    else:
        c1, c2 = 1.0, 0.0
    snapshot(len(stages), 0)
    return HomotopyResult(
        records=records,
        traces=traces,
        chains=chains,
        sigma_init=sigma_init,
        reward_coefficients=(c1, c2),
    )
