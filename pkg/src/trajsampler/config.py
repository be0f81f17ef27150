"""Run configuration: YAML loading, strict validation, canonical hashing.

A run file is a nested mapping with one section per pipeline component.
Unknown keys anywhere are rejected so typos cannot silently fall back to
defaults. The configuration hash is computed over the canonical JSON form
of the merged settings and stamped into snapshots, datasets and
manifests, which is what makes resume mismatches detectable.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field, fields
from pathlib import Path

import yaml

from .diffusion import DiffusionConfig
from .errors import ConfigError
from .mcmc import HomotopySchedule, KernelConfig
from .propagator import PropagatorOptions
from .screening import DEFAULT_E_GUARD, DEFAULT_TAU_S_MAX, ObjectiveWeights
from .systems import SpacecraftConfig, UnitScales, JUPITER_EUROPA
from . import orbits, systems

HASH_LENGTH = 12


@dataclass(frozen=True)
class SearchConfig:
    """Settings for drawing initial costates by random search."""

    bound: float = 0.3
    oversample: int = 8

    def __post_init__(self):
        if self.bound <= 0.0:
            raise ConfigError(f"search bound must be positive, got {self.bound}")
        if self.oversample < 1:
            raise ConfigError("oversample factor must be at least 1")


@dataclass(frozen=True)
class RunConfig:
    """Validated settings of one full pipeline run."""

    seed: int
    output_dir: str
    workers: int
    spacecraft: SpacecraftConfig
    spacecraft_units: UnitScales
    propagator: PropagatorOptions
    weights: ObjectiveWeights
    n_samples: int
    tau_s_max: float
    e_guard: float
    schedule: HomotopySchedule
    kernel: KernelConfig
    refine_kernel: KernelConfig | None
    n_chains: int
    initial_samples: str | None
    search: SearchConfig
    diffusion: DiffusionConfig
    snapshot_every: int
    config_hash: str
    raw: dict = field(repr=False)

    def context_kwargs(self, cache_dir=None) -> dict:
        """Keyword block for screening.make_context via the homotopy."""
        return {
            "weights": self.weights,
            "n_samples": self.n_samples,
            "tau_s_max": self.tau_s_max,
            "e_guard": self.e_guard,
            "options": self.propagator,
            "spacecraft": self.spacecraft,
            "cache_dir": cache_dir,
        }


def _take(section: dict, allowed: dict, where: str) -> dict:
    """Merge a mapping over defaults, rejecting unknown keys."""
    if section is None:
        return dict(allowed)
    if not isinstance(section, dict):
        raise ConfigError(f"{where} must be a mapping")
    unknown = set(section) - set(allowed)
    if unknown:
        raise ConfigError(f"unknown keys in {where}: {sorted(unknown)}")
    merged = dict(allowed)
    merged.update(section)
    return merged


def config_hash_of(raw: dict) -> str:
    """Stable short hash of the canonical JSON form."""
    canon = json.dumps(raw, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(canon.encode()).hexdigest()[:HASH_LENGTH]


_TOP_KEYS = {
    "seed": 0,
    "output_dir": "runs/out",
    "workers": 1,
    "spacecraft": None,
    "propagator": None,
    "screening": None,
    "schedule": None,
    "kernel": None,
    "refine_kernel": None,
    "chains": None,
    "diffusion": None,
    "snapshot_every": 50,
}


def parse_config(raw: dict) -> RunConfig:
    """Validate a raw mapping into a RunConfig."""
    if not isinstance(raw, dict):
        raise ConfigError("run configuration must be a mapping")
    top = _take(raw, _TOP_KEYS, "run config")

    sc = _take(top["spacecraft"], {
        "thrust_n": systems.REFERENCE_THRUST_N,
        "isp_s": systems.REFERENCE_ISP_S,
        "wet_mass_kg": systems.WET_MASS_KG,
        "dry_mass_kg": systems.DRY_MASS_KG,
    }, "spacecraft")
    prop = _take(top["propagator"], {
        "rel_tol": 1e-12, "abs_tol": 1e-12, "max_step": 1e-2,
        "switch_tol": 1e-13, "collision_radius": 1e-6,
    }, "propagator")
    scr = _take(top["screening"], {
        "kappa1": 1.2, "kappa2": 1e-6, "beta": 10_000.0,
        "n_samples": orbits.DEFAULT_SAMPLES,
        "tau_s_max": DEFAULT_TAU_S_MAX, "e_guard": DEFAULT_E_GUARD,
    }, "screening")
    sched = _take(top["schedule"], {
        "alphas": [0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 1.0],
        "per_stage_iterations": 25, "burn_in": 270, "refinement_iterations": 100,
    }, "schedule")
    kern = _take(top["kernel"], {
        "kind": "mala", "sigma_scale": 0.02, "sigma_lambda": None,
        "epsilon": 2.5, "leapfrog_L": 1, "beta": 10_000.0,
    }, "kernel")
    chains = _take(top["chains"], {
        "count": 1920, "initial_samples": None,
        "search": None,
    }, "chains")
    search = _take(chains["search"], {"bound": 0.3, "oversample": 8}, "chains.search")
    diff = _take(top["diffusion"], {f.name: f.default for f in fields(DiffusionConfig)},
                 "diffusion")

    try:
        weights = ObjectiveWeights(kappa1=scr["kappa1"], kappa2=scr["kappa2"], beta=scr["beta"])
        spacecraft = SpacecraftConfig.from_si(
            thrust_n=sc["thrust_n"], isp_s=sc["isp_s"],
            wet_mass_kg=sc["wet_mass_kg"], dry_mass_kg=sc["dry_mass_kg"],
            units=JUPITER_EUROPA,
        )
        options = PropagatorOptions(**prop)
        schedule = HomotopySchedule(
            alphas=tuple(sched["alphas"]),
            per_stage_iterations=int(sched["per_stage_iterations"]),
            burn_in=int(sched["burn_in"]),
            refinement_iterations=int(sched["refinement_iterations"]),
        )

        def kernel_of(block, where):
            block = _take(block, {
                "kind": kern["kind"], "sigma_scale": None, "sigma_lambda": None,
                "epsilon": 0.0, "leapfrog_L": 1, "beta": weights.beta,
            }, where)
            return KernelConfig(
                kind=block["kind"],
                sigma_lambda=block["sigma_lambda"],
                sigma_scale=block["sigma_scale"],
                epsilon=float(block["epsilon"]),
                leapfrog_L=int(block["leapfrog_L"]),
                beta=float(block["beta"]),
                weights=weights,
            )

        kernel = KernelConfig(
            kind=kern["kind"], sigma_lambda=kern["sigma_lambda"],
            sigma_scale=kern["sigma_scale"], epsilon=float(kern["epsilon"]),
            leapfrog_L=int(kern["leapfrog_L"]), beta=float(kern["beta"]),
            weights=weights,
        )
        refine = kernel_of(top["refine_kernel"], "refine_kernel") \
            if top["refine_kernel"] is not None else None
        diffusion = DiffusionConfig(**diff)
        search_cfg = SearchConfig(**search)
    except (ValueError, TypeError) as exc:
        raise ConfigError(str(exc)) from exc

    n_chains = int(chains["count"])
    if n_chains < 1:
        raise ConfigError(f"chain count must be positive, got {n_chains}")
    snapshot_every = int(top["snapshot_every"])
    if snapshot_every < 1:
        raise ConfigError("snapshot_every must be positive")

    return RunConfig(
        seed=int(top["seed"]),
        output_dir=str(top["output_dir"]),
        workers=int(top["workers"]),
        spacecraft=spacecraft,
        spacecraft_units=JUPITER_EUROPA,
        propagator=options,
        weights=weights,
        n_samples=int(scr["n_samples"]),
        tau_s_max=float(scr["tau_s_max"]),
        e_guard=float(scr["e_guard"]),
        schedule=schedule,
        kernel=kernel,
        refine_kernel=refine,
        n_chains=n_chains,
        initial_samples=chains["initial_samples"],
        search=search_cfg,
        diffusion=diffusion,
        snapshot_every=snapshot_every,
        config_hash=config_hash_of(raw),
        raw=raw,
    )


def load_config(path) -> RunConfig:
    """Read and validate a YAML run file."""
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"run file not found: {path}")
    with open(path) as fh:
        try:
            raw = yaml.safe_load(fh)
        except yaml.YAMLError as exc:
            raise ConfigError(f"cannot parse {path}: {exc}") from exc
    return parse_config(raw if raw is not None else {})
