"""Command-line front end tying the pipeline stages together.

Subcommands: orbits, propagate, screen, homotopy, train, finetune,
sample, analyze. Every command validates its configuration slice, runs
deterministically for a fixed seed, writes a run manifest next to its
outputs, and exits 0 on success, 2 on configuration errors, 3 on
numerical failures, 4 on resume mismatches.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import analysis, datasets, diffusion, mcmc, screening, systems
from .config import RunConfig, load_config, parse_config
from .errors import ConfigError, NumericalError, ResumeMismatchError

logger = logging.getLogger(__name__)

OUTPUT_DIR_ENV = "TRAJSAMPLER_OUTPUT_DIR"

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERICAL = 3
EXIT_RESUME = 4


def _run_config(args) -> RunConfig:
    """The effective configuration: file settings plus CLI overrides."""
    if args.config is not None:
        cfg = load_config(args.config)
    else:
        cfg = parse_config({})
    if args.seed is not None:
        raw = dict(cfg.raw or {})
        raw["seed"] = int(args.seed)
        cfg = parse_config(raw)
    return cfg


def _output_dir(args, cfg: RunConfig) -> Path:
    """Flag beats config file beats environment beats built-in default."""
    if args.output_dir is not None:
        return Path(args.output_dir)
    if "output_dir" in (cfg.raw or {}):
        return Path(cfg.output_dir)
    env = os.environ.get(OUTPUT_DIR_ENV)
    if env:
        return Path(env)
    return Path(cfg.output_dir)


def _finish(out_dir: Path, cfg: RunConfig, command: str, t0: float) -> None:
    datasets.write_manifest(
        out_dir,
        config_hash=cfg.config_hash,
        seed=cfg.seed,
        wall_time_s=time.perf_counter() - t0,
        command=command,
    )


def _write_orbit_export(path, samples, role: str, manifest_hash: str) -> None:
    orbit = samples.orbit
    lines = [
        "# trajsampler orbit-export v1",
        f"# manifest: {manifest_hash}",
        f"# role: {role} alpha: {float(orbit.alpha)!r} mu: {float(orbit.mu)!r}",
        f"# x0: {float(orbit.initial_state[0])!r} vy: {float(orbit.initial_state[4])!r}",
        f"# period: {float(orbit.period)!r} defect: {float(orbit.defect)!r}",
        "tau_f r1 r2 r3 v1 v2 v3",
    ]
    for i in range(samples.n):
        row = [samples.tau_f[i]] + list(samples.states[i])
        lines.append(" ".join(repr(float(v)) for v in row))
    Path(path).write_text("\n".join(lines) + "\n")


def cmd_orbits(args, cfg: RunConfig, out_dir: Path) -> int:
    from . import orbits

    cache_dir = out_dir / "orbit-cache"
    for role in ("depart", "target"):
        samples = orbits.load_boundary_samples(
            args.alpha, role, cache_dir=cache_dir, n=cfg.n_samples
        )
        orbit = samples.orbit
        _write_orbit_export(
            out_dir / f"orbit_{role}.txt", samples, role, cfg.config_hash
        )
        print(
            f"{role}: x0={orbit.initial_state[0]:.7f} vy={orbit.initial_state[4]:.7f} "
            f"period={orbit.period:.6f} TU defect={orbit.defect:.3e} "
            f"({samples.n} samples)"
        )
    return EXIT_OK


TRAJECTORY_COLUMNS = (
    "tau r1 r2 r3 v1 v2 v3 m "
    "lam_r1 lam_r2 lam_r3 lam_v1 lam_v2 lam_v3 lam_m switching throttle"
)


def cmd_propagate(args, cfg: RunConfig, out_dir: Path) -> int:
    lams = datasets.read_costate_samples(args.costate_file)
    if lams.shape[0] == 0:
        raise ConfigError(f"no costates in {args.costate_file}")
    ctx = screening.make_context(
        args.alpha, **cfg.context_kwargs(cache_dir=out_dir / "orbit-cache")
    )
    from . import propagator

    for i, lam in enumerate(lams):
        y0 = screening.initial_extremal_state(ctx.initial_rv, lam)
        traj = propagator.propagate(
            y0, cfg.tau_s_max, ctx.system, ctx.spacecraft, ctx.options
        )
        path = out_dir / f"trajectory_{i:04d}.txt"
        lines = [
            "# trajsampler trajectory v1",
            f"# manifest: {cfg.config_hash}",
            f"# alpha: {float(args.alpha)!r}",
            "# costate: " + " ".join(repr(float(v)) for v in lam),
            "# switch_times: " + " ".join(repr(float(t)) for t in traj.switch_times),
            f"# t_final: {float(traj.t_final)!r}",
            TRAJECTORY_COLUMNS,
        ]
        for k in range(traj.n_nodes):
            row = [traj.times[k], *traj.states[k], traj.switching[k], traj.throttle[k]]
            lines.append(" ".join(repr(float(v)) for v in row))
        path.write_text("\n".join(lines) + "\n")
        print(
            f"{path.name}: {traj.n_nodes} nodes, {traj.switch_times.shape[0]} switches, "
            f"m_final={traj.states[-1][6]:.6f}"
        )
    return EXIT_OK


SCREEN_COLUMNS = (
    "lam_rx", "lam_ry", "lam_vx", "lam_vy",
    "tau_s", "tau_f", "e", "dm_frac", "j_star",
    "node_index", "sample_index", "switch_count",
)


def cmd_screen(args, cfg: RunConfig, out_dir: Path) -> int:
    lams = datasets.read_costate_samples(args.samples)
    ctx = screening.make_context(
        args.alpha, **cfg.context_kwargs(cache_dir=out_dir / "orbit-cache")
    )
    lines = [
        "# trajsampler screening-results v1",
        f"# manifest: {cfg.config_hash}",
        f"# alpha: {float(args.alpha)!r}",
        " ".join(SCREEN_COLUMNS),
    ]
    failures = 0
    for lam in lams:
        try:
            res = screening.evaluate(ctx, lam)
            values = [res.tau_s_star, res.tau_f_star, res.e, res.dm_frac, res.j_star]
            tail = [str(res.node_index), str(res.sample_index), str(res.switch_count)]
        except NumericalError as exc:
            logger.warning("screening failed: %s", exc)
            failures += 1
            values = [np.nan] * 5
            tail = ["-1", "-1", "-1"]
        lines.append(
            " ".join(repr(float(v)) for v in lam)
            + " " + " ".join(repr(float(v)) for v in values)
            + " " + " ".join(tail)
        )
    path = out_dir / "screening_results.txt"
    path.write_text("\n".join(lines) + "\n")
    print(f"screened {lams.shape[0]} costates ({failures} failures) -> {path}")
    return EXIT_OK


def cmd_homotopy(args, cfg: RunConfig, out_dir: Path) -> int:
    snapshot_path = out_dir / "snapshot.npz"
    workers = args.workers if args.workers is not None else cfg.workers
    context_kwargs = cfg.context_kwargs(cache_dir=out_dir / "orbit-cache")

    if args.resume:
        if not snapshot_path.exists():
            raise ConfigError(f"no snapshot to resume from at {snapshot_path}")
        initial = None
    elif cfg.initial_samples is not None:
        initial = datasets.read_costate_samples(cfg.initial_samples)
        if initial.shape[0] < cfg.n_chains:
            raise ConfigError(
                f"{cfg.initial_samples} holds {initial.shape[0]} costates, "
                f"need {cfg.n_chains}"
            )
        initial = initial[: cfg.n_chains]
    else:
        first_alpha = cfg.schedule.alphas[0]
        logger.info(
            "drawing %d initial costates at alpha=%.3f (bound %.3f, x%d oversampling)",
            cfg.n_chains, first_alpha, cfg.search.bound, cfg.search.oversample,
        )
        ctx = screening.make_context(first_alpha, **context_kwargs)
        initial = mcmc.draw_initial_costates(
            ctx,
            cfg.n_chains,
            bound=cfg.search.bound,
            oversample=cfg.search.oversample,
            master_seed=cfg.seed,
            workers=workers,
        )
        datasets.write_costate_samples(
            out_dir / "initial_costates.txt", initial,
            alpha=first_alpha, manifest_hash=cfg.config_hash,
        )

    try:
        result = mcmc.run_homotopy(
            initial,
            cfg.schedule,
            cfg.kernel,
            cfg.refine_kernel,
            master_seed=cfg.seed,
            workers=workers,
            snapshot_path=snapshot_path,
            snapshot_every=cfg.snapshot_every,
            config_hash=cfg.config_hash,
            resume=args.resume,
            **context_kwargs,
        )
    except ValueError as exc:
        # run_homotopy flags caller-supplied inconsistencies (degenerate
        # initial samples, kernel mismatches) as ValueError
        raise ConfigError(str(exc)) from exc

    datasets.write_costate_dataset(
        out_dir / "costates.txt", result.records, manifest_hash=cfg.config_hash
    )
    datasets.write_trace_file(
        out_dir / "trace.txt", result.traces, manifest_hash=cfg.config_hash
    )
    c1, c2 = result.reward_coefficients
    alive = sum(1 for c in result.chains if c.alive)
    print(
        f"collected {len(result.records)} records from {alive}/{len(result.chains)} "
        f"live chains over {len(result.traces)} stages "
        f"(reward calibration c1={c1:.6g}, c2={c2:.6g})"
    )
    return EXIT_OK


def _load_records(path):
    records = datasets.read_costate_dataset(path)
    if not records:
        raise ConfigError(f"dataset {path} is empty")
    return records


def cmd_train(args, cfg: RunConfig, out_dir: Path) -> int:
    records = _load_records(args.dataset)
    lam0 = np.array([r.lam for r in records])
    alpha = np.array([r.alpha for r in records])
    # The generator is first fit to the raw sample set; reward weighting
    # only enters through the fine-tuning path.
    params, stats = diffusion.train(
        lam0, alpha, cfg.diffusion, rewards=None, seed=cfg.seed
    )
    out = Path(args.out) if args.out else out_dir / "baseline.npz"
    out.parent.mkdir(parents=True, exist_ok=True)
    diffusion.save_checkpoint(
        out, params, stats,
        meta={"manifest": cfg.config_hash, "seed": cfg.seed, "kind": "baseline"},
    )
    print(f"trained baseline on {lam0.shape[0]} records -> {out}")
    return EXIT_OK


def cmd_finetune(args, cfg: RunConfig, out_dir: Path) -> int:
    records = _load_records(args.dataset)
    baseline, stats, _ = diffusion.load_checkpoint(args.baseline)
    lam0 = np.array([r.lam for r in records])
    alpha = np.array([r.alpha for r in records])
    rewards = np.array([r.reward for r in records])
    j_values = np.array([r.j_star for r in records])
    if not np.all(np.isfinite(rewards)):
        raise ConfigError(
            f"{args.dataset} carries uncalibrated rewards; run homotopy to completion first"
        )
    params = diffusion.finetune(
        baseline, stats, lam0, alpha, rewards, j_values, seed=cfg.seed
    )
    out = Path(args.out) if args.out else out_dir / "finetuned.npz"
    out.parent.mkdir(parents=True, exist_ok=True)
    diffusion.save_checkpoint(
        out, params, stats,
        meta={"manifest": cfg.config_hash, "seed": cfg.seed, "kind": "finetuned"},
    )
    print(f"fine-tuned on {lam0.shape[0]} records -> {out}")
    return EXIT_OK


def cmd_sample(args, cfg: RunConfig, out_dir: Path) -> int:
    params, stats, _ = diffusion.load_checkpoint(args.model)
    lams = diffusion.sample(
        params, stats, args.alpha,
        w=args.guidance, count=args.count, seed=cfg.seed,
    )
    path = out_dir / f"samples_a{args.alpha:.4f}.txt"
    datasets.write_costate_samples(
        path, lams, alpha=args.alpha, manifest_hash=cfg.config_hash
    )
    print(f"generated {args.count} costates at alpha={args.alpha} -> {path}")
    return EXIT_OK


def _read_points_file(path):
    """Two-column (dv, tof) text; comment lines ignored."""
    points = []
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            points.append(analysis.ObjectivePoint(float(parts[0]), float(parts[1])))
    if not points:
        raise ConfigError(f"no points in {path}")
    return points


def cmd_analyze(args, cfg: RunConfig, out_dir: Path) -> int:
    if args.what == "traces":
        if args.trace_file is None:
            raise ConfigError("analyze traces needs --trace-file")
        traces = datasets.read_trace_file(args.trace_file)
        path = out_dir / "trace_summary.txt"
        _write_trace_summary(path, traces, cfg.config_hash)
        print(f"summarized {traces['stage'].size} iterations -> {path}")
        return EXIT_OK

    if args.what == "hypervolume" and args.points is not None:
        points = _read_points_file(args.points)
        hv_cfg = analysis.HypervolumeConfig()
        if args.normalized:
            hv_cfg = analysis.HypervolumeConfig(
                tof_bounds_days=(0.0, 1.0), dv_bounds_mps=(0.0, 1.0)
            )
        hv = analysis.hypervolume(points, hv_cfg)
        print(f"{hv:.12g}")
        return EXIT_OK

    if args.dataset is None:
        raise ConfigError(f"analyze {args.what} needs --dataset")
    records = _load_records(args.dataset)
    feasible = analysis.feasible_filter(records, tol=args.tol)
    print(f"{len(feasible)}/{len(records)} records feasible at e < {args.tol:g}")

    if args.what == "feasible":
        points = analysis.points_from_records(feasible, cfg.spacecraft)
        analysis.write_objective_table(
            out_dir / "feasible_objectives.txt", points,
            manifest_hash=cfg.config_hash,
        )
        return EXIT_OK

    points = analysis.points_from_records(feasible, cfg.spacecraft)
    front = analysis.pareto_front(points)

    if args.what == "pareto":
        analysis.write_objective_table(
            out_dir / "objectives.txt", points, front,
            manifest_hash=cfg.config_hash,
        )
        _write_front_hamiltonians(
            out_dir / "front_hamiltonians.txt", feasible, front, cfg
        )
        print(f"front size {len(front)} -> {out_dir / 'objectives.txt'}")
        return EXIT_OK

    hv = analysis.hypervolume(front)
    (out_dir / "hypervolume.txt").write_text(
        f"# manifest: {cfg.config_hash}\n{hv!r}\n"
    )
    print(f"{hv:.12g}")
    return EXIT_OK


def _write_trace_summary(path, columns: dict, manifest_hash: str) -> None:
    """Per-stage reduction of a raw iteration trace file."""
    stages = np.unique(columns["stage"])
    lines = [
        "# trajsampler trace-summary v1",
        f"# manifest: {manifest_hash}",
        "stage iterations j_mean j_min e_mean dm_mean tau_s_mean acceptance",
    ]
    for s in stages:
        m = columns["stage"] == s
        lines.append(" ".join([
            str(int(s)), str(int(m.sum())),
            repr(float(np.nanmean(columns["mean_j"][m]))),
            repr(float(np.nanmin(columns["mean_j"][m]))),
            repr(float(np.nanmean(columns["mean_e"][m]))),
            repr(float(np.nanmean(columns["mean_dm"][m]))),
            repr(float(np.nanmean(columns["mean_tau_s"][m]))),
            repr(float(np.nanmean(columns["acceptance_rate"][m]))),
        ]))
    Path(path).write_text("\n".join(lines) + "\n")


def _write_front_hamiltonians(path, feasible, front, cfg: RunConfig) -> None:
    """Arrival Hamiltonian of each front member, grouped by alpha."""
    by_source = {p.source_id: p for p in front}
    contexts = {}
    lines = [
        "# trajsampler front-hamiltonians v1",
        f"# manifest: {cfg.config_hash}",
        "source_id alpha hamiltonian",
    ]
    for i, record in enumerate(feasible):
        if i not in by_source:
            continue
        if record.alpha not in contexts:
            contexts[record.alpha] = screening.make_context(
                record.alpha, **cfg.context_kwargs()
            )
        h = analysis.hamiltonian_at_arrival(contexts[record.alpha], record)
        lines.append(f"{i} {record.alpha!r} {h!r}")
    Path(path).write_text("\n".join(lines) + "\n")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="trajsampler",
        description="Sampling-based global search for low-thrust transfers.",
    )
    parser.add_argument("-v", "--verbose", action="count", default=0,
                        help="-v for progress, -vv for debug output")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", default=None, help="YAML run configuration")
        p.add_argument("--seed", type=int, default=None,
                       help="override the configured master seed")
        p.add_argument("--output-dir", default=None,
                       help=f"output directory (default from config or ${OUTPUT_DIR_ENV})")

    p = sub.add_parser("orbits", help="correct and discretize the boundary orbits")
    common(p)
    p.add_argument("--alpha", type=float, required=True)
    p.set_defaults(func=cmd_orbits)

    p = sub.add_parser("propagate", help="dump extremal trajectories for costates")
    common(p)
    p.add_argument("--costate-file", required=True)
    p.add_argument("--alpha", type=float, required=True)
    p.set_defaults(func=cmd_propagate)

    p = sub.add_parser("screen", help="screen a costate sample file")
    common(p)
    p.add_argument("--samples", required=True)
    p.add_argument("--alpha", type=float, required=True)
    p.set_defaults(func=cmd_screen)

    p = sub.add_parser("homotopy", help="run the MCMC homotopy")
    common(p)
    p.add_argument("--resume", action="store_true",
                   help="continue from the snapshot in the output directory")
    p.add_argument("--workers", type=int, default=None)
    p.set_defaults(func=cmd_homotopy)

    p = sub.add_parser("train", help="train the baseline generator on a dataset")
    common(p)
    p.add_argument("--dataset", required=True)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("finetune", help="reward-weighted fine-tuning from a baseline")
    common(p)
    p.add_argument("--dataset", required=True)
    p.add_argument("--baseline", required=True)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_finetune)

    p = sub.add_parser("sample", help="generate costates from a trained model")
    common(p)
    p.add_argument("--model", required=True)
    p.add_argument("--alpha", type=float, required=True)
    p.add_argument("--count", type=int, default=1)
    p.add_argument("--guidance", type=float, default=None)
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("analyze", help="feasibility, Pareto, hypervolume, traces")
    common(p)
    p.add_argument("what", choices=("feasible", "pareto", "hypervolume", "traces"))
    p.add_argument("--dataset", default=None)
    p.add_argument("--trace-file", default=None)
    p.add_argument("--points", default=None,
                   help="two-column (dv, tof) file for hypervolume")
    p.add_argument("--normalized", action="store_true",
                   help="treat --points values as already normalized")
    p.add_argument("--tol", type=float, default=analysis.FEASIBLE_TOL)
    p.set_defaults(func=cmd_analyze)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    level = (logging.WARNING, logging.INFO, logging.DEBUG)[min(args.verbose, 2)]
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    t0 = time.perf_counter()
    try:
        cfg = _run_config(args)
        out_dir = _output_dir(args, cfg)
        out_dir.mkdir(parents=True, exist_ok=True)
        code = args.func(args, cfg, out_dir)
        _finish(out_dir, cfg, args.command, t0)
        return code
    except ConfigError as exc:
        logger.error("%s", exc)
        return EXIT_CONFIG
    except ResumeMismatchError as exc:
        logger.error("%s", exc)
        return EXIT_RESUME
    except NumericalError as exc:
        logger.error("%s", exc)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
