"""Run output persistence: costate datasets, iteration traces, manifests.

Every output is columnar text: comment lines carry the format kind and
the owning manifest hash, one header line names the columns, and rows
are space-separated values. Floats are written with repr, which
round-trips them bit for bit, so write -> read is lossless.

The manifest is a small key-value sidecar describing the run (config
hash, seed, library versions, wall time). The config hash doubles as
the manifest reference stamped into every other file: it is the only
run identifier that is stable across reruns of the same configuration,
which is what lets a resumed run regenerate byte-identical outputs.
"""

from __future__ import annotations

import sys
from pathlib import Path

import numpy as np
import scipy
import yaml

from . import __version__
from .errors import ConfigError
from .mcmc import CostateRecord, StageTrace

FORMAT_VERSION = 1
MANIFEST_NAME = "manifest.yaml"

RECORD_COLUMNS = (
    "chain_id", "stage", "iteration", "alpha",
    "lam_rx", "lam_ry", "lam_vx", "lam_vy",
    "j_star", "e", "dm_frac", "tau_s", "tau_f",
    "node_index", "sample_index", "switch_count", "reward",
)
TRACE_COLUMNS = (
    "stage", "iteration", "mean_j", "mean_e", "mean_dm", "mean_tau_s",
    "acceptance_rate",
)
SAMPLE_COLUMNS = ("lam_rx", "lam_ry", "lam_vx", "lam_vy")


def _header_lines(kind: str, manifest_hash: str, columns) -> list[str]:
    return [
        f"# trajsampler {kind} v{FORMAT_VERSION}",
        f"# manifest: {manifest_hash}",
        " ".join(columns),
    ]


def _read_columnar(path, kind: str):
    """Parse one of our text files; returns (manifest_hash, columns, rows)."""
    path = Path(path)
    manifest_hash = ""
    columns = None
    rows = []
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            if line.startswith("#"):
                body = line.lstrip("#").strip()
                if body.startswith("trajsampler "):
                    stated = body[len("trajsampler "):]
                    expected = f"{kind} v{FORMAT_VERSION}"
                    if stated != expected:
                        raise ConfigError(
                            f"{path} is a {stated!r} file, expected {expected!r}"
                        )
                elif body.startswith("manifest:"):
                    manifest_hash = body[len("manifest:"):].strip()
                continue
            if columns is None:
                columns = tuple(line.split())
            else:
                rows.append(line.split())
    if columns is None:
        raise ConfigError(f"{path} has no column header")
    bad = [r for r in rows if len(r) != len(columns)]
    if bad:
        raise ConfigError(f"{path}: row with {len(bad[0])} fields, expected {len(columns)}")
    return manifest_hash, columns, rows


def write_costate_dataset(path, records, *, manifest_hash: str = "") -> None:
    """Write collected records as one row per posterior sample."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = _header_lines("costate-records", manifest_hash, RECORD_COLUMNS)
    for r in records:
        lines.append(" ".join([
            str(r.chain_id), str(r.stage), str(r.iteration), repr(float(r.alpha)),
            repr(float(r.lam[0])), repr(float(r.lam[1])),
            repr(float(r.lam[2])), repr(float(r.lam[3])),
            repr(float(r.j_star)), repr(float(r.e)), repr(float(r.dm_frac)),
            repr(float(r.tau_s)), repr(float(r.tau_f)),
            str(r.node_index), str(r.sample_index), str(r.switch_count),
            repr(float(r.reward)),
        ]))
    path.write_text("\n".join(lines) + "\n")


def read_costate_dataset(path) -> list[CostateRecord]:
    """Read a costate dataset back into record objects, losslessly."""
    _, columns, rows = _read_columnar(path, "costate-records")
    if columns != RECORD_COLUMNS:
        raise ConfigError(f"{path}: unexpected columns {columns}")
    records = []
    for row in rows:
        records.append(CostateRecord(
            chain_id=int(row[0]),
            stage=int(row[1]),
            iteration=int(row[2]),
            alpha=float(row[3]),
            lam=np.array([float(v) for v in row[4:8]]),
            j_star=float(row[8]),
            e=float(row[9]),
            dm_frac=float(row[10]),
            tau_s=float(row[11]),
            tau_f=float(row[12]),
            node_index=int(row[13]),
            sample_index=int(row[14]),
            switch_count=int(row[15]),
            reward=float(row[16]),
        ))
    return records


def write_trace_file(path, traces, *, manifest_hash: str = "") -> None:
    """Write per-iteration cross-chain summaries, one row per iteration."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = _header_lines("iteration-trace", manifest_hash, TRACE_COLUMNS)
    for t in traces:
        for i in range(t.iterations.shape[0]):
            lines.append(" ".join([
                str(t.stage), str(int(t.iterations[i])),
                repr(float(t.mean_j[i])), repr(float(t.mean_e[i])),
                repr(float(t.mean_dm[i])), repr(float(t.mean_tau_s[i])),
                repr(float(t.acceptance[i])),
            ]))
    path.write_text("\n".join(lines) + "\n")


def read_trace_file(path) -> dict:
    """Read a trace file into column arrays keyed by column name."""
    _, columns, rows = _read_columnar(path, "iteration-trace")
    if columns != TRACE_COLUMNS:
        raise ConfigError(f"{path}: unexpected columns {columns}")
    arr = np.array([[float(v) for v in row] for row in rows]) \
        if rows else np.empty((0, len(TRACE_COLUMNS)))
    out = {name: arr[:, i] for i, name in enumerate(columns)}
    out["stage"] = out["stage"].astype(int)
    out["iteration"] = out["iteration"].astype(int)
    return out


def write_costate_samples(path, lams, *, alpha: float | None = None,
                          manifest_hash: str = "") -> None:
    """Write bare costate draws (screening input, generator output)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lams = np.asarray(lams, dtype=float)
    if lams.ndim != 2 or lams.shape[1] != len(SAMPLE_COLUMNS):
        raise ConfigError(f"costate samples must be (n, 4), got {lams.shape}")
    lines = _header_lines("costate-samples", manifest_hash, SAMPLE_COLUMNS)
    if alpha is not None:
        lines.insert(2, f"# alpha: {float(alpha)!r}")
    for row in lams:
        lines.append(" ".join(repr(float(v)) for v in row))
    path.write_text("\n".join(lines) + "\n")


def read_costate_samples(path) -> np.ndarray:
    """Read costate draws back as an (n, 4) array."""
    _, columns, rows = _read_columnar(path, "costate-samples")
    if columns != SAMPLE_COLUMNS:
        raise ConfigError(f"{path}: unexpected columns {columns}")
    if not rows:
        return np.empty((0, len(SAMPLE_COLUMNS)))
    return np.array([[float(v) for v in row] for row in rows])


def manifest_reference(path) -> str:
    """The manifest hash a columnar output file was written under."""
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if line.startswith("#") and "manifest:" in line:
                return line.split("manifest:", 1)[1].strip()
            if line and not line.startswith("#"):
                break
    return ""


def write_manifest(out_dir, *, config_hash: str, seed: int, wall_time_s: float,
                   command: str = "") -> Path:
    """Write the run manifest sidecar and return its path."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = {
        "config_hash": config_hash,
        "seed": int(seed),
        "command": command,
        "wall_time_s": float(wall_time_s),
        "versions": {
            "trajsampler": __version__,
            "numpy": np.__version__,
            "scipy": scipy.__version__,
            "python": sys.version.split()[0],
        },
    }
    path = out_dir / MANIFEST_NAME
    with open(path, "w") as fh:
        yaml.safe_dump(manifest, fh, sort_keys=True)
    return path


def read_manifest(out_dir) -> dict:
    path = Path(out_dir) / MANIFEST_NAME
    if not path.exists():
        raise ConfigError(f"no manifest at {path}")
    with open(path) as fh:
        return yaml.safe_load(fh)
