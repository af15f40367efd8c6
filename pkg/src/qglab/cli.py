"""Command-line front end.

One subcommand per estimate plus direct spectrum/secular computations and a
built-in selftest.  Every run writes a manifest first (tool version, config
digest, seed, workers, timestamp), then the JSON report, per-sample CSV and
two-column plot data, all referencing the config digest.  Exit codes: 0 on
success, 2 on configuration errors, 3 on numerical failures.

Config files are either JSON or flat ``key = value`` lines with dotted keys
for nesting::

    dimension = 1
    box_sizes = [8]
    measure.family = uniform
    measure.q_minus = 0.0
    measure.q_plus = 1.0

Values are parsed as JSON where possible; unknown keys are rejected.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .assembly import assemble
from .experiments import (
    ConfigError,
    ExperimentConfig,
    MonteCarloReport,
    canonical_json,
    ct_experiment,
    dynamical_moment_experiment,
    eigenfunction_decay_experiment,
    gri_monte_carlo,
    ils_experiment,
    msa_flow_experiment,
    ultracontractivity_experiment,
    wegner_experiment,
)
from .lattice import LatticeBox, build_graph
from .randomness import sample_config
from .spectral import SolverError, eigen_low, secular_eigenvalues

COMMON_KEYS = {
    "dimension",
    "box_sizes",
    "m",
    "n_samples",
    "master_seed",
    "measure",
    "override_suitable",
}

COMMAND_KEYS = {
    "wegner": COMMON_KEYS | {"energy_cutoff", "intervals"},
    "ils": COMMON_KEYS | {"xi", "beta"},
    "combes-thomas": COMMON_KEYS | {"windows", "deltas", "potential_constant"},
    "gri": COMMON_KEYS | {"geometries", "energy"},
    "decay": COMMON_KEYS | {"epsilon", "boundary_margin"},
    "dynloc": COMMON_KEYS | {"moment_p", "epsilon", "t_grid"},
    "msa": COMMON_KEYS | {"energy", "energies", "msa_gamma", "msa_alpha", "msa_levels"},
    "ultra": COMMON_KEYS | {"t_grid"},
    "spectrum": COMMON_KEYS | {"potential_constant", "count", "sample_index"},
    "secular": COMMON_KEYS | {"potential_constant", "window", "scan_step", "sample_index"},
}

EXPERIMENT_RUNNERS = {
    "wegner": wegner_experiment,
    "ils": ils_experiment,
    "combes-thomas": ct_experiment,
    "gri": gri_monte_carlo,
    "decay": eigenfunction_decay_experiment,
    "dynloc": dynamical_moment_experiment,
    "msa": msa_flow_experiment,
    "ultra": ultracontractivity_experiment,
}


def parse_config_text(text: str) -> dict:
    """Parse a config document: JSON, or dotted key = value lines."""
    stripped = text.lstrip()
    if stripped.startswith("{"):
        return json.loads(text)
    out: dict = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        try:
            parsed = json.loads(value)
        except json.JSONDecodeError:
            parsed = value
        node = out
        parts = key.split(".")
        for part in parts[:-1]:
            node = node.setdefault(part, {})
            if not isinstance(node, dict):
                raise ConfigError(f"line {lineno}: key {key!r} clashes with a scalar")
        node[parts[-1]] = parsed
    return out


def load_config(path) -> dict:
    return parse_config_text(Path(path).read_text())


def build_config(raw: dict, command: str, overrides: dict) -> ExperimentConfig:
    allowed = COMMAND_KEYS[command]
    unknown = set(raw) - allowed
    if unknown:
        raise ConfigError(f"unknown config keys for {command}: {sorted(unknown)}")
    merged = dict(raw)
    merged.update({k: v for k, v in overrides.items() if v is not None})
    # keys consumed outside ExperimentConfig
    extra = {k: merged.pop(k, None) for k in ("count", "window", "scan_step", "sample_index")}
    try:
        cfg = ExperimentConfig(**merged)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc
    cfg._extra = {k: v for k, v in extra.items() if v is not None}
    return cfg


def config_digest(cfg: ExperimentConfig) -> str:
    return hashlib.sha256(canonical_json(cfg.to_dict()).encode()).hexdigest()


def write_manifest(out_dir: Path, command: str, cfg: ExperimentConfig, args) -> str:
    digest = config_digest(cfg)
    lines = [
        f"tool = qglab {__version__}",
        f"subcommand = {command}",
        f"config_path = {args.config or '<defaults>'}",
        f"config_digest = {digest}",
        f"master_seed = {cfg.master_seed}",
        f"workers = {cfg.workers}",
        f"out_dir = {out_dir}",
        f"timestamp = {time.strftime('%Y-%m-%dT%H:%M:%S%z')}",
    ]
    (out_dir / "manifest.txt").write_text("\n".join(lines) + "\n")
    return digest


def write_report(out_dir: Path, report: MonteCarloReport, digest: str) -> None:
    payload = report.scientific_content()
    payload["digest"] = report.digest
    payload["config_digest"] = digest
    payload["runtime_seconds"] = report.runtime_seconds
    (out_dir / "report.json").write_text(
        json.dumps(payload, sort_keys=True, indent=1, default=str) + "\n"
    )
    csv = report.samples_csv()
    if csv:
        (out_dir / "samples.csv").write_text(csv)
    for name, cols in _plot_columns(report):
        lines = [f"# config {digest}"] + [f"{x!r} {y!r}" for x, y in cols]
        (out_dir / f"plot_{name}.txt").write_text("\n".join(lines) + "\n")


def _plot_columns(report: MonteCarloReport):
    agg = report.aggregates
    if report.experiment == "wegner":
        by_L = {}
        for c in agg["cells"]:
            by_L.setdefault(c["L"], []).append((c["length"], c["p_hat"]))
        for L, cols in by_L.items():
            yield f"wegner_L{L}", sorted(cols)
    elif report.experiment == "ils":
        yield "ils_spec", [(s["l"], s["p_spec"]) for s in agg["scales"]]
        yield "ils_tail", [(s["l"], s["p_tail"]) for s in agg["scales"]]
    elif report.experiment == "combes-thomas":
        for i, w in enumerate(agg["windows"]):
            cols = [
                (r["delta"], r["norm"])
                for r in report.samples
                if r["energy"] == w["energy"] and [r["window_r"], r["window_s"]] == w["window"]
            ]
            yield f"ct_window{i}", cols
    elif report.experiment == "decay":
        yield "decay_gamma", [(r["eigenvalue"], r["gamma"]) for r in report.samples]
    elif report.experiment == "dynloc":
        yield "dynloc_moment", [
            (r["L"], r["moment"]) for r in report.samples if not r.get("skipped")
        ]
    elif report.experiment == "msa":
        yield "msa_pbad", [(row["L"], row["p_bad"]) for row in agg["table"]]
    elif report.experiment == "ultra":
        yield "ultra_norm", [(r["t"], r["norm"]) for r in report.samples]
        yield "ultra_scaled", [(r["t"], r["scaled"]) for r in report.samples]
    elif report.experiment == "gri":
        yield "gri_ratio", [(r["sample"], r["ratio"]) for r in report.samples]


def _run_spectrum(cfg: ExperimentConfig, out_dir: Path, digest: str) -> None:
    graph = build_graph(LatticeBox(cfg.dimension, cfg.box_sizes[0]))
    if cfg.potential_constant is not None:
        omega = float(cfg.potential_constant)
    else:
        omega = sample_config(
            graph, cfg.measure, cfg.master_seed, int(cfg._extra.get("sample_index", 0))
        )
    op = assemble(graph, omega, m=cfg.m)
    count = int(cfg._extra.get("count", min(10, op.n_dofs)))
    result = eigen_low(op, count)
    (out_dir / "spectrum.csv").write_text(f"# config {digest}\n" + result.to_csv())


def _run_secular(cfg: ExperimentConfig, out_dir: Path, digest: str) -> None:
    graph = build_graph(LatticeBox(cfg.dimension, cfg.box_sizes[0]))
    if cfg.potential_constant is not None:
        omega = np.full(graph.n_edges, float(cfg.potential_constant))
    else:
        omega = sample_config(
            graph, cfg.measure, cfg.master_seed, int(cfg._extra.get("sample_index", 0))
        ).values
    window = cfg._extra.get("window")
    if window is None:
        raise ConfigError("secular needs a [lo, hi] window")
    scan = secular_eigenvalues(
        graph, omega, tuple(window), scan_step=float(cfg._extra.get("scan_step", 0.01))
    )
    lines = ["# config " + digest, "eigenvalue,multiplicity"]
    lines += [f"{v!r},{m}" for v, m in zip(scan.eigenvalues, scan.multiplicities)]
    if scan.flagged:
        lines += [f"# flagged interval {a!r} {b!r}" for a, b in scan.flagged]
    (out_dir / "secular.csv").write_text("\n".join(lines) + "\n")


def run_selftest() -> int:
    """Fast end-to-end oracle suite; prints one PASS/FAIL line per check."""
    from . import selftest

    return selftest.run()


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="qglab",
        description="numerical experiments for a random Schrödinger operator on the lattice quantum graph",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name in list(COMMAND_KEYS) + ["selftest"]:
        p = sub.add_parser(name)
        if name != "selftest":
            p.add_argument("--config", default=None, help="config file (JSON or key = value)")
            p.add_argument("--seed", type=int, default=None, help="master seed override")
            p.add_argument("--workers", type=int, default=None)
            p.add_argument("--out", default=None, help="output directory")
            p.add_argument("--override-suitable", action="store_true", default=None)
    args = parser.parse_args(argv)

    if args.command == "selftest":
        return run_selftest()

    try:
        raw = load_config(args.config) if args.config else {}
        overrides = {
            "master_seed": args.seed,
            "workers": args.workers,
            "override_suitable": args.override_suitable,
        }
        cfg = build_config(raw, args.command, overrides)
        out_dir = Path(args.out or f"qglab_out/{args.command}")
        out_dir.mkdir(parents=True, exist_ok=True)
        digest = write_manifest(out_dir, args.command, cfg, args)
    except (ConfigError, OSError, json.JSONDecodeError) as exc:
        _emit_error("config", exc)
        return 2

    try:
        if args.command == "spectrum":
            _run_spectrum(cfg, out_dir, digest)
        elif args.command == "secular":
            _run_secular(cfg, out_dir, digest)
        else:
            report = EXPERIMENT_RUNNERS[args.command](cfg)
            write_report(out_dir, report, digest)
        return 0
    except ConfigError as exc:
        _emit_error("config", exc)
        return 2
    except (SolverError, np.linalg.LinAlgError, FloatingPointError, ValueError) as exc:
        _emit_error("numerical", exc)
        return 3


def _emit_error(kind: str, exc: Exception) -> None:
    record = {"error": kind, "type": type(exc).__name__, "message": str(exc)}
    print(json.dumps(record, sort_keys=True), file=sys.stderr)


if __name__ == "__main__":
    sys.exit(main())
