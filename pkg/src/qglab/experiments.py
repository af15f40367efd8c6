"""Monte Carlo drivers for the quantitative estimates.

Each driver turns one probabilistic statement about the random operator into
a finite-box measurement with fitted exponents and binomial confidence
intervals:

* ``wegner_experiment``      -- probability of spectrum in a small interval,
                                scaling in the interval length and the volume;
* ``ils_experiment``         -- ground state near the bottom of the spectrum
                                at the initial length scales, together with
                                the per-sample tail-event implication;
* ``eigenfunction_decay_experiment`` -- exponential profiles of band-edge
                                eigenfunctions;
* ``dynamical_moment_experiment``    -- position moments of spectrally
                                filtered states, bounded uniformly in time;
* ``msa_flow_experiment``    -- fraction of boxes whose interior-to-collar
                                resolvent block already decays at a given
                                rate, across a short scale sequence;
* ``ultracontractivity_experiment``  -- heat semigroup L2->Linf norm against
                                the t^(-1/4) profile;
* ``gri_monte_carlo``        -- empirical constant of the nested-box
                                resolvent inequality.

Reports are bit-reproducible: every sample is a pure function of
(master seed, sample index), workers only change scheduling, and the reduce
is ordered by sample index.  The JSON digest covers exactly the scientific
content (config echo, samples, aggregates); wall-clock data stays outside.
"""

from __future__ import annotations

import hashlib
import json
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, asdict

import numpy as np
from scipy.stats import beta as beta_dist
from scipy.stats import t as t_dist

from .assembly import assemble
from .lattice import (
    GraphRegion,
    LatticeBox,
    build_graph,
    edge_injection,
    next_override_suitable,
    region_mask,
    set_distance,
)
from .randomness import (
    PotentialConfig,
    SingleSiteMeasure,
    sample_config,
    sample_config_conditional,
    uniform_measure,
)
from .resolvent import ResolventProbe, fit_decay, gri_experiment
from .spectral import eigen_all, eigen_below, eigen_low, semigroup_sup_norm

__all__ = [
    "ExperimentConfig",
    "MonteCarloReport",
    "ConfigError",
    "wegner_experiment",
    "ils_experiment",
    "eigenfunction_decay_experiment",
    "dynamical_moment_experiment",
    "msa_flow_experiment",
    "ultracontractivity_experiment",
    "gri_monte_carlo",
    "ct_experiment",
    "cell_pair_regions",
    "canonical_json",
    "binomial_ci",
    "linear_fit",
]


class ConfigError(ValueError):
    """Invalid experiment configuration (bad parameter ranges, unknown keys)."""


# ---------------------------------------------------------------------------
# configuration and report plumbing
# ---------------------------------------------------------------------------


@dataclass
class ExperimentConfig:
    """Shared parameter record for all drivers; each driver validates the
    subset it consumes."""

    dimension: int = 1
    box_sizes: tuple = (8,)
    m: int = 32
    measure: SingleSiteMeasure = field(default_factory=uniform_measure)
    n_samples: int = 500
    master_seed: int = 1
    workers: int = 1
    energy_cutoff: float = 10.0           # R: admissible energy range (-R, R)
    intervals: tuple = ()                 # (lo, hi) pairs for the interval counts
    epsilon: float = None                 # band-edge window width, default half support
    energy: float = None                  # single probe energy
    energies: tuple = ()                  # probe energy grid
    windows: tuple = ()                   # (r, s, E) triples for decay probes
    deltas: tuple = (5, 10, 15, 20, 25)   # separations for decay probes
    xi: float = None
    beta: float = None
    moment_p: float = None
    t_grid: tuple = ()
    msa_gamma: float = 0.05
    msa_alpha: float = 1.5
    msa_levels: int = 2
    geometries: tuple = ()                # (L_inner, L_outer) pairs
    boundary_margin: float = 5.0
    override_suitable: bool = False
    potential_constant: float = None      # bypass sampling with a constant coupling

    def __post_init__(self):
        if isinstance(self.measure, dict):
            self.measure = SingleSiteMeasure.from_dict(self.measure)
        self.box_sizes = tuple(int(b) for b in np.atleast_1d(self.box_sizes))
        if self.dimension < 1:
            raise ConfigError("dimension must be positive")
        if self.n_samples < 1:
            raise ConfigError("n_samples must be positive")
        if self.workers < 1:
            raise ConfigError("workers must be positive")

    @property
    def band_width(self) -> float:
        if self.epsilon is not None:
            return float(self.epsilon)
        return 0.5 * self.measure.width

    def to_dict(self) -> dict:
        """Scientific configuration echo.  Worker count is an execution detail
        and deliberately left out so reports stay worker-independent."""
        d = asdict(self)
        d["measure"] = self.measure.to_dict()
        d.pop("workers")
        for key, val in list(d.items()):
            if isinstance(val, tuple):
                d[key] = list(val)
        return d


def canonical_json(obj) -> str:
    """Deterministic JSON with round-trip float precision."""

    def default(o):
        if isinstance(o, (np.integer,)):
            return int(o)
        if isinstance(o, (np.floating,)):
            return float(o)
        if isinstance(o, np.ndarray):
            return o.tolist()
        raise TypeError(f"not serialisable: {type(o)}")

    return json.dumps(obj, sort_keys=True, separators=(",", ":"), default=default)


@dataclass
class MonteCarloReport:
    experiment: str
    config: dict
    aggregates: dict
    samples: list
    runtime_seconds: float = 0.0

    def scientific_content(self) -> dict:
        return {
            "experiment": self.experiment,
            "config": self.config,
            "aggregates": self.aggregates,
            "samples": self.samples,
        }

    @property
    def digest(self) -> str:
        return hashlib.sha256(
            canonical_json(self.scientific_content()).encode()
        ).hexdigest()

    def to_json(self) -> str:
        payload = self.scientific_content()
        payload["digest"] = self.digest
        payload["runtime_seconds"] = self.runtime_seconds
        return json.dumps(payload, sort_keys=True, indent=1, default=str)

    def samples_csv(self) -> str:
        if not self.samples:
            return ""
        keys = sorted({k for s in self.samples for k in s})
        lines = [",".join(keys)]
        for s in self.samples:
            lines.append(",".join(_csv_cell(s.get(k)) for k in keys))
        return "\n".join(lines) + "\n"


def _csv_cell(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _map_samples(task, n: int, workers: int) -> list:
    """Ordered, reproducible map over sample indices."""
    if workers <= 1:
        return [task(i) for i in range(n)]
    with ThreadPoolExecutor(max_workers=workers) as ex:
        return list(ex.map(task, range(n)))


def binomial_ci(hits: int, n: int, level: float = 0.95) -> tuple:
    """Clopper-Pearson interval for a binomial proportion."""
    alpha = 1.0 - level
    lo = 0.0 if hits == 0 else float(beta_dist.ppf(alpha / 2, hits, n - hits + 1))
    hi = 1.0 if hits == n else float(beta_dist.ppf(1 - alpha / 2, hits + 1, n - hits))
    return lo, hi


def linear_fit(x, y) -> dict:
    """Least-squares line with slope standard error and R^2."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    n = len(x)
    slope, intercept = np.polyfit(x, y, 1)
    fitted = slope * x + intercept
    rss = float(np.sum((y - fitted) ** 2))
    tss = float(np.sum((y - y.mean()) ** 2))
    r2 = 1.0 - rss / tss if tss > 0 else 1.0
    se = np.nan
    ci = (np.nan, np.nan)
    if n > 2:
        sigma2 = rss / (n - 2)
        sxx = float(np.sum((x - x.mean()) ** 2))
        se = float(np.sqrt(sigma2 / sxx))
        q = float(t_dist.ppf(0.975, n - 2))
        ci = (slope - q * se, slope + q * se)
    return {
        "slope": float(slope),
        "intercept": float(intercept),
        "r_squared": r2,
        "slope_se": se,
        "slope_ci95": list(ci),
    }


def _fem_error_estimate(lam: float, m: int) -> float:
    """A priori eigenvalue error scale of the P1 discretisation."""
    return max(abs(lam), 1.0) ** 2 / (12.0 * m * m)


# ---------------------------------------------------------------------------
# interval statistics (Wegner scaling)
# ---------------------------------------------------------------------------


def wegner_experiment(cfg: ExperimentConfig, strict: bool = True) -> MonteCarloReport:
    """Empirical probability of an eigenvalue in small intervals.

    For every box size the same disorder samples are reused across all
    intervals (paired counts, so interval inclusion is monotone sample by
    sample).  Eigenvalues are counted with a guard band of twice the a priori
    discretisation error; borderline cases count as hits.
    """
    t0 = time.time()
    R = cfg.energy_cutoff
    if not cfg.intervals:
        raise ConfigError("wegner needs a list of intervals")
    intervals = [(float(a), float(b)) for a, b in cfg.intervals]
    for a, b in intervals:
        if not (-R < a < b < R):
            raise ConfigError(f"interval ({a}, {b}) outside (-{R}, {R})")
    if strict and cfg.n_samples < 500:
        raise ConfigError("wegner needs at least 500 samples (strict mode)")

    hi_all = max(b for _, b in intervals)
    samples = []
    agg_cells = []
    for L in cfg.box_sizes:
        graph = build_graph(LatticeBox(cfg.dimension, L))
        guard = 2.0 * _fem_error_estimate(hi_all, cfg.m)

        def task(i, graph=graph, L=L, guard=guard):
            om = sample_config(graph, cfg.measure, cfg.master_seed, i)
            op = assemble(graph, om, m=cfg.m)
            spec = eigen_below(op, hi_all + guard + 0.5)
            rec = {"L": L, "sample": i, "n_eigs": int(spec.count)}
            for j, (a, b) in enumerate(intervals):
                hit = bool(
                    np.any(
                        (spec.eigenvalues >= a - guard)
                        & (spec.eigenvalues <= b + guard)
                    )
                )
                rec[f"hit_{j}"] = int(hit)
            return rec

        rows = _map_samples(task, cfg.n_samples, cfg.workers)
        samples.extend(rows)
        for j, (a, b) in enumerate(intervals):
            hits = sum(r[f"hit_{j}"] for r in rows)
            p_hat = hits / cfg.n_samples
            lo, hi = binomial_ci(hits, cfg.n_samples)
            agg_cells.append(
                {
                    "L": L,
                    "interval": [a, b],
                    "length": b - a,
                    "volume": L**cfg.dimension,
                    "hits": hits,
                    "p_hat": p_hat,
                    "ci95": [lo, hi],
                }
            )

    aggregates = {"cells": agg_cells}
    # interval-length scaling per box size
    for L in cfg.box_sizes:
        cells = [c for c in agg_cells if c["L"] == L and c["p_hat"] > 0]
        if len(cells) >= 2:
            fit = linear_fit(
                np.log([c["length"] for c in cells]),
                np.log([c["p_hat"] for c in cells]),
            )
            aggregates[f"length_scaling_L{L}"] = fit
    # volume scaling per interval
    if len(cfg.box_sizes) >= 2:
        for j, (a, b) in enumerate(intervals):
            cells = [
                c for c in agg_cells if c["interval"] == [a, b] and c["p_hat"] > 0
            ]
            if len(cells) >= 2:
                fit = linear_fit(
                    np.log([c["volume"] for c in cells]),
                    np.log([c["p_hat"] for c in cells]),
                )
                aggregates[f"volume_scaling_I{j}"] = fit
    # single constant making p_hat <= C * volume^2 * length across all cells
    ratios = [
        c["p_hat"] / (c["volume"] ** 2 * c["length"] ** cfg.measure.holder_alpha)
        for c in agg_cells
    ]
    aggregates["fitted_constant"] = float(max(ratios)) if ratios else 0.0
    aggregates["undersampled"] = [
        [c["L"], c["interval"]] for c in agg_cells if 0 < c["hits"] < 5
    ]

    return MonteCarloReport(
        "wegner", cfg.to_dict(), aggregates, samples, time.time() - t0
    )


# ---------------------------------------------------------------------------
# initial length scales
# ---------------------------------------------------------------------------


def validate_ils_exponents(cfg: ExperimentConfig) -> None:
    tau, d = cfg.measure.tail_tau, cfg.dimension
    if not tau > d / 2:
        raise ConfigError(f"tail exponent tau={tau} must exceed d/2={d/2}")
    if cfg.xi is None or not (0 < cfg.xi < 2 * tau - d):
        raise ConfigError(f"xi must lie in (0, {2 * tau - d}); got {cfg.xi}")
    if cfg.beta is None or not (0 < cfg.beta < 2):
        raise ConfigError(f"beta must lie in (0, 2); got {cfg.beta}")
    if not cfg.xi < tau * (2 - cfg.beta) - d:
        raise ConfigError(
            f"need xi < tau (2 - beta) - d = {tau * (2 - cfg.beta) - d}; got xi={cfg.xi}"
        )


def ils_experiment(cfg: ExperimentConfig) -> MonteCarloReport:
    """Ground-state statistics at the initial length scales.

    Per scale l the threshold is h_l = l^(beta - 2).  Three things are
    measured: the probability that the lowest eigenvalue falls below
    q_- + h_l (the spectral event of the estimate), the probability that some
    coupling falls below q_- + h_l (the tail event of the proof), and the
    per-sample implication "all couplings >= q_- + h_l  =>  E_0 >= q_- + h_l",
    which is exact for the discrete pencil and must never be violated.
    """
    t0 = time.time()
    validate_ils_exponents(cfg)
    measure = cfg.measure
    q_minus = measure.q_minus
    tau = measure.tail_tau
    d = cfg.dimension

    samples = []
    scales = []
    for l in cfg.box_sizes:
        graph = build_graph(LatticeBox(d, l))
        h_l = float(l) ** (cfg.beta - 2.0)
        thr = q_minus + h_l

        def task(i, graph=graph, l=l, thr=thr):
            om = sample_config(graph, measure, cfg.master_seed, i)
            op = assemble(graph, om, m=cfg.m)
            e0 = float(eigen_low(op, 1).eigenvalues[0])
            min_omega = float(om.values.min())
            tail_event = min_omega < thr
            spec_event = e0 < thr
            violation = (not tail_event) and spec_event
            return {
                "l": l,
                "sample": i,
                "e0": e0,
                "min_omega": min_omega,
                "tail_event": int(tail_event),
                "spec_event": int(spec_event),
                "violation": int(violation),
            }

        rows = _map_samples(task, cfg.n_samples, cfg.workers)
        samples.extend(rows)
        n = cfg.n_samples
        tail_hits = sum(r["tail_event"] for r in rows)
        spec_hits = sum(r["spec_event"] for r in rows)
        n_edges = graph.n_edges
        mu_h = measure.interval_mass(q_minus, thr)
        scales.append(
            {
                "l": l,
                "h": h_l,
                "threshold": thr,
                "n_edges": n_edges,
                "p_tail": tail_hits / n,
                "p_tail_ci95": list(binomial_ci(tail_hits, n)),
                "p_tail_analytic": 1.0 - (1.0 - mu_h) ** n_edges,
                "p_spec": spec_hits / n,
                "p_spec_ci95": list(binomial_ci(spec_hits, n)),
                "bound_paper": d * float(l) ** d * h_l**tau,
                "bound_union": n_edges * mu_h,
                "bound_theorem": float(l) ** (-cfg.xi),
                "violations": sum(r["violation"] for r in rows),
            }
        )

    aggregates = {
        "scales": scales,
        "total_violations": int(sum(s["violations"] for s in scales)),
        "tail_strictly_decreasing": bool(
            all(
                scales[i]["p_tail"] > scales[i + 1]["p_tail"]
                for i in range(len(scales) - 1)
            )
        ),
        "spec_nonincreasing": bool(
            all(
                scales[i]["p_spec"] >= scales[i + 1]["p_spec"]
                for i in range(len(scales) - 1)
            )
        ),
    }
    return MonteCarloReport("ils", cfg.to_dict(), aggregates, samples, time.time() - t0)


# ---------------------------------------------------------------------------
# eigenfunction decay
# ---------------------------------------------------------------------------

PROFILE_FLOOR = 1e-12


def fit_eigenfunction_profile(
    op, u: np.ndarray, boundary_margin: float
) -> dict:
    """Exponential fit of the unit-cell profile of one eigenfunction.

    The profile is recentred at its own maximum; vertices closer than
    ``boundary_margin`` to the box boundary are excluded, as are cells below
    the numerical floor.
    """
    graph = op.graph
    profile = op.unit_cell_profile(u)
    center = int(np.argmax(profile))
    pos = graph.vertices.astype(float)
    dist = np.linalg.norm(pos - pos[center], axis=1)
    interior = (
        np.abs(pos - np.asarray(graph.box.center, float)).max(axis=1)
        <= graph.box.side / 2.0 - boundary_margin
    )
    floor = max(PROFILE_FLOOR, 1e-10 * profile.max())
    use = interior & (profile > floor)
    if use.sum() < 3:
        return {"ok": False}
    fit = linear_fit(dist[use], np.log(profile[use]))
    return {
        "ok": True,
        "center": graph.vertices[center].tolist(),
        "gamma": -fit["slope"],
        "r_squared": fit["r_squared"],
        "n_points": int(use.sum()),
    }


def eigenfunction_decay_experiment(cfg: ExperimentConfig) -> MonteCarloReport:
    """Profiles of eigenfunctions with energies near the bottom of the spectrum."""
    t0 = time.time()
    eps = cfg.band_width
    q_minus = cfg.measure.q_minus
    samples = []
    per_size = {}
    for L in cfg.box_sizes:
        graph = build_graph(LatticeBox(cfg.dimension, L))

        def task(i, graph=graph, L=L):
            om = sample_config(graph, cfg.measure, cfg.master_seed, i)
            op = assemble(graph, om, m=cfg.m)
            spec = eigen_below(op, q_minus + eps)
            out = []
            for j in range(spec.count):
                rec = fit_eigenfunction_profile(
                    op, spec.eigenvectors[:, j], cfg.boundary_margin
                )
                if rec.pop("ok"):
                    rec.update(
                        L=L, sample=i, eigenvalue=float(spec.eigenvalues[j])
                    )
                    rec["center"] = " ".join(map(str, rec["center"]))
                    out.append(rec)
            return out, spec.count

        results = _map_samples(task, cfg.n_samples, cfg.workers)
        rows = [r for out, _ in results for r in out]
        skipped = sum(1 for _, cnt in results if cnt == 0)
        samples.extend(rows)
        gammas = np.array([r["gamma"] for r in rows]) if rows else np.empty(0)
        r2s = np.array([r["r_squared"] for r in rows]) if rows else np.empty(0)
        good = (gammas > 0.05) & (r2s >= 0.9) if rows else np.empty(0, bool)
        per_size[str(L)] = {
            "n_states": len(rows),
            "skipped_samples": skipped,
            "median_gamma": float(np.median(gammas)) if rows else None,
            "fraction_good": float(good.mean()) if rows else None,
            "gamma_threshold": 0.05,
            "r2_threshold": 0.9,
            "boundary_margin": cfg.boundary_margin,
        }
    aggregates = {"per_size": per_size, "window": [q_minus, q_minus + eps]}
    return MonteCarloReport(
        "decay", cfg.to_dict(), aggregates, samples, time.time() - t0
    )


# ---------------------------------------------------------------------------
# dynamical moments
# ---------------------------------------------------------------------------


def _moment_norms(op, spec, p: float, t_grid) -> dict:
    """Rank-reduced norms || |X|^p f(H) P_I chi_K || for f = 1 and phases.

    With Phi the M-orthonormal eigenvectors in the window, C = Phi' M i_K and
    Q = (W Phi)' M (W Phi), the squared static norm is the top eigenvalue of
    (C' Q C, M_KK); inserting unitary phase factors exp(-i t lambda) between
    the two factors gives the time-evolved norm, which can never exceed the
    static bound sqrt(lambda_max(Q)) because the evolution is an M-isometry
    on the window subspace.
    """
    from scipy.linalg import eigh as dense_eigh

    graph = op.graph
    center = np.asarray(graph.box.center, dtype=float)
    xdist = np.linalg.norm(op.dof_pos - center, axis=1)
    w = xdist**p

    # chi_K: the unit cube around the centre, clipping incident edges in half
    kmask = np.abs(op.dof_pos - center).max(axis=1) <= 0.5
    kidx = np.nonzero(kmask)[0]

    phi = spec.eigenvectors
    lam = spec.eigenvalues
    M = op.M
    wphi = phi * w[:, None]
    Q = wphi.T @ (M @ wphi)
    Q = 0.5 * (Q + Q.T)
    C = phi.T @ (M.tocsc()[:, kidx]).toarray()
    m_kk = (M[kidx][:, kidx]).toarray()

    def top(mat):
        vals = dense_eigh(
            0.5 * (mat + mat.conj().T),
            m_kk,
            subset_by_index=(len(kidx) - 1, len(kidx) - 1),
            eigvals_only=True,
        )
        return float(np.sqrt(max(vals[0].real, 0.0)))

    static = top(C.conj().T @ Q @ C)
    bound = float(np.sqrt(max(np.linalg.eigvalsh(Q)[-1], 0.0)))
    dyn = []
    for t in t_grid:
        U = np.exp(-1j * t * lam)
        Ct = U[:, None] * C
        dyn.append(top(Ct.conj().T @ Q @ Ct))
    return {
        "moment": static,
        "time_bound": bound,
        "sup_dynamic": max(dyn) if dyn else static,
        "dynamic": dyn,
    }


def dynamical_moment_experiment(cfg: ExperimentConfig) -> MonteCarloReport:
    """Boundedness in the box size of || |X|^p P_I chi_K || and its evolved form."""
    t0 = time.time()
    tau, d = cfg.measure.tail_tau, cfg.dimension
    if cfg.moment_p is None or not cfg.moment_p > 2 * (2 * tau - d):
        raise ConfigError(
            f"moment order p must exceed 2(2 tau - d) = {2 * (2 * tau - d)}; got {cfg.moment_p}"
        )
    eps = cfg.band_width
    q_minus = cfg.measure.q_minus
    t_grid = list(cfg.t_grid) if cfg.t_grid else [0.5, 1.0, 2.0, 5.0, 10.0, 30.0, 100.0]

    samples = []
    per_size = {}
    for L in cfg.box_sizes:
        graph = build_graph(LatticeBox(d, L))

        def task(i, graph=graph, L=L):
            om = sample_config(graph, cfg.measure, cfg.master_seed, i)
            op = assemble(graph, om, m=cfg.m)
            spec = eigen_below(op, q_minus + eps)
            if spec.count == 0:
                return {"L": L, "sample": i, "skipped": 1}
            norms = _moment_norms(op, spec, cfg.moment_p, t_grid)
            return {
                "L": L,
                "sample": i,
                "skipped": 0,
                "n_states": int(spec.count),
                "moment": norms["moment"],
                "sup_dynamic": norms["sup_dynamic"],
                "time_bound": norms["time_bound"],
            }

        rows = _map_samples(task, cfg.n_samples, cfg.workers)
        samples.extend(rows)
        vals = [r["moment"] for r in rows if not r["skipped"]]
        sup_ratio = [
            r["sup_dynamic"] / r["time_bound"]
            for r in rows
            if not r["skipped"] and r["time_bound"] > 0
        ]
        per_size[str(L)] = {
            "mean_moment": float(np.mean(vals)) if vals else None,
            "std_moment": float(np.std(vals)) if vals else None,
            "n_used": len(vals),
            "skipped": sum(r["skipped"] for r in rows),
            "max_sup_over_bound": float(max(sup_ratio)) if sup_ratio else None,
        }

    used = [(r["L"], r["moment"]) for r in samples if not r.get("skipped")]
    trend = None
    if len({u[0] for u in used}) >= 2:
        trend = linear_fit([u[0] for u in used], [u[1] for u in used])
    aggregates = {
        "per_size": per_size,
        "trend": trend,
        "window": [q_minus, q_minus + eps],
        "t_grid": t_grid,
        "p": cfg.moment_p,
    }
    return MonteCarloReport(
        "dynloc", cfg.to_dict(), aggregates, samples, time.time() - t0
    )


# ---------------------------------------------------------------------------
# multiscale flow
# ---------------------------------------------------------------------------


def msa_scales(cfg: ExperimentConfig) -> list:
    if len(cfg.box_sizes) > 1:
        return list(cfg.box_sizes)
    scales = [int(cfg.box_sizes[0])]
    for _ in range(cfg.msa_levels - 1):
        scales.append(next_override_suitable(float(scales[-1]) ** cfg.msa_alpha))
    return scales


def msa_flow_experiment(cfg: ExperimentConfig) -> MonteCarloReport:
    """Fraction of boxes that are already good at each scale.

    A box is good at rate gamma when the probe energy misses its spectrum and
    the interior-to-collar resolvent block is at most exp(-gamma L); resonant
    samples (energy on the spectrum within solver resolution) are counted
    separately.
    """
    t0 = time.time()
    energies = list(cfg.energies) if cfg.energies else [cfg.energy]
    if energies == [None]:
        raise ConfigError("msa needs an energy or an energy grid")
    scales = msa_scales(cfg)
    gamma = cfg.msa_gamma

    samples = []
    table = []
    for L in scales:
        box = LatticeBox(cfg.dimension, L)
        if not (box.suitable or box.override_suitable):
            raise ConfigError(f"scale {L} is not (override-)suitable")
        graph = build_graph(box)
        region_int = GraphRegion(box, "int")
        region_out = GraphRegion(box, "out")

        def task(i, graph=graph, L=L):
            om = sample_config(graph, cfg.measure, cfg.master_seed, i)
            op = assemble(graph, om, m=cfg.m)
            din = op.region_dofs(region_int, allow_override=True)
            dout = op.region_dofs(region_out, allow_override=True)
            rec = {"L": L, "sample": i}
            for j, E in enumerate(energies):
                try:
                    probe = ResolventProbe(op, E)
                except ValueError:
                    rec[f"resonant_{j}"] = 1
                    rec[f"bad_{j}"] = 1
                    rec[f"norm_{j}"] = None
                    continue
                norm = probe.block_norm(dout, din)
                rec[f"resonant_{j}"] = 0
                rec[f"norm_{j}"] = norm
                rec[f"bad_{j}"] = int(norm > np.exp(-gamma * L))
            return rec

        rows = _map_samples(task, cfg.n_samples, cfg.workers)
        samples.extend(rows)
        for j, E in enumerate(energies):
            bad = sum(r[f"bad_{j}"] for r in rows)
            resonant = sum(r[f"resonant_{j}"] for r in rows)
            table.append(
                {
                    "L": L,
                    "energy": E,
                    "threshold": float(np.exp(-gamma * L)),
                    "p_bad": bad / cfg.n_samples,
                    "p_bad_ci95": list(binomial_ci(bad, cfg.n_samples)),
                    "resonant": resonant,
                }
            )

    decreasing = {}
    for j, E in enumerate(energies):
        col = [row["p_bad"] for row in table if row["energy"] == E]
        decreasing[str(E)] = bool(
            all(col[i] >= col[i + 1] for i in range(len(col) - 1))
        )
    aggregates = {
        "table": table,
        "scales": scales,
        "gamma": gamma,
        "p_bad_nonincreasing": decreasing,
    }
    return MonteCarloReport("msa", cfg.to_dict(), aggregates, samples, time.time() - t0)


# ---------------------------------------------------------------------------
# ultracontractivity
# ---------------------------------------------------------------------------


def ultracontractivity_experiment(cfg: ExperimentConfig) -> MonteCarloReport:
    """Heat kernel L2->Linf norms of the free operator against t^(-1/4)."""
    t0 = time.time()
    L = cfg.box_sizes[0]
    graph = build_graph(LatticeBox(cfg.dimension, L))
    op = assemble(graph, 0.0, m=cfg.m)
    if op.n_dofs > 6000:
        raise ConfigError("ultracontractivity uses a complete decomposition; reduce the box or m")
    spec = eigen_all(op)
    t_grid = list(cfg.t_grid) if cfg.t_grid else list(np.geomspace(0.01, 1.0, 10))
    rows = []
    for t in t_grid:
        sg = semigroup_sup_norm(op, t, spec)
        rows.append(
            {
                "t": float(t),
                "norm": sg.value,
                "scaled": sg.value * float(t) ** 0.25,
                "certified": int(sg.certified),
            }
        )
    scaled = [r["scaled"] for r in rows]
    aggregates = {
        "table": rows,
        "scaled_max_over_min": float(max(scaled) / min(scaled)),
        "all_certified": bool(all(r["certified"] for r in rows)),
    }
    return MonteCarloReport(
        "ultra", cfg.to_dict(), aggregates, rows, time.time() - t0
    )


# ---------------------------------------------------------------------------
# resolvent decay probes (deterministic potential)
# ---------------------------------------------------------------------------


def cell_pair_regions(box: LatticeBox, delta: int):
    """Two side-2 cells on the first axis whose edge sets are exactly
    ``delta`` apart."""
    delta = int(delta)
    ca = -((delta + 2) // 2)
    cb = ca + delta + 2
    if max(abs(ca), abs(cb)) + 1 > box.side // 2:
        raise ConfigError(f"separation {delta} does not fit in a box of side {box.side}")
    d = box.dimension
    center_a = (ca,) + (0,) * (d - 1)
    center_b = (cb,) + (0,) * (d - 1)
    return (
        GraphRegion(box, "box", (center_a, 2)),
        GraphRegion(box, "box", (center_b, 2)),
    )


def ct_experiment(cfg: ExperimentConfig) -> MonteCarloReport:
    """Resolvent decay fits in certified spectral windows.

    The potential is deterministic (constant, or the seed's sample 0); each
    configured window (r, s, E) yields one exponential fit over the shared
    separations, plus the self-consistent prefactor constant.
    """
    from .resolvent import combes_thomas_experiment

    t0 = time.time()
    if not cfg.windows:
        raise ConfigError("combes-thomas needs (r, s, E) windows")
    L = cfg.box_sizes[0]
    box = LatticeBox(cfg.dimension, L)
    graph = build_graph(box)
    if cfg.potential_constant is not None:
        op = assemble(graph, float(cfg.potential_constant), m=cfg.m)
    else:
        op = assemble(graph, sample_config(graph, cfg.measure, cfg.master_seed, 0), m=cfg.m)
    pairs = [cell_pair_regions(box, dl) for dl in cfg.deltas]

    rows, per_window = [], []
    for w in cfg.windows:
        r, s, E = (float(v) for v in w)
        res = combes_thomas_experiment(op, (r, s), E, pairs)
        for dl, nm in zip(res["deltas"], res["norms"]):
            rows.append({"window_r": r, "window_s": s, "energy": E, "delta": dl, "norm": nm})
        per_window.append(
            {
                "window": [r, s],
                "energy": E,
                "eta": res["eta"],
                "eta_times_width": res["eta_times_width"],
                "rate": res["fit_rate"],
                "prefactor": res["fit_prefactor"],
                "r_squared": res["r_squared"],
                "c1_empirical": res["c1_empirical"],
            }
        )
    aggregates = {"windows": per_window}
    return MonteCarloReport(
        "combes-thomas", cfg.to_dict(), aggregates, rows, time.time() - t0
    )


# ---------------------------------------------------------------------------
# nested-box inequality, Monte Carlo aggregate
# ---------------------------------------------------------------------------


def gri_monte_carlo(cfg: ExperimentConfig) -> MonteCarloReport:
    """Distribution of the nested-box resolvent ratio over disorder samples.

    The potential of the inner box is the restriction of the outer sample, as
    required for comparing the two restrictions of one operator.  Region A is
    a cell at the common centre, region B a cell near the outer boundary.
    """
    t0 = time.time()
    if not cfg.geometries:
        raise ConfigError("gri needs (L_inner, L_outer) geometry pairs")
    if cfg.energy is None:
        raise ConfigError("gri needs a probe energy")
    E = float(cfg.energy)

    samples = []
    per_geom = {}
    for L_in, L_out in cfg.geometries:
        box_in = LatticeBox(cfg.dimension, int(L_in))
        box_out = LatticeBox(cfg.dimension, int(L_out))
        g_in = build_graph(box_in)
        g_out = build_graph(box_out)
        emap = edge_injection(g_in, g_out)
        region_a = GraphRegion(box_in, "box", (box_in.center, 2))
        b_center = list(box_out.center)
        b_center[0] += box_out.side // 2 - 1
        region_b = GraphRegion(box_out, "box", (tuple(b_center), 2))
        below = E < cfg.measure.q_minus  # certified resolvent set for every sample

        def task(i, g_in=g_in, g_out=g_out, emap=emap, region_a=region_a, region_b=region_b, below=below):
            om_out = sample_config(g_out, cfg.measure, cfg.master_seed, i)
            op_out = assemble(g_out, om_out, m=cfg.m)
            op_in = assemble(g_in, om_out.values[emap], m=cfg.m)
            res = gri_experiment(
                op_in,
                op_out,
                E,
                region_a,
                region_b,
                allow_override=cfg.override_suitable,
                assume_in_resolvent_set=below,
            )
            res = {k: float(v) for k, v in res.items()}
            res.update(sample=i, L_inner=int(g_in.box.side), L_outer=int(g_out.box.side))
            return res

        rows = _map_samples(task, cfg.n_samples, cfg.workers)
        samples.extend(rows)
        ratios = np.array([r["ratio"] for r in rows])
        per_geom[f"{L_in}_in_{L_out}"] = {
            "c_geom_empirical": float(ratios.max()),
            "median_ratio": float(np.median(ratios)),
            "max_over_median": float(ratios.max() / np.median(ratios)),
        }
    aggregates = {"per_geometry": per_geom, "energy": E}
    return MonteCarloReport("gri", cfg.to_dict(), aggregates, samples, time.time() - t0)
