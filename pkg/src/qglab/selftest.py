"""Built-in oracle suite: quick end-to-end checks against independent values.

Every check compares the library against something it did not compute the
same way: hand-enumerated graphs, analytic interval spectra, exact pencil
identities, or regenerated runs.  Intended to finish in well under a minute.
"""

from __future__ import annotations

import numpy as np

from .assembly import assemble, shift_potential
from .experiments import ExperimentConfig, wegner_experiment
from .lattice import (
    GraphRegion,
    LatticeBox,
    build_graph,
    closed_form_edge_count,
    region_mask,
    set_distance,
)
from .randomness import sample_config, sample_config_conditional, uniform_measure
from .resolvent import ResolventProbe, resolvent_identity_residuals
from .spectral import eigen_all, eigen_low, secular_eigenvalues


def _check_lattice():
    g = build_graph(LatticeBox(2, 2))
    assert g.n_edges == 12 and g.n_vertices == 9
    for d in (1, 2, 3):
        for L in (2, 4, 6, 8):
            gg = build_graph(LatticeBox(d, L))
            assert gg.n_edges == closed_form_edge_count(d, L)
            assert gg.degree.sum() == 2 * gg.n_edges


def _check_distance():
    g = build_graph(LatticeBox(1, 8))
    a = np.zeros(g.n_edges, bool)
    b = np.zeros(g.n_edges, bool)
    a[0] = True
    b[3] = True
    # edges [-4,-3] and [-1,0] on the line: gap of 2
    assert abs(set_distance(g, a, b) - 2.0) < 1e-12
    assert set_distance(g, a, a) == 0.0


def _check_sampler():
    g = build_graph(LatticeBox(2, 10))
    meas = uniform_measure(0.0, 1.0)
    c1 = sample_config(g, meas, 42, 7)
    c2 = sample_config(g, meas, 42, 7)
    assert np.array_equal(c1.values, c2.values)
    draws = np.concatenate([sample_config(g, meas, 1, i).values for i in range(60)])
    assert abs(draws.mean() - 0.5) < 3 * 0.2887 / np.sqrt(draws.size)


def _check_shift():
    g = build_graph(LatticeBox(2, 4))
    om = sample_config(g, uniform_measure(), 3, 0)
    op = assemble(g, om, m=4)
    va = eigen_all(op).eigenvalues
    vb = eigen_all(shift_potential(op, 1.0)).eigenvalues
    assert np.max(np.abs(vb - va - 1.0) / np.maximum(1.0, np.abs(va + 1.0))) < 1e-10


def _check_lower_bound():
    g = build_graph(LatticeBox(1, 6))
    meas = uniform_measure(0.0, 1.0)
    for i in range(50):
        om = sample_config_conditional(g, meas, 0.3, 11, i)
        op = assemble(g, om, m=8)
        e0 = eigen_low(op, 1).eigenvalues[0]
        assert e0 >= 0.3, (i, e0)


def _check_secular_vs_fem():
    g = build_graph(LatticeBox(1, 4))
    om = sample_config(g, uniform_measure(0.0, 1.0), 5, 2).values
    op = assemble(g, om, m=64)
    fem = eigen_low(op, 6).eigenvalues
    scan = secular_eigenvalues(g, om, (-0.1, float(fem[-1]) + 0.2))
    exact = scan.with_multiplicity()[: len(fem)]
    assert len(exact) == len(fem)
    assert np.max(np.abs(fem - exact) / np.maximum(1.0, np.abs(exact))) < 1e-3


def _check_free_operator():
    g = build_graph(LatticeBox(1, 10))
    op = assemble(g, 0.0, m=16)
    res = eigen_low(op, 2)
    assert abs(res.eigenvalues[0]) < 1e-10
    v0 = res.eigenvectors[:, 0]
    assert np.ptp(v0) < 1e-6 * np.abs(v0).max()


def _check_block_norm():
    g = build_graph(LatticeBox(1, 6))
    op = assemble(g, 4.0, m=16)
    probe = ResolventProbe(op, 2.0)
    full = np.ones(op.n_dofs, bool)
    n = probe.block_norm(full, full)
    vals = eigen_all(op).eigenvalues
    assert abs(n * np.abs(vals - 2.0).min() - 1.0) < 1e-8
    ra = op.region_dofs(GraphRegion(g.box, "box", ((-2,), 2)))
    rb = op.region_dofs(GraphRegion(g.box, "box", ((2,), 2)))
    assert abs(probe.block_norm(ra, rb) - probe.block_norm(rb, ra)) < 1e-12


def _check_identity():
    gi = build_graph(LatticeBox(1, 18))
    go = build_graph(LatticeBox(1, 30))
    from .lattice import edge_injection

    om_out = sample_config(go, uniform_measure(), 9, 0).values
    om_in = om_out[edge_injection(gi, go)]
    r = resolvent_identity_residuals(
        assemble(gi, om_in, m=256), assemble(go, om_out, m=256), z=-1.0, n_vectors=5
    )
    assert r.max() < 1e-5, r.max()


def _check_reproducible():
    cfg = dict(
        dimension=1,
        box_sizes=(4,),
        m=8,
        n_samples=64,
        master_seed=12,
        intervals=((0.4, 0.6),),
    )
    r1 = wegner_experiment(ExperimentConfig(workers=1, **cfg), strict=False)
    r2 = wegner_experiment(ExperimentConfig(workers=2, **cfg), strict=False)
    assert r1.digest == r2.digest


CHECKS = [
    ("lattice-counts", _check_lattice),
    ("set-distance", _check_distance),
    ("sampler", _check_sampler),
    ("shift-identity", _check_shift),
    ("ground-state-lower-bound", _check_lower_bound),
    ("secular-vs-fem", _check_secular_vs_fem),
    ("free-operator", _check_free_operator),
    ("block-norm", _check_block_norm),
    ("resolvent-identity", _check_identity),
    ("reproducibility", _check_reproducible),
]


def run() -> int:
    failures = 0
    for name, fn in CHECKS:
        try:
            fn()
            print(f"PASS {name}")
        except Exception as exc:
            failures += 1
            print(f"FAIL {name}: {exc!r}")
    return 0 if failures == 0 else 3
