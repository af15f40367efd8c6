"""Numerical laboratory for a random Schrödinger operator on the cubic-lattice
quantum graph: graph geometry, disorder sampling, finite-element pencils,
spectral and secular solvers, resolvent probes, and Monte Carlo experiment
drivers for the quantitative localization estimates."""

__version__ = "0.1.0"

from .lattice import (
    GraphPoint,
    GraphRegion,
    LatticeBox,
    LatticeGraph,
    build_graph,
    region_mask,
    set_distance,
)
from .randomness import (
    PotentialConfig,
    SingleSiteMeasure,
    measure_diagnostics,
    power_tail_measure,
    sample_config,
    sample_config_conditional,
    uniform_measure,
)
from .assembly import DiscreteOperator, assemble, shift_potential
from .spectral import (
    SecularScan,
    SpectralResult,
    eigen_all,
    eigen_below,
    eigen_low,
    secular_eigenvalues,
    semigroup_sup_norm,
)
from .resolvent import (
    DecayFit,
    ResolventProbe,
    caccioppoli_check,
    combes_thomas_experiment,
    fit_decay,
    gri_experiment,
    resolvent_identity_residuals,
)
from .experiments import (
    ExperimentConfig,
    MonteCarloReport,
    ct_experiment,
    dynamical_moment_experiment,
    eigenfunction_decay_experiment,
    gri_monte_carlo,
    ils_experiment,
    msa_flow_experiment,
    ultracontractivity_experiment,
    wegner_experiment,
)
