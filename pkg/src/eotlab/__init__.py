"""Entropic optimal transport on grid measures with regularity diagnostics."""

from .couplings import (
    AffineFit,
    BallPairRegion,
    Complement,
    CompetitorRegion,
    Coupling,
    HashRegion,
    LongTrajRegion,
    affine_fit,
    check_marginals,
    crossing_stats,
    diagonal_coupling,
    load_coupling,
    local_energy,
    long_trajectory_stats,
    monge_coupling,
    product_coupling,
    radius_scan_rows,
    restrict,
    save_coupling,
)
from .errors import (
    AdmissibilityError,
    CertificateError,
    ConfigError,
    DomainError,
    EotlabError,
    MassMismatchError,
    SmallnessError,
)
from .grids import (
    DataTermReport,
    GridMeasure,
    GridSpec,
    data_term,
    density_at,
    holder_seminorm,
    load_measure,
    make_measure,
    measure_from_density,
    save_measure,
    symmetric_grid,
)
from .regularity import (
    CampanatoTrace,
    DefectReport,
    HarmonicFit,
    OneStepOutcome,
    RegularityConfig,
    campanato_iterate,
    expansion_experiment,
    fit_harmonic_displacement,
    harmonic_fit,
    long_traj_experiment,
    one_step,
    quasimin_defect,
    soft_lemma_check,
)
from .scalings import (
    DEFAULT_WINDOWS,
    Scaling,
    Windows,
    apply_to_coupling,
    apply_to_measures,
    compose,
    identity_scaling,
    normalizing_scaling,
    transform_source_atoms,
    transform_target_atoms,
)
from .solvers import (
    ExactOTResult,
    SinkhornResult,
    entropic_cost,
    exact_ot,
    gibbs_identity_check,
    sinkhorn,
)

__version__ = "0.1.0"
