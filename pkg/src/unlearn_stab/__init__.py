"""Linear-stability analysis of gradient-based machine unlearning.

Building blocks: a symmetric-matrix kernel (`matker`), retain/forget
coherence measures (`coherence`), stability recurrences and thresholds
(`stability`), explicit test constructions (`synthetic`), a Monte-Carlo
dynamics simulator and phase-boundary sweep (`dynsim`), a two-layer
ReLU CNN memorization testbed (`cnnmem`), and a CLI (`cli`).
"""

from .coherence import (
    CoherenceResult,
    HessianEnsemble,
    UnlearnConfig,
    coefficients,
    load_ensemble,
    mix_coherence,
    mix_hessian,
    mix_hessian_pair,
    save_ensemble,
    single_coherence,
)
from .matker import RankOneFactor, SymMatrix, frob_product, lambda_max, psd_sqrt, sym_eig
from .stability import (
    Classification,
    JOperator,
    NoiseSequence,
    StabilityReport,
    classify,
    convergence_threshold,
    divergence_threshold,
    exact_second_moment,
    full_hessians,
    noise_recurrence,
    upper_bound_trace,
)
from .synthetic import (
    MatchingSpec,
    QConstructionSpec,
    build_matching_construction,
    build_q_construction,
)

__version__ = "0.1.0"

__all__ = [
    "CoherenceResult",
    "HessianEnsemble",
    "UnlearnConfig",
    "coefficients",
    "load_ensemble",
    "mix_coherence",
    "mix_hessian",
    "mix_hessian_pair",
    "save_ensemble",
    "single_coherence",
    "RankOneFactor",
    "SymMatrix",
    "frob_product",
    "lambda_max",
    "psd_sqrt",
    "sym_eig",
    "Classification",
    "JOperator",
    "NoiseSequence",
    "StabilityReport",
    "classify",
    "convergence_threshold",
    "divergence_threshold",
    "exact_second_moment",
    "full_hessians",
    "noise_recurrence",
    "upper_bound_trace",
    "MatchingSpec",
    "QConstructionSpec",
    "build_matching_construction",
    "build_q_construction",
    "__version__",
]
