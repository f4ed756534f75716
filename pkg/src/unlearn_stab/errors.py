"""Exception types shared across the package."""


class UnlearnStabError(Exception):
    """Base class for all package-specific errors."""


class InvalidMatrix(UnlearnStabError):
    """Matrix input contains NaN/Inf or is not square."""


class NotPSD(UnlearnStabError):
    """Matrix has an eigenvalue below the PSD clamping tolerance."""


class ShapeError(UnlearnStabError):
    """Dimension mismatch between operands."""


class NoStochasticity(UnlearnStabError):
    """Both minibatch variance coefficients vanish; the normalized
    mixing weights are undefined and stability is governed by the
    spectral radius of the deterministic operator alone."""


class EmptyRetainSet(UnlearnStabError):
    """Operation requires at least one retain Hessian."""


class EmptyForgetSet(UnlearnStabError):
    """Operation requires at least one forget Hessian."""


class DegenerateEnsemble(UnlearnStabError):
    """All Hessians are zero; the coherence measure is 0/0."""


class UndefinedThreshold(UnlearnStabError):
    """Threshold radicand is nonpositive (batch size not strictly below
    both set sizes)."""


class BoundInapplicable(UnlearnStabError):
    """The spectral precondition for the trace upper bound fails."""


class InvalidBatch(UnlearnStabError):
    """Batch size outside [1, n]."""


class InfeasibleSpec(UnlearnStabError):
    """Requested construction parameters are not realizable."""


class TrainingDiverged(UnlearnStabError):
    """Training loss became non-finite."""


class PairBudgetExceeded(UnlearnStabError):
    """Number of retain-forget pairs exceeds the configured memory cap."""


class ConfigError(UnlearnStabError):
    """Bad experiment configuration (unknown key, unparsable value)."""
