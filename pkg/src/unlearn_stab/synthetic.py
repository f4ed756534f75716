"""Explicit Hessian ensembles with known coherence structure.

Two constructions: an aligned-block family (Q samples per set share one
curvature direction, the rest are mutually orthogonal) whose set-level
sharpness is pinned at 2 while Q tunes the coherence, and a
matching-bound family (a block of aligned retain samples, zero forget
Hessians) that realizes a requested (lambda_max(D), sigma) exactly.
A small random rank-one generator is included for property tests.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .coherence import HessianEnsemble, UnlearnConfig, coefficients
from .errors import InfeasibleSpec, NoStochasticity, ShapeError
from .matker import RankOneFactor

INTEGRALITY_TOL = 1e-9


@dataclass(frozen=True)
class QConstructionSpec:
    """Aligned-block family: per set, samples 0..Q-1 carry weight
    m = 2n/Q on basis vector e_0 and sample i >= Q carries weight m on
    its own basis vector e_{i-Q+1}.  Both the retain and forget sets use
    the construction, so the set means and the mix-Hessian all have top
    eigenvalue exactly Q * m / n = 2.
    """

    n: int
    q: int
    dim: Optional[int] = None

    def __post_init__(self):
        if self.q < 1 or self.q > self.n:
            raise ValueError(f"need 1 <= Q <= n, got Q={self.q}, n={self.n}")
        min_dim = self.n - self.q + 1
        if self.dim is None:
            object.__setattr__(self, "dim", min_dim + 1)
        elif self.dim < min_dim:
            raise ShapeError(f"dim {self.dim} < required {min_dim}")

    @property
    def m(self) -> float:
        return 2.0 * self.n / self.q


def _q_set(spec: QConstructionSpec) -> tuple:
    members = []
    for i in range(spec.n):
        basis = 0 if i < spec.q else i - spec.q + 1
        vec = np.zeros(spec.dim)
        vec[basis] = 1.0
        members.append(RankOneFactor(vec, spec.m))
    return tuple(members)


def build_q_construction(spec: QConstructionSpec) -> HessianEnsemble:
    """Rank-one ensemble with identical retain and forget constructions."""
    members = _q_set(spec)
    return HessianEnsemble(members, members, spec.dim)


@dataclass(frozen=True)
class MatchingSpec:
    """Target (sigma, lambda_max(D)) pair to realize exactly.

    sigma_target / n_f must round to an integer aligned-sample count in
    [1, n_r] (within 1e-9); the forget set is all zero Hessians.
    """

    sigma_target: float
    n_r: int
    n_f: int
    lambda1_d_target: float
    config: UnlearnConfig

    def __post_init__(self):
        if self.sigma_target <= 0 or self.lambda1_d_target <= 0:
            raise InfeasibleSpec("targets must be positive")
        if self.config.n_retain != self.n_r or self.config.n_forget != self.n_f:
            raise InfeasibleSpec("config set sizes must match the spec's n_r, n_f")

    @property
    def aligned_count(self) -> int:
        ratio = self.sigma_target / self.n_f
        count = round(ratio)
        if abs(ratio - count) > INTEGRALITY_TOL:
            raise InfeasibleSpec(
                f"sigma/n_f = {ratio!r} is not an integer within {INTEGRALITY_TOL}"
            )
        if count < 1 or count > self.n_r:
            raise InfeasibleSpec(f"aligned count {count} outside [1, {self.n_r}]")
        return count


def build_matching_construction(spec: MatchingSpec, dim: int = 2) -> HessianEnsemble:
    """Realize the requested (lambda_max(D), sigma) exactly.

    Retain samples 0..k-1 (k = sigma/n_f) carry weight
    m = lambda1_D * n_r / (C'_r * k) on e_0, the rest are zero; the
    forget set is all zero.  Every pairwise mix-Hessian is diagonal, so
    the step operators commute, and the k * n_f nonzero coherence
    entries all equal C'_r * m (exactly 1 after normalizing by the
    largest pair eigenvalue), giving top eigenvalue sigma.
    """
    if dim < 1:
        raise ShapeError(f"dim must be >= 1, got {dim}")
    _, _, cp_r, _ = coefficients(spec.config)
    if cp_r == 0.0:
        raise NoStochasticity("C'_r = 0; the aligned weight would be infinite")
    count = spec.aligned_count
    m = spec.lambda1_d_target * spec.n_r / (cp_r * count)
    e0 = np.zeros(dim)
    e0[0] = 1.0
    retain = tuple(
        RankOneFactor(e0, m if i < count else 0.0) for i in range(spec.n_r)
    )
    forget = tuple(RankOneFactor(e0, 0.0) for _ in range(spec.n_f))
    return HessianEnsemble(retain, forget, dim)


def random_rank_one_ensemble(
    n_r: int,
    n_f: int,
    dim: int,
    rng: np.random.Generator,
    weight_scale: float = 1.0,
) -> HessianEnsemble:
    """Uniform random rank-one ensemble for property tests: unit-ish
    Gaussian directions with Uniform(0, weight_scale] weights."""
    def factor():
        vec = rng.standard_normal(dim)
        vec /= np.linalg.norm(vec)
        return RankOneFactor(vec, weight_scale * (1.0 - rng.random()))

    retain = tuple(factor() for _ in range(n_r))
    forget = tuple(factor() for _ in range(n_f))
    return HessianEnsemble(retain, forget, dim)
