"""Coherence measures over retain/forget Hessian ensembles.

Quantifies cross-sample curvature alignment: the classic single-set
coherence (Frobenius norms of square-root Hessian products, top
eigenvalue normalized by the sharpest individual sample) and its
retain/forget generalization built on pairwise mix-Hessians
``D_rf = C'_r H_r + C'_f H_f``.

Two computation paths exist for every measure: a dense reference path
(explicit PSD square roots, cached once per call) and a closed-form
rank-one path running on Gram matrices of the factor vectors.  They
agree to 1e-9 relative and tests hold them to it.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence, Union

import numpy as np

from . import matker
from .errors import (
    DegenerateEnsemble,
    EmptyForgetSet,
    InvalidMatrix,
    NoStochasticity,
    NotPSD,
    PairBudgetExceeded,
    ShapeError,
)
from .matker import RankOneFactor, SymMatrix, as_dense, frob_product, psd_sqrt

Hessian = Union[SymMatrix, RankOneFactor]

DEFAULT_MAX_PAIRS = 10_000


@dataclass(frozen=True)
class UnlearnConfig:
    """Hyperparameters of the ascent/descent unlearning update.

    eta       learning rate (> 0)
    alpha     forget-importance weight in [0, 1]
    batch     Bernoulli batch size B (each sample of a set enters a step's
              batch independently with probability B / n_set)
    n_retain  retain-set size (>= batch)
    n_forget  forget-set size (0, or >= batch)
    """

    eta: float
    alpha: float
    batch: int
    n_retain: int
    n_forget: int

    def __post_init__(self):
        if not (self.eta > 0.0 and math.isfinite(self.eta)):
            raise ValueError(f"eta must be positive and finite, got {self.eta}")
        if not (0.0 <= self.alpha <= 1.0):
            raise ValueError(f"alpha must lie in [0, 1], got {self.alpha}")
        if int(self.batch) != self.batch or self.batch < 1:
            raise ValueError(f"batch must be a positive integer, got {self.batch}")
        if int(self.n_retain) != self.n_retain or self.n_retain < 1:
            raise ValueError(f"n_retain must be a positive integer, got {self.n_retain}")
        if int(self.n_forget) != self.n_forget or self.n_forget < 0:
            raise ValueError(f"n_forget must be a nonnegative integer, got {self.n_forget}")
        if self.batch > self.n_retain:
            raise ValueError(f"batch {self.batch} exceeds n_retain {self.n_retain}")
        if self.n_forget and self.batch > self.n_forget:
            raise ValueError(f"batch {self.batch} exceeds n_forget {self.n_forget}")


def raw_coefficients(config: UnlearnConfig) -> tuple[float, float]:
    """Minibatch variance coefficients (C_r, C_f), possibly both zero.

    C_r = eta^2 (1-alpha)^2 (1/n_r)(1/B - 1/n_r) and symmetrically for
    C_f with alpha^2 and n_f.  An absent forget set contributes zero.
    """
    eta, alpha = config.eta, config.alpha
    c_r = eta**2 * (1.0 - alpha) ** 2 * (1.0 / config.n_retain) * (
        1.0 / config.batch - 1.0 / config.n_retain
    )
    if config.n_forget == 0 or alpha == 0.0:
        c_f = 0.0
    else:
        c_f = eta**2 * alpha**2 * (1.0 / config.n_forget) * (
            1.0 / config.batch - 1.0 / config.n_forget
        )
    return c_r, c_f


def coefficients(config: UnlearnConfig) -> tuple[float, float, float, float]:
    """Variance coefficients and their normalized fractions.

    Returns (C_r, C_f, C'_r, C'_f) with C'_r = sqrt(C_r) / (sqrt(C_r) +
    sqrt(C_f)) and C'_f = 1 - C'_r.  Raises :class:`NoStochasticity`
    when both raw coefficients vanish (both sets sampled full batch):
    the fractions are then 0/0 and stability is governed by the
    deterministic operator's spectral radius alone.
    """
    c_r, c_f = raw_coefficients(config)
    denom = math.sqrt(c_r) + math.sqrt(c_f)
    if denom == 0.0:
        raise NoStochasticity(
            "both variance coefficients vanish (full-batch sampling on every set)"
        )
    cp_r = math.sqrt(c_r) / denom
    return c_r, c_f, cp_r, 1.0 - cp_r


@dataclass(frozen=True)
class HessianEnsemble:
    """Per-sample Hessians partitioned into retain and forget sets.

    Members are dense :class:`SymMatrix` values or :class:`RankOneFactor`
    shortcuts; all must share one dimension and be PSD within the kernel
    clamping tolerance.
    """

    retain: tuple
    forget: tuple
    dim: int

    def __post_init__(self):
        object.__setattr__(self, "retain", tuple(self.retain))
        object.__setattr__(self, "forget", tuple(self.forget))
        for h in self.retain + self.forget:
            if h.dim != self.dim:
                raise ShapeError(f"member dim {h.dim} != ensemble dim {self.dim}")
            if isinstance(h, SymMatrix):
                evals = np.linalg.eigvalsh(h.a)
                if evals[0] < -matker.DEFAULT_PSD_TOL * max(1.0, evals[-1]):
                    raise NotPSD(f"ensemble member has eigenvalue {evals[0]:.3e}")
            elif not isinstance(h, RankOneFactor):
                raise InvalidMatrix(f"unsupported member type {type(h)!r}")

    @property
    def n_retain(self) -> int:
        return len(self.retain)

    @property
    def n_forget(self) -> int:
        return len(self.forget)

    @property
    def is_rank_one(self) -> bool:
        members = self.retain + self.forget
        return bool(members) and all(isinstance(h, RankOneFactor) for h in members)


@dataclass(frozen=True)
class CoherenceResult:
    """Coherence matrix plus the derived scalar measure.

    sigma = lambda_max(matrix_s) / max_pair_lambda, where
    max_pair_lambda is the largest eigenvalue over the individual
    matrices the entries were built from (per-sample Hessians for the
    single-set measure, pairwise mix-Hessians for the mixed one), and
    lambda_max_d is the top eigenvalue of their average.
    """

    matrix_s: SymMatrix
    sigma: float
    max_pair_lambda: float
    lambda_max_d: float


def mix_hessian_pair(h_r: Hessian, h_f: Hessian, config: UnlearnConfig) -> SymMatrix:
    """Pairwise mix-Hessian D_rf = C'_r H_r + C'_f H_f (dense, PSD)."""
    _, _, cp_r, cp_f = coefficients(config)
    a, b = as_dense(h_r), as_dense(h_f)
    if a.dim != b.dim:
        raise ShapeError(f"dim mismatch: {a.dim} vs {b.dim}")
    return SymMatrix(cp_r * a.a + cp_f * b.a)


def mix_hessian(ensemble: HessianEnsemble, config: UnlearnConfig) -> SymMatrix:
    """Average mix-Hessian D over all retain-forget pairs.

    Equals C'_r H_R + C'_f H_F with H_R, H_F the set means, which is the
    form computed here (identical to averaging the n_r * n_f pairwise
    D_rf and much cheaper).
    """
    if ensemble.n_forget == 0:
        raise EmptyForgetSet("mix-Hessian needs at least one forget sample")
    _, _, cp_r, cp_f = coefficients(config)
    mean_r = sum(as_dense(h).a for h in ensemble.retain) / ensemble.n_retain
    mean_f = sum(as_dense(h).a for h in ensemble.forget) / ensemble.n_forget
    return SymMatrix(cp_r * mean_r + cp_f * mean_f)


def _rank1_arrays(factors: Sequence[RankOneFactor]) -> tuple[np.ndarray, np.ndarray]:
    vecs = np.stack([f.vector for f in factors])
    weights = np.array([f.weight for f in factors])
    return vecs, weights


def _rank1_lambda_max_mixture(
    vecs: np.ndarray, weights: np.ndarray, coeffs: np.ndarray
) -> float:
    # lambda_max(sum_i c_i w_i v_i v_i^T) equals the top eigenvalue of the
    # small Gram matrix K_ik = s_i s_k <v_i, v_k>, s_i = sqrt(c_i w_i).
    s = np.sqrt(coeffs * weights)
    k = np.outer(s, s) * (vecs @ vecs.T)
    return float(np.linalg.eigvalsh(k)[-1]) if k.size else 0.0


def single_coherence(hessians: Sequence[Hessian], method: str = "auto") -> CoherenceResult:
    """Single-set coherence over one collection of PSD Hessians.

    Entry (i, j) of the coherence matrix is the Frobenius norm of
    ``H_i^{1/2} H_j^{1/2}``; sigma is its top eigenvalue divided by the
    largest per-sample eigenvalue.  All-zero collections raise
    :class:`DegenerateEnsemble` rather than returning 0/0.
    """
    hessians = list(hessians)
    if not hessians:
        raise ValueError("need at least one Hessian")
    if method == "auto":
        method = "rank1" if all(isinstance(h, RankOneFactor) for h in hessians) else "dense"
    n = len(hessians)
    if method == "rank1":
        vecs, weights = _rank1_arrays(hessians)
        gram = np.outer(weights, weights) * (vecs @ vecs.T) ** 2
        s_mat = np.sqrt(np.maximum(gram, 0.0))
        per_sample = weights * np.einsum("ij,ij->i", vecs, vecs)
        max_lam = float(per_sample.max()) if n else 0.0
        mean_lam = _rank1_lambda_max_mixture(vecs, weights, np.full(n, 1.0 / n))
    elif method == "dense":
        roots = [psd_sqrt(as_dense(h)) for h in hessians]
        s_mat = np.zeros((n, n))
        for i in range(n):
            for j in range(i, n):
                s_mat[i, j] = s_mat[j, i] = frob_product(roots[i], roots[j])
        max_lam = max(matker.lambda_max(as_dense(h)) for h in hessians)
        mean = sum(as_dense(h).a for h in hessians) / n
        mean_lam = matker.lambda_max(mean)
    else:
        raise ValueError(f"unknown method {method!r}")
    if max_lam <= 0.0:
        raise DegenerateEnsemble("all Hessians are zero")
    sigma = matker.lambda_max(s_mat) / max_lam
    return CoherenceResult(SymMatrix(s_mat), sigma, max_lam, mean_lam)


def pair_index(r: int, f: int, n_forget: int) -> int:
    """Row-major pair ordinal (retain index outer): p = r * n_f + f."""
    return r * n_forget + f


def mix_coherence(
    ensemble: HessianEnsemble,
    config: UnlearnConfig,
    method: str = "auto",
    max_pairs: int = DEFAULT_MAX_PAIRS,
) -> CoherenceResult:
    """Mixed retain/forget coherence.

    The coherence matrix is indexed by retain-forget pair ordinals
    ``p = r * n_f + f`` (row-major, retain outer) and holds Frobenius
    norms of products of mix-Hessian square roots.  sigma is its top
    eigenvalue over the largest individual ``lambda_max(D_rf)``.

    The dense path precomputes all n_r * n_f square roots once, an
    O(pairs * d^2) memory cost capped by ``max_pairs`` (default 10000,
    :class:`PairBudgetExceeded` beyond).  Rank-one ensembles instead run
    on sample Gram matrices and never densify.
    """
    n_r, n_f = ensemble.n_retain, ensemble.n_forget
    if n_r == 0 or n_f == 0:
        raise EmptyForgetSet("mix coherence needs both sets nonempty")
    n_pairs = n_r * n_f
    if n_pairs > max_pairs:
        raise PairBudgetExceeded(
            f"{n_pairs} retain-forget pairs exceed max_pairs={max_pairs}"
        )
    _, _, cp_r, cp_f = coefficients(config)
    if method == "auto":
        method = "rank1" if ensemble.is_rank_one else "dense"

    if method == "rank1":
        vecs, weights = _rank1_arrays(ensemble.retain + ensemble.forget)
        ip = vecs @ vecs.T
        gram = np.outer(weights, weights) * ip**2  # Tr[H_i H_k]
        rp = np.repeat(np.arange(n_r), n_f)
        fp = n_r + np.tile(np.arange(n_f), n_r)
        s2 = (cp_r * cp_r) * gram[np.ix_(rp, rp)]
        s2 += (cp_r * cp_f) * gram[np.ix_(rp, fp)]
        s2 += (cp_f * cp_r) * gram[np.ix_(fp, rp)]
        s2 += (cp_f * cp_f) * gram[np.ix_(fp, fp)]
        s_mat = np.sqrt(np.maximum(s2, 0.0))
        # lambda_max(D_rf) per pair from the 2x2 Gram of the two factors
        lam_i = weights * np.einsum("ij,ij->i", vecs, vecs)
        g11 = cp_r * lam_i[:n_r][:, None]
        g22 = cp_f * lam_i[n_r:][None, :]
        wprod = np.outer(weights[:n_r], weights[n_r:])
        cross2 = cp_r * cp_f * wprod * ip[:n_r, n_r:] ** 2
        half = 0.5 * (g11 + g22)
        gap = 0.5 * (g11 - g22)
        pair_lams = half + np.sqrt(np.maximum(gap**2 + cross2, 0.0))
        max_lam = float(pair_lams.max())
        coeffs = np.concatenate(
            [np.full(n_r, cp_r / n_r), np.full(n_f, cp_f / n_f)]
        )
        lam_d = _rank1_lambda_max_mixture(vecs, weights, coeffs)
    elif method == "dense":
        pairs = [
            mix_hessian_pair(ensemble.retain[r], ensemble.forget[f], config)
            for r in range(n_r)
            for f in range(n_f)
        ]
        roots = [psd_sqrt(p) for p in pairs]
        s_mat = np.zeros((n_pairs, n_pairs))
        for p in range(n_pairs):
            for q in range(p, n_pairs):
                s_mat[p, q] = s_mat[q, p] = frob_product(roots[p], roots[q])
        max_lam = max(matker.lambda_max(p) for p in pairs)
        lam_d = matker.lambda_max(mix_hessian(ensemble, config))
    else:
        raise ValueError(f"unknown method {method!r}")

    if max_lam <= 0.0:
        raise DegenerateEnsemble("all mix-Hessians are zero")
    sigma = matker.lambda_max(s_mat) / max_lam
    return CoherenceResult(SymMatrix(s_mat), sigma, max_lam, lam_d)


# ---------------------------------------------------------------------------
# Ensemble file format.
#
# Dense:    header line "d n_r n_f", then one whitespace-separated line per
#           member holding the d*d entries flattened row-major (retain
#           members first, then forget).
# Rank-one: header line "RANK1 d n_r n_f", then one line per member holding
#           the weight followed by the d vector entries.
#
# Set means downstream always normalize by the own set's size (retain mean
# by n_r, forget mean by n_f).
# ---------------------------------------------------------------------------


def save_ensemble(path, ensemble: HessianEnsemble) -> None:
    """Write an ensemble in the documented text format (RANK1 variant
    when every member is a rank-one factor)."""
    lines = []
    if ensemble.is_rank_one:
        lines.append(f"RANK1 {ensemble.dim} {ensemble.n_retain} {ensemble.n_forget}")
        for h in ensemble.retain + ensemble.forget:
            entries = [h.weight] + list(h.vector)
            lines.append(" ".join(f"{x:.17g}" for x in entries))
    else:
        lines.append(f"{ensemble.dim} {ensemble.n_retain} {ensemble.n_forget}")
        for h in ensemble.retain + ensemble.forget:
            flat = as_dense(h).a.ravel()
            lines.append(" ".join(f"{x:.17g}" for x in flat))
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def load_ensemble(path) -> HessianEnsemble:
    """Read an ensemble written by :func:`save_ensemble`."""
    with open(path) as fh:
        tokens = fh.read().split()
    if not tokens:
        raise InvalidMatrix("empty ensemble file")
    pos = 0
    rank_one = tokens[0] == "RANK1"
    if rank_one:
        pos = 1
    try:
        dim, n_r, n_f = (int(tokens[pos + i]) for i in range(3))
    except (ValueError, IndexError) as exc:
        raise InvalidMatrix(f"bad ensemble header: {exc}") from exc
    pos += 3
    members = []
    stride = dim + 1 if rank_one else dim * dim
    expected = pos + stride * (n_r + n_f)
    if len(tokens) != expected:
        raise InvalidMatrix(
            f"expected {expected} tokens for {n_r}+{n_f} members of dim {dim}, "
            f"got {len(tokens)}"
        )
    for _ in range(n_r + n_f):
        chunk = np.array(tokens[pos : pos + stride], dtype=float)
        pos += stride
        if rank_one:
            members.append(RankOneFactor(chunk[1:], chunk[0]))
        else:
            members.append(SymMatrix(chunk.reshape(dim, dim)))
    return HessianEnsemble(tuple(members[:n_r]), tuple(members[n_r:]), dim)
