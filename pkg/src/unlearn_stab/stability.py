"""Stability analysis of the linearized unlearning dynamics.

Deterministic operator ``J = I - eta (1-alpha) H_R + eta alpha H_F``,
the PSD noise-accumulation recurrence N_k and its trace bounds, the
exact second-moment recursion for E||w_k||^2 under Bernoulli
minibatching, and the divergence / convergence threshold predicates on
``(lambda_max(D), sigma)``.

Set means use each set's own size: H_R = (1/n_r) sum over retain,
H_F = (1/n_f) sum over forget (zero matrix when the forget set is
empty).
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import matker
from .coherence import HessianEnsemble, UnlearnConfig, coefficients, raw_coefficients
from .errors import (
    BoundInapplicable,
    EmptyRetainSet,
    NoStochasticity,
    NotPSD,
    UndefinedThreshold,
)
from .matker import SymMatrix, as_dense

# Dense N_k matrices are retained only while cheap; traces are always kept.
MATRIX_STORE_MAX_K = 50
MATRIX_STORE_MAX_DIM = 64


def full_hessians(ensemble: HessianEnsemble) -> tuple[SymMatrix, SymMatrix]:
    """Set-mean Hessians (H_R, H_F); empty forget set yields the zero matrix."""
    if ensemble.n_retain == 0:
        raise EmptyRetainSet("need at least one retain Hessian")
    h_r = sum(as_dense(h).a for h in ensemble.retain) / ensemble.n_retain
    if ensemble.n_forget:
        h_f = sum(as_dense(h).a for h in ensemble.forget) / ensemble.n_forget
    else:
        h_f = np.zeros((ensemble.dim, ensemble.dim))
    return SymMatrix(h_r), SymMatrix(h_f)


@dataclass(frozen=True)
class JOperator:
    """Deterministic part of the unlearning update."""

    matrix: SymMatrix
    eta: float
    alpha: float

    @staticmethod
    def from_ensemble(ensemble: HessianEnsemble, config: UnlearnConfig) -> "JOperator":
        h_r, h_f = full_hessians(ensemble)
        j = (
            np.eye(ensemble.dim)
            - config.eta * (1.0 - config.alpha) * h_r.a
            + config.eta * config.alpha * h_f.a
        )
        return JOperator(SymMatrix(j), config.eta, config.alpha)

    def spectral_bounded(self, epsilon: float) -> bool:
        """True when every eigenvalue lies in [-(1-eps), 1-eps]."""
        evals, _ = matker.sym_eig(self.matrix)
        bound = 1.0 - epsilon
        return bool(evals[0] <= bound and evals[-1] >= -bound)


def spectral_epsilon(j_op: JOperator) -> float:
    """Contraction margin eps = 1 - max(|lambda_min|, |lambda_max|) of J.

    Raises :class:`BoundInapplicable` when the margin is nonpositive
    (J is not a strict contraction, so the binomial trace bound does
    not apply).
    """
    evals, _ = matker.sym_eig(j_op.matrix)
    eps = 1.0 - max(abs(evals[0]), abs(evals[-1]))
    if eps <= 0.0:
        raise BoundInapplicable(
            f"J has spectral radius {1.0 - eps:.6g} >= 1; no contraction margin"
        )
    return eps


@dataclass(frozen=True)
class NoiseSequence:
    """Traces (and optionally the matrices) of the noise recurrence N_k."""

    traces: tuple
    matrices: tuple  # dense N_k for k <= stored horizon, possibly shorter


def _masked_square_sum(members, v: np.ndarray) -> np.ndarray:
    """sum_i H_i V H_i over ensemble members, rank-one members handled
    without densifying."""
    out = np.zeros_like(v)
    for h in members:
        if isinstance(h, matker.RankOneFactor):
            u = h.vector
            quad = float(u @ v @ u)
            out += (h.weight**2 * quad) * np.outer(u, u)
        else:
            a = h.a
            out += a @ v @ a
    return out


def noise_recurrence(
    ensemble: HessianEnsemble, config: UnlearnConfig, k_max: int
) -> NoiseSequence:
    """Noise accumulation N_0 = I, N_k = C_f sum_f H N H + C_r sum_r H N H.

    Each step's result is checked PSD within round-off tolerance.
    Raises :class:`NoStochasticity` when both coefficients vanish.
    """
    if k_max < 0:
        raise ValueError(f"k_max must be >= 0, got {k_max}")
    c_r, c_f = raw_coefficients(config)
    if c_r == 0.0 and c_f == 0.0:
        raise NoStochasticity("N_k is identically zero past k=0 without sampling noise")
    d = ensemble.dim
    store = d <= MATRIX_STORE_MAX_DIM
    current = np.eye(d)
    traces = [float(d)]
    matrices = [SymMatrix(current)] if store else []
    for k in range(1, k_max + 1):
        nxt = c_r * _masked_square_sum(ensemble.retain, current)
        if c_f and ensemble.n_forget:
            nxt += c_f * _masked_square_sum(ensemble.forget, current)
        nxt = 0.5 * (nxt + nxt.T)
        evals = np.linalg.eigvalsh(nxt)
        if evals[0] < -1e-8 * max(1.0, evals[-1]):
            raise NotPSD(f"noise recurrence lost PSD-ness at k={k}: {evals[0]:.3e}")
        traces.append(float(np.trace(nxt)))
        if store and k <= MATRIX_STORE_MAX_K:
            matrices.append(SymMatrix(nxt))
        current = nxt
    return NoiseSequence(tuple(traces), tuple(matrices))


def exact_second_moment(
    ensemble: HessianEnsemble, config: UnlearnConfig, k_max: int
) -> list[float]:
    """Exact E||w_k||^2 for k = 0..k_max under Bernoulli minibatching.

    V_0 = I, V_{k+1} = J V_k J + C_r sum_r H V_k H + C_f sum_f H V_k H;
    returns Tr(V_k).  This is the exact expectation over independent
    Bernoulli masks at every step (masks are independent across steps,
    so the one-step conditional expectation composes).  With both
    coefficients zero the recursion degenerates to the deterministic
    Tr(J^{2k}), which is returned rather than raising.
    """
    if k_max < 0:
        raise ValueError(f"k_max must be >= 0, got {k_max}")
    c_r, c_f = raw_coefficients(config)
    j = JOperator.from_ensemble(ensemble, config).matrix.a
    v = np.eye(ensemble.dim)
    traces = [float(ensemble.dim)]
    for _ in range(k_max):
        nxt = j @ v @ j
        if c_r:
            nxt += c_r * _masked_square_sum(ensemble.retain, v)
        if c_f and ensemble.n_forget:
            nxt += c_f * _masked_square_sum(ensemble.forget, v)
        v = 0.5 * (nxt + nxt.T)
        traces.append(float(np.trace(v)))
    return traces


def divergence_threshold(config: UnlearnConfig, sigma: float) -> float:
    """Mix-Hessian eigenvalue above which divergence is guaranteed.

    sqrt(2) sigma / [eta ((1-alpha) n_f sqrt(n_r/B - 1)
                          + alpha n_r sqrt(n_f/B - 1))].
    Requires B strictly below both set sizes (real radicands).
    """
    b, n_r, n_f = config.batch, config.n_retain, config.n_forget
    if n_f < 1 or b >= n_r or b >= n_f:
        raise UndefinedThreshold(
            f"need 1 <= B < min(n_r, n_f); got B={b}, n_r={n_r}, n_f={n_f}"
        )
    denom = config.eta * (
        (1.0 - config.alpha) * n_f * math.sqrt(n_r / b - 1.0)
        + config.alpha * n_r * math.sqrt(n_f / b - 1.0)
    )
    return math.sqrt(2.0) * sigma / denom


def convergence_threshold(
    config: UnlearnConfig, sigma: float, form: str = "statement"
) -> float:
    """Mix-Hessian eigenvalue below which a converging ensemble exists.

    Two published variants are implemented and reported side by side;
    they differ in where the normalized retain fraction C'_r sits and in
    an extra (1 - alpha) factor:

    statement: 2 sigma / (eta C'_r (sigma + n_f (n_r/B - 1)))
    proof:     (2 sigma / eta) C'_r (1 - alpha) / (sigma + n_f (n_r/B - 1))

    The statement form is the default everywhere a single value is
    needed; sweep outputs carry both.
    """
    b, n_r, n_f = config.batch, config.n_retain, config.n_forget
    if n_f < 1 or b >= n_r or b >= n_f:
        raise UndefinedThreshold(
            f"need 1 <= B < min(n_r, n_f); got B={b}, n_r={n_r}, n_f={n_f}"
        )
    _, _, cp_r, _ = coefficients(config)
    tail = sigma + n_f * (n_r / b - 1.0)
    if form == "statement":
        if cp_r == 0.0:
            raise UndefinedThreshold("C'_r = 0 makes the statement form infinite")
        return 2.0 * sigma / (config.eta * cp_r * tail)
    if form == "proof":
        return (2.0 * sigma / config.eta) * cp_r * (1.0 - config.alpha) / tail
    raise ValueError(f"unknown form {form!r}")


def divergence_sigma_curve(config: UnlearnConfig, lambda_max_d: float) -> float:
    """The sigma at which the divergence criterion is exactly tight for a
    given lambda_max(D); guaranteed-divergence region is sigma below it."""
    b, n_r, n_f = config.batch, config.n_retain, config.n_forget
    if n_f < 1 or b >= n_r or b >= n_f:
        raise UndefinedThreshold(
            f"need 1 <= B < min(n_r, n_f); got B={b}, n_r={n_r}, n_f={n_f}"
        )
    z = (1.0 - config.alpha) * n_f * math.sqrt(n_r / b - 1.0) + config.alpha * n_r * math.sqrt(
        n_f / b - 1.0
    )
    return lambda_max_d * config.eta * z / math.sqrt(2.0)


def convergence_sigma_curve(
    config: UnlearnConfig, lambda_max_d: float, form: str = "statement"
) -> float:
    """The sigma at which the convergence bound is exactly tight for a
    given lambda_max(D); the bound holds for sigma above it.  Returns
    inf when no finite sigma satisfies it."""
    b, n_r, n_f = config.batch, config.n_retain, config.n_forget
    if n_f < 1 or b >= n_r or b >= n_f:
        raise UndefinedThreshold(
            f"need 1 <= B < min(n_r, n_f); got B={b}, n_r={n_r}, n_f={n_f}"
        )
    _, _, cp_r, _ = coefficients(config)
    k_term = n_f * (n_r / b - 1.0)
    if form == "statement":
        numer = lambda_max_d * config.eta * cp_r * k_term
        denom = 2.0 - lambda_max_d * config.eta * cp_r
    elif form == "proof":
        numer = lambda_max_d * config.eta * k_term
        denom = 2.0 * cp_r * (1.0 - config.alpha) - lambda_max_d * config.eta
    else:
        raise ValueError(f"unknown form {form!r}")
    if denom <= 0.0:
        return math.inf
    return numer / denom


class Classification(enum.Enum):
    PREDICT_DIVERGE = "PredictDiverge"
    CONVERGENCE_POSSIBLE = "ConvergencePossible"
    INDETERMINATE = "Indeterminate"


def classify(
    lambda_max_d: float,
    config: UnlearnConfig,
    sigma: float,
    form: str = "statement",
) -> Classification:
    """Compare lambda_max(D) against both thresholds.

    PredictDiverge when at or above the divergence threshold,
    ConvergencePossible when at or below the selected convergence
    threshold, Indeterminate between.
    """
    thr_div = divergence_threshold(config, sigma)
    thr_conv = convergence_threshold(config, sigma, form)
    if lambda_max_d >= thr_div:
        return Classification.PREDICT_DIVERGE
    if lambda_max_d <= thr_conv:
        return Classification.CONVERGENCE_POSSIBLE
    return Classification.INDETERMINATE


def upper_bound_trace(noise: NoiseSequence, epsilon: float, k: int) -> float:
    """Binomial trace bound sum_{r<k} C(k,r) (1-eps)^{2(k-r)} Tr(N_r).

    ``epsilon`` is the contraction margin of J (see
    :func:`spectral_epsilon`); values outside (0, 1) raise
    :class:`BoundInapplicable`.  Binomials are evaluated in floating
    point; overflow saturates to inf.
    """
    if not (0.0 < epsilon < 1.0):
        raise BoundInapplicable(f"need contraction margin in (0, 1), got {epsilon}")
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    if len(noise.traces) < k:
        raise ValueError(f"need traces through k-1={k - 1}, have {len(noise.traces)}")
    total = 0.0
    decay = 1.0 - epsilon
    for r in range(k):
        try:
            binom = float(math.comb(k, r))
        except OverflowError:
            return math.inf
        term = binom * decay ** (2 * (k - r)) * noise.traces[r]
        total += term
        if total > 1e300:
            return math.inf
    return total


@dataclass(frozen=True)
class StabilityReport:
    """Threshold summary for one ensemble/configuration."""

    lambda_max_d: float
    sigma: float
    thr_div: Optional[float]
    thr_conv_statement: Optional[float]
    thr_conv_proof: Optional[float]
    classification: Classification

    _FIELDS = (
        "lambda_max_D",
        "sigma",
        "thr_div",
        "thr_conv_statement",
        "thr_conv_proof",
        "classification",
    )

    def to_text(self) -> str:
        """key=value lines, one per field; absent thresholds are empty."""
        values = {
            "lambda_max_D": self.lambda_max_d,
            "sigma": self.sigma,
            "thr_div": self.thr_div,
            "thr_conv_statement": self.thr_conv_statement,
            "thr_conv_proof": self.thr_conv_proof,
            "classification": self.classification.value,
        }
        lines = []
        for key in self._FIELDS:
            val = values[key]
            if val is None:
                lines.append(f"{key}=")
            elif isinstance(val, str):
                lines.append(f"{key}={val}")
            else:
                lines.append(f"{key}={val:.12g}")
        return "\n".join(lines) + "\n"

    @staticmethod
    def from_text(text: str) -> "StabilityReport":
        data = {}
        for line in text.splitlines():
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            key, _, value = line.partition("=")
            data[key.strip()] = value.strip()
        def num(key):
            return float(data[key]) if data.get(key) else None
        return StabilityReport(
            lambda_max_d=float(data["lambda_max_D"]),
            sigma=float(data["sigma"]),
            thr_div=num("thr_div"),
            thr_conv_statement=num("thr_conv_statement"),
            thr_conv_proof=num("thr_conv_proof"),
            classification=Classification(data["classification"]),
        )


def build_report(
    ensemble: HessianEnsemble,
    config: UnlearnConfig,
    form: str = "statement",
) -> StabilityReport:
    """Coherence, thresholds, and classification for one ensemble."""
    from .coherence import mix_coherence  # local import to avoid cycle confusion

    result = mix_coherence(ensemble, config)
    sigma = result.sigma
    lam_d = result.lambda_max_d
    try:
        thr_div = divergence_threshold(config, sigma)
        thr_stmt = convergence_threshold(config, sigma, "statement")
        thr_proof = convergence_threshold(config, sigma, "proof")
        verdict = classify(lam_d, config, sigma, form)
    except UndefinedThreshold:
        thr_div = thr_stmt = thr_proof = None
        verdict = Classification.INDETERMINATE
    return StabilityReport(lam_d, sigma, thr_div, thr_stmt, thr_proof, verdict)
