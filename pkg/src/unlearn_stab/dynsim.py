"""Monte-Carlo simulation of the linearized unlearning dynamics.

Iterates w <- w - eta [(1-alpha)/B sum_{retain batch} H_i w
                       - alpha/B sum_{forget batch} H_i w]
with fresh Bernoulli batches (inclusion probability B/n per set) at
every step, detects divergence by the norm ratio against the start
point, and drives the phase-boundary sweep over the aligned-block
construction grid.

Determinism contract: every cell and repeat derives its own 64-bit seed
from the master seed via a SplitMix64 mix, so results are independent
of scheduling and worker count; identical inputs give identical CSV
bytes within one build.
"""

from __future__ import annotations

import dataclasses
import enum
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from . import stability
from .coherence import HessianEnsemble, UnlearnConfig, mix_coherence
from .errors import InvalidBatch, ShapeError, UndefinedThreshold
from .matker import RankOneFactor, as_dense
from .synthetic import QConstructionSpec, build_q_construction

_MASK64 = (1 << 64) - 1
_GOLDEN = 0x9E3779B97F4A7C15

DEFAULT_DIVERGENCE_RATIO = 1000.0

SWEEP_CSV_HEADER = (
    "q,batch,sigma,lambda_max_D,thr_div,thr_conv_statement,thr_conv_proof,"
    "n_repeats,n_diverged,outcome"
)


def splitmix64(state: int) -> int:
    """One SplitMix64 step (advance by the golden-ratio increment, then
    the standard 30/27/31 xor-multiply finalizer), all mod 2^64."""
    z = (state + _GOLDEN) & _MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return z ^ (z >> 31)


def derive_seed(master_seed: int, ordinal: int) -> int:
    """Child seed = SplitMix64(master_seed XOR ordinal * 0x9E3779B97F4A7C15)."""
    mixed = (int(master_seed) ^ ((int(ordinal) * _GOLDEN) & _MASK64)) & _MASK64
    return splitmix64(mixed)


def bernoulli_mask(n: int, batch: int, rng: np.random.Generator) -> np.ndarray:
    """Boolean inclusion mask: each of n samples enters independently
    with probability batch / n (expected count batch)."""
    if batch < 1 or batch > n:
        raise InvalidBatch(f"need 1 <= batch <= n, got batch={batch}, n={n}")
    return rng.random(n) < batch / n


class _EnsembleOps:
    """Precomputed apply-paths for one ensemble (rank-one or dense)."""

    def __init__(self, ensemble: HessianEnsemble):
        self.dim = ensemble.dim
        self.n_retain = ensemble.n_retain
        self.n_forget = ensemble.n_forget
        self.rank_one = ensemble.is_rank_one
        if self.rank_one:
            self.vr = np.stack([h.vector for h in ensemble.retain])
            self.wr = np.array([h.weight for h in ensemble.retain])
            if self.n_forget:
                self.vf = np.stack([h.vector for h in ensemble.forget])
                self.wf = np.array([h.weight for h in ensemble.forget])
        else:
            self.hr = np.stack([as_dense(h).a for h in ensemble.retain])
            if self.n_forget:
                self.hf = np.stack([as_dense(h).a for h in ensemble.forget])

    def masked_sum(self, which: str, w: np.ndarray, mask: np.ndarray) -> np.ndarray:
        """sum over masked members of H_i w; w is (d,) or (T, d) with a
        matching (n,) or (T, n) mask."""
        if self.rank_one:
            vecs = self.vr if which == "retain" else self.vf
            weights = self.wr if which == "retain" else self.wf
            proj = w @ vecs.T  # (..., n)
            return (proj * weights * mask) @ vecs
        stack = self.hr if which == "retain" else self.hf
        if w.ndim == 1:
            return np.einsum("n,nij,j->i", mask.astype(float), stack, w)
        return np.einsum("tn,nij,tj->ti", mask.astype(float), stack, w)


def unlearn_step(
    w: np.ndarray,
    ensemble: HessianEnsemble,
    masks: tuple[np.ndarray, np.ndarray],
    config: UnlearnConfig,
    ops: Optional[_EnsembleOps] = None,
) -> np.ndarray:
    """One linearized update with the given (retain, forget) masks."""
    w = np.asarray(w, dtype=float)
    if w.shape[-1] != ensemble.dim:
        raise ShapeError(f"w has dim {w.shape[-1]}, ensemble dim {ensemble.dim}")
    if ops is None:
        ops = _EnsembleOps(ensemble)
    retain_mask, forget_mask = masks
    scale = config.eta / config.batch
    delta = (1.0 - config.alpha) * ops.masked_sum("retain", w, retain_mask)
    if ensemble.n_forget:
        delta = delta - config.alpha * ops.masked_sum("forget", w, forget_mask)
    return w - scale * delta


@dataclass(frozen=True)
class Trajectory:
    """Norm history of one simulated run; ``norms`` has steps+1 entries
    (early exits are padded with the last recorded value, overflow pads
    with inf so the ratio invariant still holds)."""

    norms: tuple
    diverged: bool
    seed: int


def run_trajectory(
    ensemble: HessianEnsemble,
    config: UnlearnConfig,
    steps: int,
    seed: int,
    divergence_ratio: float = DEFAULT_DIVERGENCE_RATIO,
) -> Trajectory:
    """Simulate from an isotropic standard-normal start point.

    Diverged means ||w_k|| / ||w_0|| reached ``divergence_ratio`` at any
    step (the loop exits early) or the norm overflowed to non-finite.
    """
    if steps < 1:
        raise ValueError(f"steps must be >= 1, got {steps}")
    rng = np.random.default_rng(seed)
    ops = _EnsembleOps(ensemble)
    w = rng.standard_normal(ensemble.dim)
    norm0 = float(np.linalg.norm(w))
    norms = [norm0]
    diverged = False
    for _ in range(steps):
        retain_mask = bernoulli_mask(ensemble.n_retain, config.batch, rng)
        if ensemble.n_forget:
            forget_mask = bernoulli_mask(ensemble.n_forget, config.batch, rng)
        else:
            forget_mask = np.zeros(0, dtype=bool)
        w = unlearn_step(w, ensemble, (retain_mask, forget_mask), config, ops)
        norm = float(np.linalg.norm(w))
        if not math.isfinite(norm):
            norms.append(math.inf)
            diverged = True
            break
        norms.append(norm)
        if norm / norm0 >= divergence_ratio:
            diverged = True
            break
    pad = norms[-1]
    while len(norms) < steps + 1:
        norms.append(pad)
    return Trajectory(tuple(norms), diverged, int(seed))


def simulate_second_moment(
    ensemble: HessianEnsemble,
    config: UnlearnConfig,
    steps: int,
    n_traj: int,
    seed: int,
    record_at: Optional[Sequence[int]] = None,
) -> dict:
    """Monte-Carlo estimate of E||w_k||^2 over ``n_traj`` independent
    trajectories (no early exit), for cross-checking the exact
    recursion.  Returns {k: (mean, stderr)} at the requested steps.
    """
    if record_at is None:
        record_at = range(steps + 1)
    wanted = sorted(set(int(k) for k in record_at))
    if wanted and (wanted[0] < 0 or wanted[-1] > steps):
        raise ValueError(f"record_at must lie in [0, {steps}]")
    rng = np.random.default_rng(seed)
    ops = _EnsembleOps(ensemble)
    w = rng.standard_normal((n_traj, ensemble.dim))
    out = {}

    def record(k):
        sq = np.einsum("ti,ti->t", w, w)
        out[k] = (float(sq.mean()), float(sq.std(ddof=1) / math.sqrt(n_traj)))

    if 0 in wanted:
        record(0)
    p_r = config.batch / ensemble.n_retain
    p_f = config.batch / ensemble.n_forget if ensemble.n_forget else 0.0
    for k in range(1, steps + 1):
        retain_mask = rng.random((n_traj, ensemble.n_retain)) < p_r
        if ensemble.n_forget:
            forget_mask = rng.random((n_traj, ensemble.n_forget)) < p_f
        else:
            forget_mask = np.zeros((n_traj, 0), dtype=bool)
        w = unlearn_step(w, ensemble, (retain_mask, forget_mask), config, ops)
        if k in wanted:
            record(k)
    return out


class Outcome(enum.Enum):
    DIVERGE = "DIVERGE"
    CONVERGE = "CONVERGE"


def outcome_from_count(n_diverged: int, repeats: int) -> Outcome:
    """Majority vote; an exact tie counts as DIVERGE (conservative
    toward detecting instability)."""
    return Outcome.DIVERGE if 2 * n_diverged >= repeats else Outcome.CONVERGE


@dataclass(frozen=True)
class MajorityResult:
    n_diverged: int
    repeats: int
    outcome: Outcome


def majority_outcome(
    ensemble: HessianEnsemble,
    config: UnlearnConfig,
    steps: int,
    repeats: int,
    seed: int,
    divergence_ratio: float = DEFAULT_DIVERGENCE_RATIO,
) -> MajorityResult:
    """Run ``repeats`` independent trajectories (seeds derived from
    ``seed``) and vote."""
    if repeats < 1:
        raise ValueError(f"repeats must be >= 1, got {repeats}")
    n_div = 0
    for i in range(repeats):
        traj = run_trajectory(
            ensemble, config, steps, derive_seed(seed, i), divergence_ratio
        )
        n_div += int(traj.diverged)
    return MajorityResult(n_div, repeats, outcome_from_count(n_div, repeats))


@dataclass(frozen=True)
class SweepCell:
    q: int
    batch: int
    sigma: float
    lambda_max_d: float
    thr_div: Optional[float]
    thr_conv_statement: Optional[float]
    thr_conv_proof: Optional[float]
    n_repeats: int
    n_diverged: int
    outcome: Outcome


def _compute_cell(args) -> SweepCell:
    (q, batch, template, steps, repeats, cell_seed, divergence_ratio) = args
    config = dataclasses.replace(template, batch=batch)
    ensemble = build_q_construction(QConstructionSpec(n=config.n_retain, q=q))
    result = mix_coherence(ensemble, config)
    sigma, lam_d = result.sigma, result.lambda_max_d
    try:
        thr_div = stability.divergence_threshold(config, sigma)
        thr_stmt = stability.convergence_threshold(config, sigma, "statement")
        thr_proof = stability.convergence_threshold(config, sigma, "proof")
    except UndefinedThreshold:
        thr_div = thr_stmt = thr_proof = None
    vote = majority_outcome(ensemble, config, steps, repeats, cell_seed, divergence_ratio)
    return SweepCell(
        q, batch, sigma, lam_d, thr_div, thr_stmt, thr_proof,
        vote.repeats, vote.n_diverged, vote.outcome,
    )


def boundary_sweep(
    q_list: Sequence[int],
    b_list: Sequence[int],
    template: UnlearnConfig,
    steps: int,
    repeats: int,
    master_seed: int,
    divergence_ratio: float = DEFAULT_DIVERGENCE_RATIO,
    workers: int = 1,
) -> list[SweepCell]:
    """Phase-boundary sweep over the (Q, batch) grid.

    Cells are enumerated row-major (Q outer, batch inner); cell ordinal
    i gets seed ``derive_seed(master_seed, i)``, so the output is
    independent of worker count and scheduling.  The coherence measure
    is recomputed per cell (it depends on the batch through the
    normalized coefficients in general).  Cells whose thresholds are
    undefined (batch not below both set sizes) carry blank threshold
    fields but are still simulated.
    """
    if template.n_retain != template.n_forget:
        raise ValueError("the sweep construction requires n_retain == n_forget")
    tasks = []
    ordinal = 0
    for q in q_list:
        for batch in b_list:
            tasks.append(
                (int(q), int(batch), template, steps, repeats,
                 derive_seed(master_seed, ordinal), divergence_ratio)
            )
            ordinal += 1
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(_compute_cell, tasks))
    return [_compute_cell(t) for t in tasks]


def _fmt(value) -> str:
    if value is None:
        return ""
    if value != value or value in (math.inf, -math.inf):  # nan/inf
        return "inf" if value == math.inf else ("-inf" if value == -math.inf else "nan")
    return f"{value:.12g}"


def format_sweep_csv(cells: Sequence[SweepCell], comments: Sequence[str] = ()) -> str:
    """Render cells as the documented CSV (12 significant digits);
    ``comments`` become #-prefixed header lines."""
    lines = [f"# {c}" for c in comments]
    lines.append(SWEEP_CSV_HEADER)
    for c in cells:
        lines.append(
            ",".join(
                [
                    str(c.q),
                    str(c.batch),
                    _fmt(c.sigma),
                    _fmt(c.lambda_max_d),
                    _fmt(c.thr_div),
                    _fmt(c.thr_conv_statement),
                    _fmt(c.thr_conv_proof),
                    str(c.n_repeats),
                    str(c.n_diverged),
                    c.outcome.value,
                ]
            )
        )
    return "\n".join(lines) + "\n"
