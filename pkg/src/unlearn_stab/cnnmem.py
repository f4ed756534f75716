"""Memorization-vs-forgetting testbed.

A two-class signal-plus-noise dataset (each example is a pair of
patches, one carrying the label-signed signal vector and the other an
independent Gaussian noise draw) and a two-layer ReLU CNN scored by a
positive minus a negative filter bank, trained with logistic loss.

Per-sample Hessians of the trained model are exact rank-one outer
products (ReLU has no curvature away from kinks), so coherence over
them runs through the rank-one fast path without forming any
(2 m d)^2 matrix.  The grid experiments map train loss / test error /
post-unlearning forget loss over signal strength and dimension, and the
coherence-ratio curve tracks lambda_max(S) / max_pair lambda(D_rf)
against the signal-to-noise ratio.

Conventions (they only matter at measure-zero edge cases, fixed for
reproducibility): ReLU'(0) = 0, and a test score of exactly 0 counts as
an error.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Optional, Sequence

import numpy as np

from .coherence import HessianEnsemble, UnlearnConfig, mix_coherence
from .dynsim import bernoulli_mask, derive_seed
from .errors import DegenerateEnsemble, ShapeError, TrainingDiverged
from .matker import RankOneFactor, SymMatrix

HEATMAP_CSV_HEADER = "signal_norm,d,snr,train_loss,test_error,forget_loss,n_failed"
CURVE_CSV_HEADER = "snr,lambda_max_S,max_pair_lambda,ratio"

TRAIN_LOSS_TARGET = 0.1


@dataclass(frozen=True)
class SignalNoiseDataset:
    """Patch-pair dataset: exactly one patch of each sample equals
    y * mu, the other is the stored Gaussian draw."""

    x1: np.ndarray          # (n, d)
    x2: np.ndarray          # (n, d)
    y: np.ndarray           # (n,) entries +-1
    signal_slot: np.ndarray  # (n,) entries 1 or 2
    mu: np.ndarray          # (d,)
    noise: np.ndarray       # (n, d) the xi draws
    noise_sigma: float

    @property
    def n(self) -> int:
        return self.x1.shape[0]

    @property
    def d(self) -> int:
        return self.x1.shape[1]

    @property
    def snr(self) -> float:
        """||mu|| / (noise_sigma * sqrt(d))."""
        return float(np.linalg.norm(self.mu) / (self.noise_sigma * math.sqrt(self.d)))


def generate_dataset(
    n: int, d: int, mu_norm: float, noise_sigma: float, rng: np.random.Generator
) -> SignalNoiseDataset:
    """Draw n samples: Rademacher labels, N(0, sigma^2 I_d) noise, the
    signal mu = mu_norm * e_0 placed in patch 1 or 2 with equal
    probability."""
    if n < 2 or d < 1:
        raise ValueError(f"need n >= 2 and d >= 1, got n={n}, d={d}")
    if noise_sigma <= 0:
        raise ValueError(f"noise_sigma must be positive, got {noise_sigma}")
    y = rng.integers(0, 2, size=n) * 2 - 1
    xi = rng.normal(0.0, noise_sigma, size=(n, d))
    slot = rng.integers(1, 3, size=n)
    mu = np.zeros(d)
    mu[0] = mu_norm
    signal = y[:, None] * mu
    x1 = np.where((slot == 1)[:, None], signal, xi)
    x2 = np.where((slot == 2)[:, None], signal, xi)
    return SignalNoiseDataset(x1, x2, y.astype(float), slot, mu, xi, float(noise_sigma))


@dataclass(frozen=True)
class CnnModel:
    """Two filter banks of shape (m, d): positive-class and
    negative-class weights."""

    w_pos: np.ndarray
    w_neg: np.ndarray

    def __post_init__(self):
        if self.w_pos.shape != self.w_neg.shape or self.w_pos.ndim != 2:
            raise ShapeError(
                f"filter banks must share shape (m, d), got "
                f"{self.w_pos.shape} and {self.w_neg.shape}"
            )

    @property
    def m(self) -> int:
        return self.w_pos.shape[0]

    @property
    def d(self) -> int:
        return self.w_pos.shape[1]

    @property
    def n_params(self) -> int:
        return 2 * self.m * self.d


def forward(model: CnnModel, x1: np.ndarray, x2: np.ndarray):
    """Score (1/m) sum_r [relu<w+_r, x1> + relu<w+_r, x2>] minus the
    same sum over the negative bank.  Accepts a single (d,) pair or a
    batch (n, d)."""
    x1 = np.asarray(x1, dtype=float)
    x2 = np.asarray(x2, dtype=float)
    if x1.shape != x2.shape or x1.shape[-1] != model.d:
        raise ShapeError(f"patch shapes {x1.shape}/{x2.shape} vs model d={model.d}")
    pos = np.maximum(x1 @ model.w_pos.T, 0.0).sum(-1) + np.maximum(
        x2 @ model.w_pos.T, 0.0
    ).sum(-1)
    neg = np.maximum(x1 @ model.w_neg.T, 0.0).sum(-1) + np.maximum(
        x2 @ model.w_neg.T, 0.0
    ).sum(-1)
    out = (pos - neg) / model.m
    return float(out) if out.ndim == 0 else out


def _grad_arrays(model, x1, x2, y, reduce_mean):
    """Loss and gradients of the logistic loss over the given samples.

    reduce_mean=True gives the mean loss/gradient (training); False
    gives the sum of per-sample gradients (unlearning steps).
    """
    m = model.m
    p1p, p2p = x1 @ model.w_pos.T, x2 @ model.w_pos.T
    p1n, p2n = x1 @ model.w_neg.T, x2 @ model.w_neg.T
    f = (
        np.maximum(p1p, 0.0).sum(1) + np.maximum(p2p, 0.0).sum(1)
        - np.maximum(p1n, 0.0).sum(1) - np.maximum(p2n, 0.0).sum(1)
    ) / m
    z = y * f
    losses = np.logaddexp(0.0, -z)
    # d loss_i / d f_i = -y_i * sigmoid(-z_i)
    g = -y / (1.0 + np.exp(z))
    gp = ((g[:, None] * (p1p > 0)).T @ x1 + (g[:, None] * (p2p > 0)).T @ x2) / m
    gn = -((g[:, None] * (p1n > 0)).T @ x1 + (g[:, None] * (p2n > 0)).T @ x2) / m
    if reduce_mean:
        n = len(y)
        return float(losses.mean()), gp / n, gn / n, f
    return float(losses.sum()), gp, gn, f


def per_sample_losses(model: CnnModel, dataset: SignalNoiseDataset, idx=None) -> np.ndarray:
    if idx is None:
        x1, x2, y = dataset.x1, dataset.x2, dataset.y
    else:
        x1, x2, y = dataset.x1[idx], dataset.x2[idx], dataset.y[idx]
    f = forward(model, x1, x2)
    return np.logaddexp(0.0, -(y * f))


def loss_and_grad(model: CnnModel, dataset: SignalNoiseDataset):
    """Mean logistic loss and its gradient (same shapes as the model)."""
    loss, gp, gn, _ = _grad_arrays(model, dataset.x1, dataset.x2, dataset.y, True)
    return loss, CnnModel(gp, gn)


@dataclass(frozen=True)
class TrainResult:
    model: CnnModel
    final_loss: float
    loss_warning: bool  # final loss above the 0.1 target


def train_full_batch(
    dataset: SignalNoiseDataset,
    m: int,
    lr: float,
    epochs: int,
    init_scale: float,
    rng: np.random.Generator,
) -> TrainResult:
    """Plain full-batch gradient descent from N(0, init_scale^2) init."""
    if lr < 0:
        raise ValueError(f"lr must be >= 0, got {lr}")
    w_pos = rng.normal(0.0, init_scale, size=(m, dataset.d))
    w_neg = rng.normal(0.0, init_scale, size=(m, dataset.d))
    for _ in range(epochs):
        loss, gp, gn, _ = _grad_arrays(
            CnnModel(w_pos, w_neg), dataset.x1, dataset.x2, dataset.y, True
        )
        if not math.isfinite(loss):
            raise TrainingDiverged(f"training loss became {loss}")
        w_pos = w_pos - lr * gp
        w_neg = w_neg - lr * gn
    model = CnnModel(w_pos, w_neg)
    final_loss, _ = loss_and_grad(model, dataset)
    if not math.isfinite(final_loss):
        raise TrainingDiverged(f"final training loss is {final_loss}")
    return TrainResult(model, final_loss, final_loss > TRAIN_LOSS_TARGET)


def test_error(
    model: CnnModel,
    n_test: int,
    d: int,
    mu_norm: float,
    noise_sigma: float,
    rng: np.random.Generator,
) -> float:
    """Misclassification rate on fresh draws; sign(0) counts as an error."""
    data = generate_dataset(n_test, d, mu_norm, noise_sigma, rng)
    f = forward(model, data.x1, data.x2)
    correct = ((f > 0) & (data.y > 0)) | ((f < 0) & (data.y < 0))
    return float(1.0 - correct.mean())


@dataclass(frozen=True)
class SampleHessianFactor:
    """Rank-one per-sample Hessian ell2 * v v^T.

    ``vector`` stacks the per-filter blocks
    (j/m)(1{<w_{j,r}, y mu> > 0} mu + 1{<w_{j,r}, xi> > 0} y xi), the m
    positive-bank blocks (j=+1) first, then the m negative-bank blocks
    (j=-1); ``ell2`` = s(1-s) with s = sigmoid(-y f), the logistic-loss
    curvature at the sample.
    """

    vector: np.ndarray  # (2 m d,)
    ell2: float

    def to_rank_one(self) -> RankOneFactor:
        return RankOneFactor(self.vector, self.ell2)

    def dense(self) -> SymMatrix:
        return self.to_rank_one().dense()


def sample_hessian_factors(
    model: CnnModel, dataset: SignalNoiseDataset
) -> list[SampleHessianFactor]:
    """Rank-one Hessian factors for every sample at the current weights."""
    m, d, n = model.m, model.d, dataset.n
    f = forward(model, dataset.x1, dataset.x2)
    s = 1.0 / (1.0 + np.exp(dataset.y * f))  # sigmoid(-y f)
    ell2 = s * (1.0 - s)
    mu_proj_pos = model.w_pos @ dataset.mu  # (m,)
    mu_proj_neg = model.w_neg @ dataset.mu
    gate_sig_pos = np.outer(dataset.y, mu_proj_pos) > 0  # (n, m): <w, y mu> > 0
    gate_sig_neg = np.outer(dataset.y, mu_proj_neg) > 0
    gate_noi_pos = dataset.noise @ model.w_pos.T > 0  # (n, m): <w, xi> > 0
    gate_noi_neg = dataset.noise @ model.w_neg.T > 0
    y_xi = dataset.y[:, None] * dataset.noise  # (n, d)
    blocks_pos = (
        gate_sig_pos[:, :, None] * dataset.mu[None, None, :]
        + gate_noi_pos[:, :, None] * y_xi[:, None, :]
    ) / m
    blocks_neg = -(
        gate_sig_neg[:, :, None] * dataset.mu[None, None, :]
        + gate_noi_neg[:, :, None] * y_xi[:, None, :]
    ) / m
    stacked = np.concatenate(
        [blocks_pos.reshape(n, m * d), blocks_neg.reshape(n, m * d)], axis=1
    )
    return [SampleHessianFactor(stacked[i], float(ell2[i])) for i in range(n)]


def sample_hessian(
    model: CnnModel, dataset: SignalNoiseDataset, index: int
) -> SampleHessianFactor:
    """Rank-one Hessian factor of one sample."""
    return sample_hessian_factors(model, dataset)[index]


@dataclass(frozen=True)
class UnlearnTrace:
    """Mean forget-set loss per step (entry 0 is pre-update); truncated
    with ``diverged`` set if the loss goes non-finite."""

    forget_losses: tuple
    diverged: bool
    model: CnnModel


def unlearn_cnn(
    model: CnnModel,
    dataset: SignalNoiseDataset,
    retain_idx: Sequence[int],
    forget_idx: Sequence[int],
    batch: int,
    lr: float,
    alpha: float,
    steps: int,
    rng: np.random.Generator,
    sampling: str = "bernoulli",
) -> UnlearnTrace:
    """Minibatch ascent/descent unlearning on the true nonlinear loss.

    Per step each set draws its own batch: independently included with
    probability batch/n_set under ``sampling="bernoulli"`` (an empty
    draw contributes zero; the 1/batch normalization stays fixed), or a
    uniform size-``batch`` subset without replacement under
    ``sampling="fixed"``.  The update is
    W <- W - lr [(1-alpha)/batch sum_retain grad_i
                 - alpha/batch sum_forget grad_i].
    """
    retain_idx = np.asarray(retain_idx, dtype=int)
    forget_idx = np.asarray(forget_idx, dtype=int)
    if np.intersect1d(retain_idx, forget_idx).size:
        raise ValueError("retain and forget index sets must be disjoint")
    if sampling not in ("bernoulli", "fixed"):
        raise ValueError(f"unknown sampling scheme {sampling!r}")
    w_pos = model.w_pos.copy()
    w_neg = model.w_neg.copy()
    current = CnnModel(w_pos, w_neg)
    losses = [float(per_sample_losses(current, dataset, forget_idx).mean())]
    diverged = False
    for _ in range(steps):
        if sampling == "bernoulli":
            sel_r = retain_idx[bernoulli_mask(len(retain_idx), batch, rng)]
            sel_f = forget_idx[bernoulli_mask(len(forget_idx), batch, rng)]
        else:
            sel_r = rng.choice(retain_idx, size=batch, replace=False)
            sel_f = rng.choice(forget_idx, size=batch, replace=False)
        gp = np.zeros_like(w_pos)
        gn = np.zeros_like(w_neg)
        if sel_r.size:
            _, gpr, gnr, _ = _grad_arrays(
                current, dataset.x1[sel_r], dataset.x2[sel_r], dataset.y[sel_r], False
            )
            gp += (1.0 - alpha) * gpr
            gn += (1.0 - alpha) * gnr
        if sel_f.size:
            _, gpf, gnf, _ = _grad_arrays(
                current, dataset.x1[sel_f], dataset.x2[sel_f], dataset.y[sel_f], False
            )
            gp -= alpha * gpf
            gn -= alpha * gnf
        w_pos = w_pos - (lr / batch) * gp
        w_neg = w_neg - (lr / batch) * gn
        current = CnnModel(w_pos, w_neg)
        loss = float(per_sample_losses(current, dataset, forget_idx).mean())
        if not math.isfinite(loss) or not np.all(np.isfinite(w_pos)):
            diverged = True
            break
        losses.append(loss)
    return UnlearnTrace(tuple(losses), diverged, current)


# -- grid experiments -------------------------------------------------------

#: Defaults matching the reference experiment: 50 samples, unit noise,
#: 10 filters, full-batch lr 0.1 for 100 epochs, 1000 test draws, an
#: even retain/forget split, batch-5 unlearning at lr 0.1, alpha 0.3,
#: 90 steps.
HEATMAP_DEFAULTS = dict(
    n=50,
    noise_sigma=1.0,
    m=10,
    train_lr=0.1,
    epochs=100,
    init_scale=0.01,
    n_test=1000,
    unlearn_batch=5,
    unlearn_lr=0.1,
    alpha=0.3,
    unlearn_steps=90,
)

DEFAULT_SIGNAL_GRID = (0.5, 1.0, 1.5, 2.0, 2.5, 3.0, 3.5, 4.0, 4.5, 5.0)
DEFAULT_D_GRID = (100, 300, 500, 700, 900, 1100)


@dataclass(frozen=True)
class HeatmapCell:
    signal_norm: float
    d: int
    snr: float
    train_loss: float
    test_error: float
    forget_loss: float
    n_failed: int


def snr_heatmap(
    signal_grid: Sequence[float] = DEFAULT_SIGNAL_GRID,
    d_grid: Sequence[int] = DEFAULT_D_GRID,
    repeats: int = 20,
    master_seed: int = 0,
    **overrides,
) -> list[HeatmapCell]:
    """Train / evaluate / unlearn over a (signal strength, dimension) grid.

    Cells are enumerated row-major (signal outer, d inner) and repeat j
    of cell i uses seed ``derive_seed(master_seed, i * repeats + j)``;
    the first half of each dataset is the retain set, the second half
    the forget set.  Repeats whose training (or unlearning) loss goes
    non-finite are excluded from the cell means and counted in
    ``n_failed``.
    """
    if repeats < 1:
        raise ValueError(f"repeats must be >= 1, got {repeats}")
    params = dict(HEATMAP_DEFAULTS)
    unknown = set(overrides) - set(params)
    if unknown:
        raise ValueError(f"unknown heatmap parameters: {sorted(unknown)}")
    params.update(overrides)
    n = params["n"]
    half = n // 2
    retain_idx = np.arange(half)
    forget_idx = np.arange(half, n)
    cells = []
    ordinal = 0
    for signal_norm in signal_grid:
        for d in d_grid:
            train_losses, test_errors, forget_losses = [], [], []
            n_failed = 0
            for rep in range(repeats):
                rng = np.random.default_rng(
                    derive_seed(master_seed, ordinal * repeats + rep)
                )
                data = generate_dataset(n, d, signal_norm, params["noise_sigma"], rng)
                try:
                    result = train_full_batch(
                        data, params["m"], params["train_lr"], params["epochs"],
                        params["init_scale"], rng,
                    )
                except TrainingDiverged:
                    n_failed += 1
                    continue
                err = test_error(
                    result.model, params["n_test"], d, signal_norm,
                    params["noise_sigma"], rng,
                )
                trace = unlearn_cnn(
                    result.model, data, retain_idx, forget_idx,
                    params["unlearn_batch"], params["unlearn_lr"], params["alpha"],
                    params["unlearn_steps"], rng,
                )
                if trace.diverged:
                    n_failed += 1
                    continue
                train_losses.append(result.final_loss)
                test_errors.append(err)
                forget_losses.append(trace.forget_losses[-1])
            def mean(vals):
                return float(np.mean(vals)) if vals else math.nan
            snr = signal_norm / (params["noise_sigma"] * math.sqrt(d))
            cells.append(
                HeatmapCell(
                    float(signal_norm), int(d), snr,
                    mean(train_losses), mean(test_errors), mean(forget_losses),
                    n_failed,
                )
            )
            ordinal += 1
    return cells


def format_heatmap_csv(cells: Sequence[HeatmapCell], comments: Sequence[str] = ()) -> str:
    lines = [f"# {c}" for c in comments]
    lines.append(HEATMAP_CSV_HEADER)
    for c in cells:
        lines.append(
            ",".join(
                [
                    f"{c.signal_norm:.12g}",
                    str(c.d),
                    f"{c.snr:.12g}",
                    f"{c.train_loss:.12g}",
                    f"{c.test_error:.12g}",
                    f"{c.forget_loss:.12g}",
                    str(c.n_failed),
                ]
            )
        )
    return "\n".join(lines) + "\n"


@dataclass(frozen=True)
class RatioPoint:
    snr: float
    lambda_max_s: float
    max_pair_lambda: float
    ratio: float
    n_failed: int


CURVE_DEFAULTS = dict(
    n_r=10,
    n_f=10,
    noise_sigma=1.0,
    m=10,
    train_lr=0.1,
    epochs=100,
    init_scale=0.01,
    eta=0.1,
    alpha=0.3,
    batch=5,
)


def coherence_ratio_curve(
    snr_list: Sequence[float],
    d: int,
    repeats: int,
    master_seed: int = 0,
    **overrides,
) -> list[RatioPoint]:
    """lambda_max(S) / max_pair lambda_max(D_rf) of trained models as a
    function of the data SNR at fixed dimension.

    Per repeat: draw and train a fresh dataset of n_r + n_f samples
    (signal norm = snr * noise_sigma * sqrt(d)), take the per-sample
    rank-one Hessian factors (first n_r retain, rest forget), and run
    the mixed coherence on them.  Repeats where every curvature weight
    underflows to zero (fully saturated model) are skipped and counted
    in ``n_failed``; point values are means over the kept repeats.
    """
    if repeats < 1:
        raise ValueError(f"repeats must be >= 1, got {repeats}")
    params = dict(CURVE_DEFAULTS)
    unknown = set(overrides) - set(params)
    if unknown:
        raise ValueError(f"unknown curve parameters: {sorted(unknown)}")
    params.update(overrides)
    n_r, n_f = params["n_r"], params["n_f"]
    config = UnlearnConfig(
        eta=params["eta"], alpha=params["alpha"], batch=params["batch"],
        n_retain=n_r, n_forget=n_f,
    )
    points = []
    for ordinal, snr in enumerate(snr_list):
        mu_norm = snr * params["noise_sigma"] * math.sqrt(d)
        lam_s_vals, max_pair_vals, ratio_vals = [], [], []
        n_failed = 0
        for rep in range(repeats):
            rng = np.random.default_rng(
                derive_seed(master_seed, ordinal * repeats + rep)
            )
            data = generate_dataset(n_r + n_f, d, mu_norm, params["noise_sigma"], rng)
            try:
                result = train_full_batch(
                    data, params["m"], params["train_lr"], params["epochs"],
                    params["init_scale"], rng,
                )
            except TrainingDiverged:
                n_failed += 1
                continue
            factors = [
                f.to_rank_one() for f in sample_hessian_factors(result.model, data)
            ]
            ensemble = HessianEnsemble(
                tuple(factors[:n_r]), tuple(factors[n_r:]), factors[0].dim
            )
            try:
                coh = mix_coherence(ensemble, config, method="rank1")
            except DegenerateEnsemble:
                n_failed += 1
                continue
            lam_s_vals.append(coh.sigma * coh.max_pair_lambda)
            max_pair_vals.append(coh.max_pair_lambda)
            ratio_vals.append(coh.sigma)
        def mean(vals):
            return float(np.mean(vals)) if vals else math.nan
        points.append(
            RatioPoint(
                float(snr), mean(lam_s_vals), mean(max_pair_vals),
                mean(ratio_vals), n_failed,
            )
        )
    return points


def format_curve_csv(points: Sequence[RatioPoint], comments: Sequence[str] = ()) -> str:
    lines = [f"# {c}" for c in comments]
    lines.append(CURVE_CSV_HEADER)
    for p in points:
        lines.append(
            ",".join(
                [
                    f"{p.snr:.12g}",
                    f"{p.lambda_max_s:.12g}",
                    f"{p.max_pair_lambda:.12g}",
                    f"{p.ratio:.12g}",
                ]
            )
        )
    return "\n".join(lines) + "\n"
