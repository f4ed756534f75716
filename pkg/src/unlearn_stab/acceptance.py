"""Acceptance criteria for the whole package.

Each criterion is a method on :class:`AcceptanceSuite` returning a
:class:`CriterionResult`; the CLI ``verify`` command prints one
PASS/FAIL line per criterion and the pytest acceptance module asserts
them individually.  ``quick`` mode shrinks the two grid experiments
(one learning rate, fewer repeats, reduced determinism grids) to fit a
five-minute budget; full mode runs everything at the stated scale.
"""

from __future__ import annotations

import dataclasses
import math
import time
from dataclasses import dataclass

import numpy as np
from scipy.stats import spearmanr

from . import cnnmem, dynsim, stability
from .coherence import HessianEnsemble, UnlearnConfig, mix_coherence, raw_coefficients
from .dynsim import Outcome, boundary_sweep, derive_seed, format_sweep_csv
from .errors import BoundInapplicable
from .matker import RankOneFactor
from .stability import (
    JOperator,
    exact_second_moment,
    noise_recurrence,
    spectral_epsilon,
    upper_bound_trace,
)
from .synthetic import MatchingSpec, build_matching_construction, random_rank_one_ensemble

DEFAULT_MASTER_SEED = 42

SWEEP_Q_LIST = (1, 2, 5, 10, 25, 50)
SWEEP_B_LIST = (2, 5, 10, 20, 40)
SWEEP_ETAS = (0.5, 0.8)
SWEEP_STEPS = 1000
SWEEP_REPEATS = 10

OVERLAP_SIGNALS = (0.5, 1.0, 2.0, 3.0, 4.0, 5.0)
OVERLAP_DS = (100, 500, 1100)
OVERLAP_REPEATS = 20

TREND_SNRS = (0.05, 0.15, 0.3, 0.5)
TREND_D = 100
TREND_REPEATS = 20


@dataclass(frozen=True)
class CriterionResult:
    name: str
    passed: bool
    detail: str
    runtime_s: float


def _sweep_template(eta: float) -> UnlearnConfig:
    return UnlearnConfig(eta=eta, alpha=0.1, batch=2, n_retain=50, n_forget=50)


def check_boundary_bracketing(template: UnlearnConfig, cells) -> tuple[bool, str]:
    """The empirical converge/diverge transition must sit inside the
    theory band for every batch size >= 10: no converging cell below
    the guaranteed-divergence sigma curve, and no diverging cell above
    the convergence-bound sigma curve (either bound variant counts).
    """
    problems = []
    for cell in cells:
        if cell.batch < 10:
            continue
        config = dataclasses.replace(template, batch=cell.batch)
        div_curve = stability.divergence_sigma_curve(config, cell.lambda_max_d)
        conv_curve = max(
            stability.convergence_sigma_curve(config, cell.lambda_max_d, "statement"),
            stability.convergence_sigma_curve(config, cell.lambda_max_d, "proof"),
        )
        if cell.outcome is Outcome.CONVERGE and cell.sigma < div_curve:
            problems.append(
                f"B={cell.batch} Q={cell.q}: converged at sigma={cell.sigma:.4g} "
                f"below divergence curve {div_curve:.4g}"
            )
        if cell.outcome is Outcome.DIVERGE and cell.sigma > conv_curve:
            problems.append(
                f"B={cell.batch} Q={cell.q}: diverged at sigma={cell.sigma:.4g} "
                f"above convergence curve {conv_curve:.4g}"
            )
    return (not problems, "; ".join(problems) if problems else "transition bracketed")


class AcceptanceSuite:
    def __init__(self, quick: bool = False, master_seed: int = DEFAULT_MASTER_SEED):
        self.quick = quick
        self.master_seed = master_seed
        self.artifacts: dict[str, str] = {}

    # -- helpers ------------------------------------------------------------

    def _run_sweep(self, eta: float, ordinal: int):
        template = _sweep_template(eta)
        cells = boundary_sweep(
            SWEEP_Q_LIST,
            SWEEP_B_LIST,
            template,
            steps=SWEEP_STEPS,
            repeats=SWEEP_REPEATS,
            master_seed=derive_seed(self.master_seed, ordinal),
        )
        csv_text = format_sweep_csv(cells, comments=[f"eta={eta:.12g}"])
        return template, cells, csv_text

    def _run_overlap(self, repeats: int):
        cells = cnnmem.snr_heatmap(
            OVERLAP_SIGNALS,
            OVERLAP_DS,
            repeats=repeats,
            master_seed=derive_seed(self.master_seed, 100),
        )
        csv_text = cnnmem.format_heatmap_csv(cells, comments=[f"repeats={repeats}"])
        return cells, csv_text

    # -- criteria -----------------------------------------------------------

    def criterion_boundary_bracketing(self) -> CriterionResult:
        """Phase-boundary sweep: empirical transitions sit inside the
        theory band for batch sizes >= 10, at every learning rate."""
        t0 = time.perf_counter()
        etas = SWEEP_ETAS[:1] if self.quick else SWEEP_ETAS
        details = []
        ok = True
        for i, eta in enumerate(etas):
            template, cells, csv_text = self._run_sweep(eta, i)
            self.artifacts[f"sweep_csv_eta={eta}"] = csv_text
            good, detail = check_boundary_bracketing(template, cells)
            ok = ok and good
            details.append(f"eta={eta}: {detail}")
        return CriterionResult(
            "boundary_bracketing", ok, " | ".join(details), time.perf_counter() - t0
        )

    def criterion_second_moment_orderings(self) -> CriterionResult:
        """On 50 random small rank-one instances, the exact second
        moment is sandwiched: Tr(J^2k) + Tr(N_k) below it (1e-8
        relative slack) and the binomial trace bound above it whenever
        the contraction precondition holds."""
        t0 = time.perf_counter()
        rng = np.random.default_rng(derive_seed(self.master_seed, 200))
        failures = []
        n_upper = 0
        for trial in range(50):
            d = int(rng.integers(2, 6))
            contract_bias = trial % 2 == 0
            n_r = int(rng.integers(d, 7)) if contract_bias else int(rng.integers(1, 7))
            n_f = int(rng.integers(1, 7))
            ens = random_rank_one_ensemble(n_r, n_f, d, rng)
            alpha = 0.0 if contract_bias else float(rng.uniform(0.0, 0.3))
            batch = int(rng.integers(1, min(n_r, n_f) + 1))
            eta = float(rng.uniform(0.05, 0.5))
            config = UnlearnConfig(eta, alpha, batch, n_r, n_f)
            if raw_coefficients(config) == (0.0, 0.0):
                if batch == 1:
                    continue
                config = dataclasses.replace(config, batch=batch - 1)
                if raw_coefficients(config) == (0.0, 0.0):
                    continue
            k_max = int(rng.integers(1, 16))
            esm = exact_second_moment(ens, config, k_max)
            noise = noise_recurrence(ens, config, k_max)
            j_op = JOperator.from_ensemble(ens, config)
            j_evals = np.linalg.eigvalsh(j_op.matrix.a)
            for k in range(1, k_max + 1):
                lower = float(np.sum(j_evals ** (2 * k))) + noise.traces[k]
                if lower > esm[k] + 1e-8 * max(1.0, abs(esm[k])):
                    failures.append(f"trial {trial} k={k}: lower {lower} > exact {esm[k]}")
            try:
                eps = spectral_epsilon(j_op)
            except BoundInapplicable:
                continue
            n_upper += 1
            for k in range(1, k_max + 1):
                upper = upper_bound_trace(noise, eps, k)
                if esm[k] > upper + 1e-8 * max(1.0, abs(upper)):
                    failures.append(f"trial {trial} k={k}: exact {esm[k]} > upper {upper}")
        detail = (
            f"50 instances, {n_upper} with contraction margin; " + "; ".join(failures)
            if failures
            else f"50 instances ordered, {n_upper} also satisfied the upper bound"
        )
        return CriterionResult(
            "second_moment_orderings", not failures, detail, time.perf_counter() - t0
        )

    def criterion_matching_construction(self) -> CriterionResult:
        """The matching construction reproduces requested lambda_max(D)
        and sigma to 1e-9 relative, its normalized coherence block is
        exactly ones, and strict satisfaction of the proof-form bound
        yields 10/10 converging trajectories."""
        t0 = time.perf_counter()
        failures = []
        config = UnlearnConfig(eta=0.5, alpha=0.1, batch=10, n_retain=50, n_forget=50)
        cases = [(50.0, 1.5), (100.0, 0.75), (500.0, 2.0)]
        for sigma_target, lam_frac in cases:
            thr_proof = stability.convergence_threshold(config, sigma_target, "proof")
            lam_target = lam_frac * thr_proof
            spec = MatchingSpec(sigma_target, 50, 50, lam_target, config)
            ens = build_matching_construction(spec)
            coh = mix_coherence(ens, config)
            if abs(coh.lambda_max_d - lam_target) > 1e-9 * max(1.0, lam_target):
                failures.append(
                    f"sigma={sigma_target}: lambda_max(D) {coh.lambda_max_d} != {lam_target}"
                )
            if abs(coh.sigma - sigma_target) > 1e-9 * max(1.0, sigma_target):
                failures.append(f"sigma={sigma_target}: measured {coh.sigma}")
            # the k * n_f pairs with an aligned retain member form an
            # all-ones block after normalizing; everything else is zero
            s_norm = coh.matrix_s.a / coh.max_pair_lambda
            n_live = spec.aligned_count * config.n_forget
            ones = np.abs(s_norm - 1.0) <= 1e-9
            zeros = np.abs(s_norm) <= 1e-9
            if ones.sum() != n_live * n_live or ones.sum() + zeros.sum() != s_norm.size:
                failures.append(
                    f"sigma={sigma_target}: normalized matrix is not a "
                    f"{n_live}x{n_live} ones block plus zeros"
                )
            if lam_frac < 1.0:
                n_div = 0
                for rep in range(10):
                    traj = dynsim.run_trajectory(
                        ens, config, steps=1000,
                        seed=derive_seed(self.master_seed, 300 + rep),
                    )
                    ratio = traj.norms[-1] / traj.norms[0]
                    if traj.diverged or ratio >= 1.0:
                        n_div += 1
                if n_div:
                    failures.append(
                        f"sigma={sigma_target}: {n_div}/10 trajectories failed to contract"
                    )
        detail = "; ".join(failures) if failures else (
            "targets reproduced to 1e-9; strict bound cases contracted 10/10"
        )
        return CriterionResult(
            "matching_construction", not failures, detail, time.perf_counter() - t0
        )

    def criterion_monte_carlo_agreement(self) -> CriterionResult:
        """Empirical mean ||w_k||^2 over 1e4 trajectories within 3
        standard errors of the exact recursion at k in {1, 10, 50}, for
        10 random small ensembles."""
        t0 = time.perf_counter()
        rng = np.random.default_rng(derive_seed(self.master_seed, 400))
        failures = []
        for trial in range(10):
            d = int(rng.integers(2, 7))
            n_r = int(rng.integers(2, 7))
            n_f = int(rng.integers(2, 7))
            ens = random_rank_one_ensemble(n_r, n_f, d, rng)
            batch = int(rng.integers(1, min(n_r, n_f) + 1))
            alpha = float(rng.uniform(0.0, 0.3))
            eta = float(rng.uniform(0.1, 0.5))
            config = UnlearnConfig(eta, alpha, batch, n_r, n_f)
            exact = exact_second_moment(ens, config, 50)
            while exact[50] > 1e8 * d:
                eta /= 2.0
                config = dataclasses.replace(config, eta=eta)
                exact = exact_second_moment(ens, config, 50)
            mc = dynsim.simulate_second_moment(
                ens, config, steps=50, n_traj=10_000,
                seed=derive_seed(self.master_seed, 410 + trial),
                record_at=(1, 10, 50),
            )
            for k in (1, 10, 50):
                mean, stderr = mc[k]
                if abs(mean - exact[k]) > 3.0 * stderr:
                    failures.append(
                        f"trial {trial} k={k}: |{mean:.6g} - {exact[k]:.6g}| "
                        f"> 3 x {stderr:.3g}"
                    )
        detail = "; ".join(failures) if failures else "10 ensembles within 3 SE at k=1,10,50"
        return CriterionResult(
            "monte_carlo_agreement", not failures, detail, time.perf_counter() - t0
        )

    def criterion_cnn_numerics(self) -> CriterionResult:
        """Analytic CNN gradient matches central finite differences to
        1e-5 relative on 20 kink-avoiding probes; the densified
        per-sample Hessian matches the explicit block construction to
        1e-10; rank-one coherence entries match the dense path to 1e-9."""
        t0 = time.perf_counter()
        failures = []
        rng = np.random.default_rng(derive_seed(self.master_seed, 500))
        probes = 0
        while probes < 20:
            data = cnnmem.generate_dataset(8, 10, 1.5, 1.0, rng)
            model = cnnmem.CnnModel(
                rng.standard_normal((3, 10)), rng.standard_normal((3, 10))
            )
            pre = np.abs(
                np.concatenate(
                    [
                        (data.x1 @ model.w_pos.T).ravel(),
                        (data.x2 @ model.w_pos.T).ravel(),
                        (data.x1 @ model.w_neg.T).ravel(),
                        (data.x2 @ model.w_neg.T).ravel(),
                    ]
                )
            )
            if pre.min() < 1e-3:
                continue
            probes += 1
            loss, grad = cnnmem.loss_and_grad(model, data)
            step = 1e-5
            fd_pos = np.zeros_like(model.w_pos)
            fd_neg = np.zeros_like(model.w_neg)
            for bank, fd in (("w_pos", fd_pos), ("w_neg", fd_neg)):
                base = getattr(model, bank)
                for idx in np.ndindex(base.shape):
                    bumped = base.copy()
                    bumped[idx] = base[idx] + step
                    plus = cnnmem.loss_and_grad(
                        cnnmem.CnnModel(
                            bumped if bank == "w_pos" else model.w_pos,
                            bumped if bank == "w_neg" else model.w_neg,
                        ),
                        data,
                    )[0]
                    bumped[idx] = base[idx] - step
                    minus = cnnmem.loss_and_grad(
                        cnnmem.CnnModel(
                            bumped if bank == "w_pos" else model.w_pos,
                            bumped if bank == "w_neg" else model.w_neg,
                        ),
                        data,
                    )[0]
                    fd[idx] = (plus - minus) / (2 * step)
            scale = max(
                np.abs(grad.w_pos).max(), np.abs(grad.w_neg).max(), 1e-12
            )
            err = max(
                np.abs(grad.w_pos - fd_pos).max(), np.abs(grad.w_neg - fd_neg).max()
            )
            if err > 1e-5 * scale:
                failures.append(f"probe {probes}: FD relative error {err / scale:.3g}")
        # block-formula Hessian check
        data = cnnmem.generate_dataset(5, 6, 1.0, 1.0, rng)
        model = cnnmem.CnnModel(rng.standard_normal((2, 6)), rng.standard_normal((2, 6)))
        m, d = model.m, model.d
        f_all = cnnmem.forward(model, data.x1, data.x2)
        for i in range(data.n):
            factor = cnnmem.sample_hessian(model, data, i)
            dense = factor.dense().a
            y, xi = data.y[i], data.noise[i]
            s = 1.0 / (1.0 + math.exp(y * f_all[i]))
            ell2 = s * (1.0 - s)
            explicit = np.zeros((2 * m * d, 2 * m * d))
            banks = [(1.0, model.w_pos), (-1.0, model.w_neg)]
            blocks = []
            for j_sign, bank in banks:
                for r in range(m):
                    w = bank[r]
                    g = (
                        (1.0 if w @ (y * data.mu) > 0 else 0.0) * data.mu
                        + (1.0 if w @ xi > 0 else 0.0) * y * xi
                    )
                    blocks.append(j_sign / m * g)
            for a, ga in enumerate(blocks):
                for b, gb in enumerate(blocks):
                    explicit[a * d : (a + 1) * d, b * d : (b + 1) * d] = (
                        ell2 * np.outer(ga, gb)
                    )
            scale = max(1.0, np.abs(explicit).max())
            if np.abs(dense - explicit).max() > 1e-10 * scale:
                failures.append(f"sample {i}: block-formula Hessian mismatch")
        # rank-one vs dense coherence entries
        factors = [
            f.to_rank_one() for f in cnnmem.sample_hessian_factors(model, data)
        ]
        ens_r1 = HessianEnsemble(tuple(factors[:3]), tuple(factors[3:]), factors[0].dim)
        ens_dense = HessianEnsemble(
            tuple(f.dense() for f in factors[:3]),
            tuple(f.dense() for f in factors[3:]),
            factors[0].dim,
        )
        config = UnlearnConfig(eta=0.1, alpha=0.3, batch=2, n_retain=3, n_forget=2)
        coh_r1 = mix_coherence(ens_r1, config, method="rank1")
        coh_dense = mix_coherence(ens_dense, config, method="dense")
        s_scale = max(coh_dense.matrix_s.a.max(), 1e-30)
        gap = np.abs(coh_r1.matrix_s.a - coh_dense.matrix_s.a).max()
        if gap > 1e-9 * s_scale:
            failures.append(f"coherence entries rank-one vs dense gap {gap:.3g}")
        detail = "; ".join(failures) if failures else (
            "20 FD probes, block-formula Hessians, and dual-path coherence all matched"
        )
        return CriterionResult("cnn_numerics", not failures, detail, time.perf_counter() - t0)

    def criterion_memorization_overlap(self) -> CriterionResult:
        """Reduced-grid heatmap: among cells that reached the train-loss
        target, test error and final forget loss are strongly rank
        correlated (>= 0.5), and at each dimension the lowest-SNR cell
        forgets harder than the highest-SNR cell."""
        t0 = time.perf_counter()
        repeats = 5 if self.quick else OVERLAP_REPEATS
        cells, csv_text = self._run_overlap(repeats)
        self.artifacts["heatmap_csv"] = csv_text
        failures = []
        fitted = [c for c in cells if c.train_loss <= cnnmem.TRAIN_LOSS_TARGET]
        if len(fitted) < 3:
            failures.append(f"only {len(fitted)} cells reached the train-loss target")
        else:
            rho = spearmanr(
                [c.test_error for c in fitted], [c.forget_loss for c in fitted]
            ).statistic
            if not rho >= 0.5:
                failures.append(f"spearman {rho:.3f} < 0.5 over {len(fitted)} cells")
        for d in OVERLAP_DS:
            col = [c for c in cells if c.d == d]
            low = min(col, key=lambda c: c.snr)
            high = max(col, key=lambda c: c.snr)
            if not low.forget_loss > high.forget_loss:
                failures.append(
                    f"d={d}: forget loss {low.forget_loss:.4g} at lowest SNR not above "
                    f"{high.forget_loss:.4g} at highest"
                )
        detail = "; ".join(failures) if failures else (
            f"{len(fitted)} fitted cells, overlap and per-dimension ordering hold"
        )
        return CriterionResult(
            "memorization_overlap", not failures, detail, time.perf_counter() - t0
        )

    def criterion_coherence_ratio_trend(self) -> CriterionResult:
        """The coherence ratio of trained models rises from the lowest
        to the highest SNR endpoint (20-repeat means)."""
        t0 = time.perf_counter()
        points = cnnmem.coherence_ratio_curve(
            TREND_SNRS, TREND_D, repeats=TREND_REPEATS,
            master_seed=derive_seed(self.master_seed, 600),
        )
        self.artifacts["curve_csv"] = cnnmem.format_curve_csv(points)
        first, last = points[0], points[-1]
        ok = (
            math.isfinite(first.ratio)
            and math.isfinite(last.ratio)
            and last.ratio > first.ratio
        )
        detail = (
            f"ratio {first.ratio:.3f} at snr={first.snr} -> {last.ratio:.3f} "
            f"at snr={last.snr}"
        )
        return CriterionResult(
            "coherence_ratio_trend", ok, detail, time.perf_counter() - t0
        )

    def criterion_determinism(self) -> CriterionResult:
        """Re-running the sweep and heatmap with the same master seed
        reproduces byte-identical CSV text."""
        t0 = time.perf_counter()
        failures = []
        if self.quick:
            template = _sweep_template(0.5)
            def small_sweep():
                cells = boundary_sweep(
                    (5, 25), (10,), template, steps=200, repeats=5,
                    master_seed=derive_seed(self.master_seed, 700),
                )
                return format_sweep_csv(cells)
            if small_sweep() != small_sweep():
                failures.append("reduced sweep CSV not reproducible")
            def small_map():
                cells = cnnmem.snr_heatmap(
                    (1.0, 3.0), (100,), repeats=2,
                    master_seed=derive_seed(self.master_seed, 701),
                )
                return cnnmem.format_heatmap_csv(cells)
            if small_map() != small_map():
                failures.append("reduced heatmap CSV not reproducible")
        else:
            for i, eta in enumerate(SWEEP_ETAS):
                key = f"sweep_csv_eta={eta}"
                if key not in self.artifacts:
                    self.artifacts[key] = self._run_sweep(eta, i)[2]
                rerun = self._run_sweep(eta, i)[2]
                if rerun != self.artifacts[key]:
                    failures.append(f"sweep CSV for eta={eta} not byte-identical")
            if "heatmap_csv" not in self.artifacts:
                self.artifacts["heatmap_csv"] = self._run_overlap(OVERLAP_REPEATS)[1]
            rerun = self._run_overlap(OVERLAP_REPEATS)[1]
            if rerun != self.artifacts["heatmap_csv"]:
                failures.append("heatmap CSV not byte-identical")
        detail = "; ".join(failures) if failures else "reruns byte-identical"
        return CriterionResult("determinism", not failures, detail, time.perf_counter() - t0)

    # -- driver ---------------------------------------------------------------

    CRITERIA = (
        "criterion_boundary_bracketing",
        "criterion_second_moment_orderings",
        "criterion_matching_construction",
        "criterion_monte_carlo_agreement",
        "criterion_cnn_numerics",
        "criterion_memorization_overlap",
        "criterion_coherence_ratio_trend",
        "criterion_determinism",
    )

    def run_all(self, emit=None, names=None) -> list[CriterionResult]:
        results = []
        for name in names or self.CRITERIA:
            result = getattr(self, name)()
            results.append(result)
            if emit is not None:
                status = "PASS" if result.passed else "FAIL"
                emit(f"{status} {result.name} ({result.runtime_s:.1f}s): {result.detail}")
        return results
