"""Stability tests: set-mean Hessians, noise recurrence, exact second
moment, threshold formulas, classification, and the trace bounds."""

import math

import numpy as np
import pytest

from unlearn_stab.coherence import HessianEnsemble, UnlearnConfig, raw_coefficients
from unlearn_stab.errors import (
    BoundInapplicable,
    EmptyRetainSet,
    NoStochasticity,
    UndefinedThreshold,
)
from unlearn_stab.matker import RankOneFactor, SymMatrix, lambda_max
from unlearn_stab.stability import (
    Classification,
    JOperator,
    NoiseSequence,
    StabilityReport,
    classify,
    convergence_sigma_curve,
    convergence_threshold,
    divergence_sigma_curve,
    divergence_threshold,
    exact_second_moment,
    full_hessians,
    noise_recurrence,
    spectral_epsilon,
    upper_bound_trace,
)
from unlearn_stab.synthetic import (
    QConstructionSpec,
    build_q_construction,
    random_rank_one_ensemble,
)


def basis_factor(dim, index, weight=1.0):
    v = np.zeros(dim)
    v[index] = 1.0
    return RankOneFactor(v, weight)


class TestFullHessians:
    def test_mean_of_two(self):
        retain = (basis_factor(3, 0, 2.0), basis_factor(3, 0, 0.0))
        ens = HessianEnsemble(retain, (), 3)
        h_r, h_f = full_hessians(ens)
        np.testing.assert_allclose(h_r.a, np.diag([1.0, 0.0, 0.0]), atol=1e-14)
        np.testing.assert_allclose(h_f.a, np.zeros((3, 3)))

    def test_q_construction_sharpness(self):
        ens = build_q_construction(QConstructionSpec(n=50, q=25))
        h_r, h_f = full_hessians(ens)
        assert lambda_max(h_r) == pytest.approx(2.0, rel=1e-12)
        assert lambda_max(h_f) == pytest.approx(2.0, rel=1e-12)

    def test_empty_retain_raises(self):
        with pytest.raises(EmptyRetainSet):
            full_hessians(HessianEnsemble((), (basis_factor(2, 0),), 2))


class TestNoiseRecurrence:
    def test_rank_one_closed_form(self):
        # n_r = n_f = 2, B = 1, every Hessian the same unit projector:
        # each step multiplies the e_0 mass by 2(C_r + C_f)
        retain = (basis_factor(3, 0), basis_factor(3, 0))
        ens = HessianEnsemble(retain, retain, 3)
        cfg = UnlearnConfig(eta=0.7, alpha=0.3, batch=1, n_retain=2, n_forget=2)
        c_r, c_f = raw_coefficients(cfg)
        noise = noise_recurrence(ens, cfg, 6)
        assert noise.traces[0] == 3.0
        for k in range(1, 7):
            assert noise.traces[k] == pytest.approx(
                (2 * (c_r + c_f)) ** k, rel=1e-12
            )

    def test_all_zero_hessians(self):
        retain = (basis_factor(3, 0, 0.0), basis_factor(3, 1, 0.0))
        ens = HessianEnsemble(retain, retain, 3)
        cfg = UnlearnConfig(eta=0.5, alpha=0.2, batch=1, n_retain=2, n_forget=2)
        noise = noise_recurrence(ens, cfg, 4)
        assert noise.traces[0] == 3.0
        assert all(t == 0.0 for t in noise.traces[1:])

    def test_matches_independent_recursion(self):
        rng = np.random.default_rng(0)
        ens = random_rank_one_ensemble(3, 2, 4, rng)
        cfg = UnlearnConfig(eta=0.4, alpha=0.15, batch=1, n_retain=3, n_forget=2)
        noise = noise_recurrence(ens, cfg, 8)
        # independent re-implementation with explicit dense loops
        c_r, c_f = raw_coefficients(cfg)
        hs_r = [h.dense().a for h in ens.retain]
        hs_f = [h.dense().a for h in ens.forget]
        current = np.eye(4)
        for k in range(1, 9):
            nxt = np.zeros((4, 4))
            for h in hs_f:
                nxt += c_f * (h @ current @ h)
            for h in hs_r:
                nxt += c_r * (h @ current @ h)
            current = nxt
            assert noise.traces[k] == pytest.approx(np.trace(current), rel=1e-10)

    def test_no_stochasticity(self):
        ens = HessianEnsemble((basis_factor(2, 0),), (basis_factor(2, 1),), 2)
        cfg = UnlearnConfig(eta=0.5, alpha=0.1, batch=1, n_retain=1, n_forget=1)
        with pytest.raises(NoStochasticity):
            noise_recurrence(ens, cfg, 3)

    def test_matrices_stored(self):
        rng = np.random.default_rng(1)
        ens = random_rank_one_ensemble(2, 2, 3, rng)
        cfg = UnlearnConfig(eta=0.4, alpha=0.1, batch=1, n_retain=2, n_forget=2)
        noise = noise_recurrence(ens, cfg, 5)
        assert len(noise.matrices) == 6
        np.testing.assert_allclose(noise.matrices[0].a, np.eye(3))


class TestExactSecondMoment:
    def test_deterministic_full_batch(self):
        # alpha = 0 and B = n_r: no sampling noise, Tr(V_k) = Tr(J^{2k})
        rng = np.random.default_rng(2)
        ens = random_rank_one_ensemble(3, 0, 4, rng)
        cfg = UnlearnConfig(eta=0.3, alpha=0.0, batch=3, n_retain=3, n_forget=0)
        assert raw_coefficients(cfg) == (0.0, 0.0)
        traces = exact_second_moment(ens, cfg, 6)
        j = JOperator.from_ensemble(ens, cfg)
        evals = np.linalg.eigvalsh(j.matrix.a)
        for k in range(7):
            assert traces[k] == pytest.approx(float((evals ** (2 * k)).sum()), rel=1e-10)

    def test_lower_bound_ordering(self):
        rng = np.random.default_rng(3)
        for _ in range(10):
            n_r = int(rng.integers(2, 6))
            n_f = int(rng.integers(1, 6))
            d = int(rng.integers(2, 5))
            ens = random_rank_one_ensemble(n_r, n_f, d, rng)
            cfg = UnlearnConfig(
                eta=float(rng.uniform(0.1, 0.5)),
                alpha=float(rng.uniform(0.0, 0.3)),
                batch=1,
                n_retain=n_r,
                n_forget=n_f,
            )
            traces = exact_second_moment(ens, cfg, 10)
            noise = noise_recurrence(ens, cfg, 10)
            evals = np.linalg.eigvalsh(JOperator.from_ensemble(ens, cfg).matrix.a)
            for k in range(1, 11):
                lower = float((evals ** (2 * k)).sum()) + noise.traces[k]
                assert lower <= traces[k] + 1e-8 * max(1.0, traces[k])

    def test_monte_carlo_agreement_small(self):
        from unlearn_stab.dynsim import simulate_second_moment

        rng = np.random.default_rng(4)
        ens = random_rank_one_ensemble(3, 2, 3, rng)
        cfg = UnlearnConfig(eta=0.3, alpha=0.2, batch=1, n_retain=3, n_forget=2)
        exact = exact_second_moment(ens, cfg, 15)
        mc = simulate_second_moment(ens, cfg, 15, 4000, seed=99, record_at=(5, 15))
        for k in (5, 15):
            mean, stderr = mc[k]
            assert abs(mean - exact[k]) <= 3 * stderr


class TestThresholds:
    CFG = UnlearnConfig(eta=0.5, alpha=0.1, batch=10, n_retain=50, n_forget=50)

    def test_divergence_hand_value(self):
        # denominator eta * ((1-a) n_f sqrt(n_r/B-1) + a n_r sqrt(n_f/B-1))
        # = 0.5 * (0.9*50*2 + 0.1*50*2) = 50
        got = divergence_threshold(self.CFG, 70.71)
        assert got == pytest.approx(math.sqrt(2.0) * 70.71 / 50.0, rel=1e-12)
        assert got == pytest.approx(2.0, abs=1e-4)

    def test_divergence_linearity_in_sigma(self):
        assert divergence_threshold(self.CFG, 141.42) == pytest.approx(
            2 * divergence_threshold(self.CFG, 70.71), rel=1e-12
        )

    def test_divergence_alpha_one_specialization(self):
        cfg = UnlearnConfig(eta=0.4, alpha=1.0, batch=5, n_retain=20, n_forget=20)
        sigma = 33.0
        expected = math.sqrt(2) * sigma / (0.4 * 20 * math.sqrt(20 / 5 - 1))
        assert divergence_threshold(cfg, sigma) == pytest.approx(expected, rel=1e-12)

    def test_convergence_hand_values(self):
        # statement: 2*200 / (0.5 * 0.9 * (200 + 200))
        stmt = convergence_threshold(self.CFG, 200.0, "statement")
        assert stmt == pytest.approx(400.0 / 180.0, rel=1e-12)
        # proof: (2*200/0.5) * 0.9 * 0.9 / 400
        proof = convergence_threshold(self.CFG, 200.0, "proof")
        assert proof == pytest.approx(1.62, rel=1e-12)

    def test_convergence_large_sigma_limit(self):
        stmt = convergence_threshold(self.CFG, 1e12, "statement")
        assert stmt == pytest.approx(2.0 / (0.5 * 0.9), rel=1e-6)

    def test_undefined_threshold(self):
        cfg = UnlearnConfig(eta=0.5, alpha=0.1, batch=50, n_retain=50, n_forget=50)
        with pytest.raises(UndefinedThreshold):
            divergence_threshold(cfg, 10.0)
        with pytest.raises(UndefinedThreshold):
            convergence_threshold(cfg, 10.0)

    def test_homogeneity_in_sigma_and_eta(self):
        for form in ("statement", "proof"):
            base = convergence_threshold(self.CFG, 120.0, form)
            # degree -1 in eta
            cfg2 = UnlearnConfig(eta=1.0, alpha=0.1, batch=10, n_retain=50, n_forget=50)
            assert convergence_threshold(cfg2, 120.0, form) == pytest.approx(
                base / 2.0, rel=1e-12
            )
        assert divergence_threshold(self.CFG, 120.0) * 0.5 == pytest.approx(
            divergence_threshold(
                UnlearnConfig(eta=1.0, alpha=0.1, batch=10, n_retain=50, n_forget=50),
                120.0,
            ),
            rel=1e-12,
        )

    def test_sigma_curves_invert_thresholds(self):
        lam = 2.0
        sig_div = divergence_sigma_curve(self.CFG, lam)
        assert divergence_threshold(self.CFG, sig_div) == pytest.approx(lam, rel=1e-12)
        sig_stmt = convergence_sigma_curve(self.CFG, lam, "statement")
        assert convergence_threshold(self.CFG, sig_stmt, "statement") == pytest.approx(
            lam, rel=1e-12
        )
        sig_proof = convergence_sigma_curve(self.CFG, lam, "proof")
        assert convergence_threshold(self.CFG, sig_proof, "proof") == pytest.approx(
            lam, rel=1e-12
        )


class TestClassify:
    CFG = UnlearnConfig(eta=0.5, alpha=0.1, batch=10, n_retain=50, n_forget=50)

    def test_ordering(self):
        sigma = 70.71  # thr_div ~ 2.0, thr_conv(statement) ~ 1.27
        assert classify(2.5, self.CFG, sigma) is Classification.PREDICT_DIVERGE
        assert classify(0.5, self.CFG, sigma) is Classification.CONVERGENCE_POSSIBLE
        assert classify(1.5, self.CFG, sigma) is Classification.INDETERMINATE

    def test_joint_scaling_invariance(self):
        # H -> c H together with eta -> eta / c leaves the prediction
        # unchanged (sigma is scale free, lambda and thresholds co-scale)
        sigma = 120.0
        for c in (0.2, 5.0):
            cfg_scaled = UnlearnConfig(
                eta=0.5 / c, alpha=0.1, batch=10, n_retain=50, n_forget=50
            )
            for lam in (0.5, 1.9, 2.4, 3.5):
                assert classify(lam, self.CFG, sigma) is classify(
                    c * lam, cfg_scaled, sigma
                )


class TestUpperBound:
    def test_single_surviving_term(self):
        noise = NoiseSequence((2.0, 0.0, 0.0), ())
        got = upper_bound_trace(noise, epsilon=0.5, k=3)
        assert got == pytest.approx(0.5**6 * 2.0, rel=1e-12)
        assert got == pytest.approx(0.03125, rel=1e-12)

    def test_k_one(self):
        noise = NoiseSequence((4.0,), ())
        assert upper_bound_trace(noise, epsilon=0.25, k=1) == pytest.approx(
            0.75**2 * 4.0, rel=1e-12
        )

    def test_bad_epsilon(self):
        noise = NoiseSequence((2.0, 0.1), ())
        with pytest.raises(BoundInapplicable):
            upper_bound_trace(noise, epsilon=0.0, k=1)
        with pytest.raises(BoundInapplicable):
            upper_bound_trace(noise, epsilon=1.5, k=1)

    def test_upper_bounds_exact_when_contractive(self):
        rng = np.random.default_rng(5)
        found = 0
        for _ in range(30):
            d = int(rng.integers(2, 5))
            n_r = int(rng.integers(d, 7))
            ens = random_rank_one_ensemble(n_r, 2, d, rng)
            cfg = UnlearnConfig(
                eta=float(rng.uniform(0.05, 0.3)),
                alpha=0.0,
                batch=1,
                n_retain=n_r,
                n_forget=2,
            )
            j = JOperator.from_ensemble(ens, cfg)
            try:
                eps = spectral_epsilon(j)
            except BoundInapplicable:
                continue
            found += 1
            traces = exact_second_moment(ens, cfg, 12)
            noise = noise_recurrence(ens, cfg, 12)
            for k in range(1, 13):
                upper = upper_bound_trace(noise, eps, k)
                assert traces[k] <= upper + 1e-8 * max(1.0, upper)
        assert found >= 5

    def test_convergence_corollary(self):
        # tiny weights: Tr(N_r) <= eps for all r, so the exact second
        # moment decays at least like (1 - eps)^k * d
        rng = np.random.default_rng(6)
        d, n_r = 3, 4
        ens = random_rank_one_ensemble(n_r, 2, d, rng, weight_scale=0.02)
        cfg = UnlearnConfig(eta=0.25, alpha=0.0, batch=1, n_retain=n_r, n_forget=2)
        j = JOperator.from_ensemble(ens, cfg)
        eps = spectral_epsilon(j)
        noise = noise_recurrence(ens, cfg, 30)
        traces = exact_second_moment(ens, cfg, 30)
        if all(t <= eps for t in noise.traces[1:]):
            for k in (10, 20, 30):
                # the guarantee is asymptotic through the binomial bound;
                # check the bound value itself decays
                assert upper_bound_trace(noise, eps, k) <= (
                    ((1 - eps) ** 2 + eps) ** k * d * (1 + 1e-6)
                )
                assert traces[k] <= ((1 - eps) ** 2 + eps) ** k * d * (1 + 1e-6)


class TestJOperator:
    def test_matrix_formula(self):
        retain = (basis_factor(2, 0, 2.0),)
        forget = (basis_factor(2, 1, 4.0),)
        ens = HessianEnsemble(retain, forget, 2)
        cfg = UnlearnConfig(eta=0.5, alpha=0.25, batch=1, n_retain=1, n_forget=1)
        j = JOperator.from_ensemble(ens, cfg)
        expected = np.eye(2)
        expected[0, 0] -= 0.5 * 0.75 * 2.0
        expected[1, 1] += 0.5 * 0.25 * 4.0
        np.testing.assert_allclose(j.matrix.a, expected, atol=1e-14)

    def test_spectral_bounded(self):
        j = JOperator(SymMatrix(np.diag([0.6, -0.3])), 0.5, 0.1)
        assert j.spectral_bounded(0.3)
        assert not j.spectral_bounded(0.5)
        assert spectral_epsilon(j) == pytest.approx(0.4, rel=1e-12)

    def test_spectral_epsilon_inapplicable(self):
        j = JOperator(SymMatrix(np.diag([1.2, 0.1])), 0.5, 0.1)
        with pytest.raises(BoundInapplicable):
            spectral_epsilon(j)


class TestReport:
    def test_roundtrip(self):
        rep = StabilityReport(
            lambda_max_d=2.0,
            sigma=70.71,
            thr_div=2.0001,
            thr_conv_statement=1.27,
            thr_conv_proof=1.05,
            classification=Classification.INDETERMINATE,
        )
        text = rep.to_text()
        assert "lambda_max_D=2" in text
        assert "classification=Indeterminate" in text
        back = StabilityReport.from_text(text)
        assert back.classification is Classification.INDETERMINATE
        assert back.sigma == pytest.approx(rep.sigma, rel=1e-10)

    def test_blank_thresholds(self):
        rep = StabilityReport(2.0, 10.0, None, None, None, Classification.INDETERMINATE)
        text = rep.to_text()
        assert "thr_div=\n" in text
        back = StabilityReport.from_text(text)
        assert back.thr_div is None
