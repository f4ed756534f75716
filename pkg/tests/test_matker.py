"""Kernel tests: eigendecomposition, PSD square roots, Frobenius
products, top eigenvalues, and the rank-one fast paths."""

import math

import numpy as np
import pytest

from unlearn_stab.errors import InvalidMatrix, NotPSD, ShapeError
from unlearn_stab.matker import (
    RankOneFactor,
    SymMatrix,
    frob_product,
    lambda_max,
    psd_sqrt,
    sym_eig,
)


def jacobi_eigenvalues(matrix, sweeps=100, tol=1e-14):
    """Independent eigenvalue oracle: classical cyclic Jacobi rotations,
    no LAPACK involved."""
    a = np.array(matrix, dtype=float)
    n = a.shape[0]
    for _ in range(sweeps):
        off = math.sqrt(max(0.0, np.sum(a**2) - np.sum(np.diag(a) ** 2)))
        if off <= tol:
            break
        for p in range(n - 1):
            for q in range(p + 1, n):
                if abs(a[p, q]) <= tol:
                    continue
                theta = (a[q, q] - a[p, p]) / (2.0 * a[p, q])
                t = math.copysign(1.0, theta) / (
                    abs(theta) + math.sqrt(1.0 + theta * theta)
                )
                c = 1.0 / math.sqrt(1.0 + t * t)
                s = t * c
                rot = np.eye(n)
                rot[p, p] = rot[q, q] = c
                rot[p, q] = s
                rot[q, p] = -s
                a = rot.T @ a @ rot
    return np.sort(np.diag(a))[::-1]


class TestSymMatrix:
    def test_symmetrizes_exactly(self):
        rng = np.random.default_rng(0)
        raw = rng.standard_normal((5, 5))
        m = SymMatrix(raw)
        assert np.array_equal(m.a, m.a.T)
        np.testing.assert_allclose(m.a, 0.5 * (raw + raw.T))

    def test_rejects_nonfinite(self):
        bad = np.eye(3)
        bad[1, 2] = np.nan
        with pytest.raises(InvalidMatrix):
            SymMatrix(bad)

    def test_rejects_nonsquare(self):
        with pytest.raises(InvalidMatrix):
            SymMatrix(np.zeros((2, 3)))

    def test_add_dim_mismatch(self):
        with pytest.raises(ShapeError):
            SymMatrix.identity(2) + SymMatrix.identity(3)


class TestSymEig:
    def test_identity(self):
        evals, evecs = sym_eig(SymMatrix.identity(3))
        np.testing.assert_allclose(evals, [1.0, 1.0, 1.0])
        np.testing.assert_allclose(evecs @ evecs.T, np.eye(3), atol=1e-12)

    def test_rank_one_projector(self):
        m = np.zeros((2, 2))
        m[0, 0] = 1.0
        evals, evecs = sym_eig(SymMatrix(m))
        np.testing.assert_allclose(evals, [1.0, 0.0], atol=1e-14)
        assert abs(abs(evecs[0, 0]) - 1.0) < 1e-12

    def test_matches_jacobi_oracle(self):
        rng = np.random.default_rng(1)
        for _ in range(10):
            m = SymMatrix(rng.standard_normal((5, 5)))
            evals, _ = sym_eig(m)
            oracle = jacobi_eigenvalues(m.a)
            np.testing.assert_allclose(evals, oracle, rtol=1e-10, atol=1e-10)

    def test_reconstruction(self):
        rng = np.random.default_rng(2)
        for _ in range(20):
            m = SymMatrix(rng.standard_normal((6, 6)) * rng.uniform(0.1, 50))
            evals, evecs = sym_eig(m)
            recon = (evecs * evals) @ evecs.T
            scale = max(1.0, np.linalg.norm(m.a, "fro"))
            assert np.linalg.norm(m.a - recon, "fro") <= 1e-9 * scale

    def test_descending_order(self):
        rng = np.random.default_rng(3)
        evals, _ = sym_eig(SymMatrix(rng.standard_normal((7, 7))))
        assert np.all(np.diff(evals) <= 0)

    def test_nonfinite_raises(self):
        bad = np.eye(3)
        bad[0, 0] = np.inf
        with pytest.raises(InvalidMatrix):
            sym_eig(bad)


class TestPsdSqrt:
    def test_identity(self):
        np.testing.assert_allclose(psd_sqrt(SymMatrix.identity(4)).a, np.eye(4), atol=1e-12)

    def test_rank_one_norm_two(self):
        # a a^T with ||a|| = 2 has sqrt a a^T / 2
        rng = np.random.default_rng(4)
        a = rng.standard_normal(5)
        a *= 2.0 / np.linalg.norm(a)
        m = SymMatrix(np.outer(a, a))
        np.testing.assert_allclose(psd_sqrt(m).a, np.outer(a, a) / 2.0, atol=1e-12)

    def test_diagonal(self):
        np.testing.assert_allclose(
            psd_sqrt(SymMatrix(np.diag([4.0, 9.0]))).a, np.diag([2.0, 3.0]), atol=1e-12
        )

    def test_square_recovers_input(self):
        rng = np.random.default_rng(5)
        for _ in range(100):
            d = int(rng.integers(2, 7))
            b = rng.standard_normal((d, d))
            m = SymMatrix(b @ b.T * rng.uniform(0.01, 10))
            root = psd_sqrt(m)
            scale = max(1.0, np.linalg.norm(m.a, "fro"))
            assert np.linalg.norm(root.a @ root.a - m.a, "fro") <= 1e-8 * scale

    def test_not_psd_raises(self):
        with pytest.raises(NotPSD):
            psd_sqrt(SymMatrix(np.diag([1.0, -0.1])))

    def test_clamps_roundoff_negatives(self):
        m = SymMatrix(np.diag([1.0, -1e-14]))
        root = psd_sqrt(m)
        assert root.a[1, 1] == 0.0


class TestFrobProduct:
    def test_identity_pair(self):
        assert frob_product(SymMatrix.identity(4), SymMatrix.identity(4)) == pytest.approx(2.0)

    def test_orthogonal_projectors(self):
        e1 = np.zeros((3, 3))
        e1[0, 0] = 1.0
        e2 = np.zeros((3, 3))
        e2[1, 1] = 1.0
        assert frob_product(SymMatrix(e1), SymMatrix(e2)) == pytest.approx(0.0, abs=1e-15)

    def test_unit_projectors_inner_product(self):
        rng = np.random.default_rng(6)
        for _ in range(25):
            a = rng.standard_normal(6)
            a /= np.linalg.norm(a)
            b = rng.standard_normal(6)
            b /= np.linalg.norm(b)
            got = frob_product(SymMatrix(np.outer(a, a)), SymMatrix(np.outer(b, b)))
            assert got == pytest.approx(abs(a @ b), abs=1e-12)

    def test_symmetry(self):
        rng = np.random.default_rng(7)
        for _ in range(20):
            a = SymMatrix(rng.standard_normal((5, 5)))
            b = SymMatrix(rng.standard_normal((5, 5)))
            assert abs(frob_product(a, b) - frob_product(b, a)) <= 1e-12 * max(
                1.0, frob_product(a, b)
            )

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            frob_product(SymMatrix.identity(2), SymMatrix.identity(3))


class TestLambdaMax:
    def test_scaled_projector(self):
        m = np.zeros((4, 4))
        m[0, 0] = 2.0
        assert lambda_max(SymMatrix(m)) == pytest.approx(2.0)

    def test_all_ones(self):
        for n in (2, 5, 9):
            assert lambda_max(SymMatrix(np.ones((n, n)))) == pytest.approx(float(n))

    def test_matches_sym_eig(self):
        rng = np.random.default_rng(8)
        for _ in range(10):
            b = rng.standard_normal((6, 6))
            m = SymMatrix(b @ b.T)
            top = sym_eig(m)[0][0]
            assert abs(lambda_max(m) - top) <= 1e-9 * max(1.0, abs(top))

    def test_positive_homogeneity(self):
        rng = np.random.default_rng(9)
        m = SymMatrix(rng.standard_normal((5, 5)))
        for c in (0.25, 3.0, 117.0):
            assert lambda_max(c * m) == pytest.approx(c * lambda_max(m), rel=1e-12)

    def test_lanczos_path_matches_dense(self):
        rng = np.random.default_rng(10)
        b = rng.standard_normal((600, 40))
        m = b @ b.T  # dim above the Lanczos switch, rank 40
        via_auto = lambda_max(m)
        dense = float(np.linalg.eigvalsh(0.5 * (m + m.T))[-1])
        assert abs(via_auto - dense) <= 1e-9 * max(1.0, dense)


class TestRankOneFactor:
    def test_densify_roundtrip(self):
        rng = np.random.default_rng(11)
        for _ in range(100):
            v = rng.standard_normal(5)
            w = rng.uniform(0.0, 3.0)
            f = RankOneFactor(v, w)
            expected = w * np.outer(v, v)
            scale = max(1e-12, np.abs(expected).max())
            assert np.abs(f.dense().a - expected).max() <= 1e-12 * scale

    def test_negative_weight_rejected(self):
        with pytest.raises(NotPSD):
            RankOneFactor(np.ones(2), -1.0)

    def test_lambda_max_closed_form(self):
        rng = np.random.default_rng(12)
        for _ in range(50):
            f = RankOneFactor(rng.standard_normal(4), rng.uniform(0, 2))
            dense = lambda_max(f.dense())
            assert f.lambda_max() == pytest.approx(dense, rel=1e-9, abs=1e-12)

    def test_trace_product_matches_dense(self):
        rng = np.random.default_rng(13)
        for _ in range(100):
            f1 = RankOneFactor(rng.standard_normal(5), rng.uniform(0, 2))
            f2 = RankOneFactor(rng.standard_normal(5), rng.uniform(0, 2))
            dense = float(np.trace(f1.dense().a @ f2.dense().a))
            assert f1.trace_product(f2) == pytest.approx(dense, rel=1e-9, abs=1e-12)

    def test_frob_of_unit_factors(self):
        # for unit vectors, ||H1^(1/2) H2^(1/2)||_F = sqrt(w1 w2) |<v1,v2>|
        rng = np.random.default_rng(14)
        for _ in range(100):
            v1 = rng.standard_normal(6)
            v1 /= np.linalg.norm(v1)
            v2 = rng.standard_normal(6)
            v2 /= np.linalg.norm(v2)
            w1, w2 = rng.uniform(0.1, 2.0, 2)
            f1 = RankOneFactor(v1, w1)
            f2 = RankOneFactor(v2, w2)
            dense = frob_product(psd_sqrt(f1.dense()), psd_sqrt(f2.dense()))
            closed = math.sqrt(w1 * w2) * abs(v1 @ v2)
            assert dense == pytest.approx(closed, rel=1e-9, abs=1e-12)

    def test_apply_matches_dense(self):
        rng = np.random.default_rng(15)
        f = RankOneFactor(rng.standard_normal(7), 1.3)
        w = rng.standard_normal(7)
        np.testing.assert_allclose(f.apply(w), f.dense().a @ w, rtol=1e-10)
