"""Tests for the dense symmetric kernels."""

import numpy as np
import pytest

from inlaplus import linalg
from inlaplus.errors import (
    DimensionOverflow,
    NonFiniteInput,
    NotPositiveDefinite,
    SingularInnerSystem,
)

# 4x4 first-difference precision of a length-4 path, used throughout as the
# canonical rank-deficient worked example.
Q_PATH4 = np.array(
    [
        [1.0, -1.0, 0.0, 0.0],
        [-1.0, 2.0, -1.0, 0.0],
        [0.0, -1.0, 2.0, -1.0],
        [0.0, 0.0, -1.0, 1.0],
    ]
)

Q_PATH4_PINV_ROW0 = np.array([0.875, 0.125, -0.375, -0.625])

# Three observations, each loading the first effect plus one of the others.
A_WORKED = np.array([[1.0, 1.0, 0.0, 0.0], [1.0, 0.0, 1.0, 0.0], [1.0, 0.0, 0.0, 1.0]])
QL_WORKED = np.diag([1.796, 2.033, 0.896])

SIGMA_WORKED_ROW0 = np.array([0.274, -0.044, -0.129, -0.102])


def random_spd(n, rng, jitter=1.0):
    a = rng.standard_normal((n, n))
    return a @ a.T + jitter * np.eye(n)


class TestCholesky:
    def test_identity(self):
        f = linalg.cholesky(np.eye(3))
        np.testing.assert_allclose(f.lower, np.eye(3))
        assert f.log_det == 0.0

    def test_diagonal(self):
        f = linalg.cholesky(np.diag([4.0, 9.0]))
        np.testing.assert_allclose(f.lower, np.diag([2.0, 3.0]))
        assert f.log_det == pytest.approx(np.log(36.0))

    def test_reconstruction_random_spd(self):
        rng = np.random.default_rng(7)
        a = rng.standard_normal((6, 6))
        m = a.T @ a + np.eye(6)
        f = linalg.cholesky(m)
        np.testing.assert_allclose(f.lower @ f.lower.T, m, atol=1e-10)
        assert f.log_det == pytest.approx(np.linalg.slogdet(m)[1], rel=1e-10)

    def test_not_positive_definite_raises(self):
        with pytest.raises(NotPositiveDefinite):
            linalg.cholesky(Q_PATH4)  # rank deficient

    def test_solve(self):
        rng = np.random.default_rng(3)
        m = random_spd(5, rng)
        b = rng.standard_normal(5)
        x = linalg.cholesky(m).solve(b)
        np.testing.assert_allclose(m @ x, b, atol=1e-10)


class TestPseudoInverse:
    def test_worked_example_first_row(self):
        res = linalg.pseudo_inverse(Q_PATH4)
        np.testing.assert_allclose(res.pinv[0], Q_PATH4_PINV_ROW0, atol=1e-3)
        assert res.rank == 3
        assert res.null_basis.shape == (4, 1)
        # null vector of the path-graph precision is the constant vector
        np.testing.assert_allclose(
            np.abs(res.null_basis[:, 0]), np.full(4, 0.5), atol=1e-12
        )

    def test_identity(self):
        res = linalg.pseudo_inverse(np.eye(5))
        np.testing.assert_allclose(res.pinv, np.eye(5))
        assert res.rank == 5
        assert res.null_basis.shape == (5, 0)

    def test_zero_matrix(self):
        res = linalg.pseudo_inverse(np.zeros((3, 3)))
        np.testing.assert_allclose(res.pinv, np.zeros((3, 3)))
        assert res.rank == 0
        assert res.null_basis.shape == (3, 3)
        np.testing.assert_allclose(res.null_basis @ res.null_basis.T, np.eye(3), atol=1e-12)

    def test_non_finite_raises(self):
        m = np.eye(3)
        m[0, 0] = np.nan
        with pytest.raises(NonFiniteInput):
            linalg.pseudo_inverse(m)

    @pytest.mark.parametrize("n", [2, 5, 11])
    def test_penrose_conditions_random_psd(self, n):
        rng = np.random.default_rng(n)
        a = rng.standard_normal((n, max(1, n - 2)))
        m = a @ a.T  # PSD, generically rank n-2
        res = linalg.pseudo_inverse(m)
        p = res.pinv
        np.testing.assert_allclose(m @ p @ m, m, atol=1e-8)
        np.testing.assert_allclose(p @ m @ p, p, atol=1e-8)
        np.testing.assert_allclose((m @ p).T, m @ p, atol=1e-8)
        np.testing.assert_allclose((p @ m).T, p @ m, atol=1e-8)
        assert res.rank + res.null_basis.shape[1] == n

    def test_log_pdet(self):
        res = linalg.pseudo_inverse(Q_PATH4)
        w = np.linalg.eigvalsh(Q_PATH4)
        assert res.log_pdet() == pytest.approx(np.sum(np.log(w[1:])), rel=1e-12)


class TestWoodburyPosteriorCov:
    def test_worked_example(self):
        prior = linalg.pseudo_inverse(Q_PATH4).pinv
        q_like = A_WORKED.T @ QL_WORKED @ A_WORKED
        sigma = linalg.woodbury_posterior_cov(prior, q_like)
        np.testing.assert_allclose(sigma[0], SIGMA_WORKED_ROW0, atol=1e-3)

    def test_zero_likelihood_returns_prior(self):
        prior = linalg.pseudo_inverse(Q_PATH4).pinv
        out = linalg.woodbury_posterior_cov(prior, np.zeros((4, 4)))
        np.testing.assert_allclose(out, prior, atol=1e-14)

    @pytest.mark.parametrize("seed", range(5))
    def test_matches_direct_inverse_full_rank(self, seed):
        rng = np.random.default_rng(seed)
        q_prior = random_spd(5, rng)
        b = rng.standard_normal((5, 3))
        q_like = b @ b.T
        expected = np.linalg.inv(q_prior + q_like)
        got = linalg.woodbury_posterior_cov(np.linalg.inv(q_prior), q_like)
        np.testing.assert_allclose(got, expected, atol=1e-10)

    def test_larger_random_instances(self):
        rng = np.random.default_rng(42)
        for n in (10, 30, 50):
            q_prior = random_spd(n, rng)
            b = rng.standard_normal((n, n))
            q_like = b @ b.T / n
            expected = np.linalg.inv(q_prior + q_like)
            got = linalg.woodbury_posterior_cov(np.linalg.inv(q_prior), q_like)
            err = np.abs(got - expected).max() / np.abs(expected).max()
            assert err < 1e-9

    def test_singular_inner_system(self):
        # P with a null direction and Q_like = -identity scaled to make
        # (I + Q P) exactly singular on the range: use q = -1 * P^+ structure.
        p = np.diag([1.0, 0.0])
        q = np.diag([-1.0, 0.0])  # I + q p = diag(0, 1): singular
        with pytest.raises(SingularInnerSystem):
            linalg.woodbury_posterior_cov(p, q)

    def test_null_space_preserved(self):
        res = linalg.pseudo_inverse(Q_PATH4)
        q_like = A_WORKED.T @ QL_WORKED @ A_WORKED
        sigma = linalg.woodbury_posterior_cov(res.pinv, q_like)
        # output has no mass on the prior null space
        np.testing.assert_allclose(sigma @ res.null_basis, 0.0, atol=1e-12)


class TestKronecker:
    def test_identities(self):
        np.testing.assert_allclose(
            linalg.kronecker(np.eye(2), np.eye(3)), np.eye(6)
        )

    def test_scalar_case(self):
        b = np.array([[2.0, 1.0], [1.0, 3.0]])
        np.testing.assert_allclose(linalg.kronecker(np.array([[2.5]]), b), 2.5 * b)

    def test_rank_multiplies(self):
        rw1_3 = np.array([[1.0, -1.0, 0.0], [-1.0, 2.0, -1.0], [0.0, -1.0, 1.0]])
        k = linalg.kronecker(rw1_3, rw1_3)
        rank = int(np.sum(np.linalg.eigvalsh(k) > 1e-9 * 4))
        assert rank == 4  # rank 2 * rank 2

    def test_entry_layout(self):
        a = np.array([[1.0, 2.0], [2.0, 5.0]])
        b = np.array([[3.0, 1.0], [1.0, 4.0]])
        k = linalg.kronecker(a, b)
        nb = 2
        for i in range(2):
            for j in range(2):
                for kk in range(2):
                    for ll in range(2):
                        assert k[i * nb + kk, j * nb + ll] == a[i, j] * b[kk, ll]

    def test_associative(self):
        rng = np.random.default_rng(1)
        mats = [random_spd(n, rng) for n in (2, 3, 2)]
        a, b, c = mats
        left = linalg.kronecker(linalg.kronecker(a, b), c)
        right = linalg.kronecker(a, linalg.kronecker(b, c))
        np.testing.assert_allclose(left, right, atol=1e-12)

    def test_overflow_cap(self):
        with pytest.raises(DimensionOverflow):
            linalg.kronecker(np.eye(300), np.eye(300), max_dim=1000)


def test_require_symmetric_rejects_asymmetric():
    m = np.array([[1.0, 2.0], [0.0, 1.0]])
    with pytest.raises(ValueError):
        linalg.require_symmetric(m)
