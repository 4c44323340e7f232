"""
Spectral primitives against numpy.linalg and closed-form cases.
"""
import numpy as np
import pytest

from icl_lab.errors import DegenerateCloud, NotSymmetric
from icl_lab.linalg import (
    covariance,
    nuclear_norm,
    orthonormal_basis,
    pca,
    project_onto,
    projection_norm_ratios,
    svd,
    sym_eig,
)


def _rel_frob(a, b):
    return np.linalg.norm(a - b) / max(np.linalg.norm(b), 1e-300)


class TestSymEig:

    def test_random_symmetric_vs_numpy(self):
        rng = np.random.default_rng(0)
        for _ in range(200):
            d = int(rng.integers(1, 17))
            a = rng.standard_normal((d, d))
            m = a + a.T
            eig = sym_eig(m)
            recon = eig.eigenvectors @ np.diag(eig.eigenvalues) @ eig.eigenvectors.T
            assert _rel_frob(recon, m) <= 1e-8
            np.testing.assert_allclose(eig.eigenvalues, np.sort(np.linalg.eigvalsh(m))[::-1],
                                       atol=1e-8 * max(1.0, np.abs(m).max()))

    def test_identity(self):
        eig = sym_eig(np.eye(5))
        np.testing.assert_allclose(eig.eigenvalues, np.ones(5), atol=1e-12)

    def test_diagonal_descending(self):
        eig = sym_eig(np.diag([1.0, 5.0, 3.0]))
        np.testing.assert_allclose(eig.eigenvalues, [5.0, 3.0, 1.0], atol=1e-12)
        np.testing.assert_allclose(np.abs(eig.eigenvectors[:, 0]), [0.0, 1.0, 0.0], atol=1e-12)

    def test_sign_convention(self):
        rng = np.random.default_rng(3)
        a = rng.standard_normal((6, 6))
        vectors = sym_eig(a @ a.T).eigenvectors
        for j in range(6):
            first = vectors[np.flatnonzero(np.abs(vectors[:, j]) > 1e-10)[0], j]
            assert first > 0

    def test_orthonormal_vectors(self):
        rng = np.random.default_rng(4)
        a = rng.standard_normal((12, 12))
        V = sym_eig(a + a.T).eigenvectors
        np.testing.assert_allclose(V.T @ V, np.eye(12), atol=1e-10)

    def test_rank_one(self):
        v = np.array([1.0, 2.0, 3.0])
        eigs = sym_eig(np.outer(v, v)).eigenvalues
        assert eigs[0] == pytest.approx(14.0, abs=1e-10)
        assert np.all(np.abs(eigs[1:]) < 1e-10)

    def test_lapack_switch_agrees(self):
        rng = np.random.default_rng(5)
        a = rng.standard_normal((9, 9))
        m = a @ a.T
        np.testing.assert_allclose(sym_eig(m).eigenvalues, sym_eig(m, method="lapack").eigenvalues, atol=1e-9)

    def test_rejects_asymmetric(self):
        with pytest.raises(NotSymmetric):
            sym_eig(np.array([[1.0, 2.0], [0.0, 1.0]]))

    def test_rejects_non_square(self):
        with pytest.raises(NotSymmetric):
            sym_eig(np.ones((2, 3)))


class TestSvd:

    @pytest.mark.parametrize("shape", [(6, 3), (3, 6), (5, 5)])
    def test_reconstruction(self, shape):
        rng = np.random.default_rng(sum(shape))
        a = rng.standard_normal(shape)
        U, S, V = svd(a)
        assert _rel_frob(U @ np.diag(S) @ V.T, a) <= 1e-8
        np.testing.assert_allclose(S, np.linalg.svd(a, compute_uv=False), atol=1e-9)
        assert np.all(np.diff(S) <= 1e-12)

    def test_rank_deficient_keeps_orthonormal_u(self):
        rng = np.random.default_rng(7)
        a = rng.standard_normal((6, 2)) @ rng.standard_normal((2, 4))
        U, S, V = svd(a)
        assert np.sum(S > 1e-8) == 2
        assert U.shape == (6, 4)
        np.testing.assert_allclose(U[:, :2].T @ U[:, :2], np.eye(2), atol=1e-8)
        np.testing.assert_allclose(np.linalg.norm(U, axis=0), np.ones(4), atol=1e-8)
        assert _rel_frob(U @ np.diag(S) @ V.T, a) <= 1e-8

    def test_nuclear_norm_of_psd_is_trace(self):
        rng = np.random.default_rng(8)
        for d in (1, 4, 16):
            a = rng.standard_normal((d, d))
            psd = a @ a.T
            assert abs(nuclear_norm(psd) - np.trace(psd)) <= 1e-8 * np.trace(psd)

    def test_nuclear_norm_diagonal(self):
        assert nuclear_norm(np.diag([3.0, -4.0])) == pytest.approx(7.0, abs=1e-12)


class TestProjection:

    def test_orthonormal_basis_rank(self):
        a = np.outer([1.0, 2.0, 2.0], [1.0, 1.0])
        basis = orthonormal_basis(a)
        assert basis.shape == (3, 1)
        np.testing.assert_allclose(np.abs(basis[:, 0]), np.array([1.0, 2.0, 2.0]) / 3.0, atol=1e-12)

    def test_zero_matrix_has_empty_basis(self):
        assert orthonormal_basis(np.zeros((4, 2))).shape == (4, 0)

    def test_norm_ratios(self):
        basis = np.eye(3)[:, :1]
        vectors = np.array([[2.0, 0.0, 1.0], [0.0, 3.0, 1.0], [0.0, 0.0, 0.0]])
        np.testing.assert_allclose(projection_norm_ratios(vectors, basis), [1.0, 0.0, 1.0 / np.sqrt(2.0)],
                                   atol=1e-12)

    def test_norm_ratios_against_explicit_projector(self):
        rng = np.random.default_rng(8)
        raw = rng.standard_normal((8, 4))
        basis = np.zeros_like(raw)
        for j in range(4):
            v = raw[:, j] - basis[:, :j] @ (basis[:, :j].T @ raw[:, j])
            basis[:, j] = v / np.linalg.norm(v)
        vectors = rng.standard_normal((8, 2))
        P = basis @ basis.T
        expected = np.linalg.norm(P @ vectors, axis=0) / np.linalg.norm(vectors, axis=0)
        np.testing.assert_allclose(projection_norm_ratios(vectors, basis), expected, atol=1e-8)
        np.testing.assert_allclose(projection_norm_ratios(vectors, orthonormal_basis(raw)), expected, atol=1e-8)

    def test_project_onto(self):
        basis = np.eye(3)[:, :2]
        np.testing.assert_allclose(project_onto(basis, np.array([[1.0], [2.0], [3.0]])).ravel(), [1.0, 2.0, 0.0])


class TestCovariancePca:

    def test_covariance_matches_numpy(self):
        rng = np.random.default_rng(9)
        x = rng.standard_normal((50, 4))
        np.testing.assert_allclose(covariance(x), np.cov(x, rowvar=False), atol=1e-12)

    def test_single_point_is_degenerate(self):
        with pytest.raises(DegenerateCloud):
            covariance(np.ones((1, 3)))

    def test_collinear_cloud(self):
        cloud = np.array([[0.0, 0.0], [1.0, 0.0], [3.0, 0.0]])
        result = pca(cloud, 1)
        np.testing.assert_allclose(result.components[0], [1.0, 0.0], atol=1e-12)
        assert result.explained_ratio[0] == pytest.approx(1.0, abs=1e-12)

    def test_zero_variance_cloud(self):
        with pytest.raises(DegenerateCloud):
            pca(np.ones((5, 3)), 1)
