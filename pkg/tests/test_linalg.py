import numpy as np
import pytest

from mecq import linalg
from mecq.errors import DataError, NumericalError, ValidationError


def random_symmetric(n, seed):
    rng = np.random.default_rng(seed)
    a = rng.normal(size=(n, n))
    return 0.5 * (a + a.T)


class TestSymEig:
    def test_known_2x2(self):
        # [[2,1],[1,2]] has eigenvalues 3 and 1 with eigenvectors (1,1), (1,-1)
        w, v = linalg.sym_eig([[2.0, 1.0], [1.0, 2.0]])
        assert np.allclose(w, [3.0, 1.0], atol=1e-12)
        assert np.allclose(np.abs(v[:, 0]), np.sqrt(0.5), atol=1e-12)

    def test_diagonal_passthrough(self):
        w, v = linalg.sym_eig(np.diag([5.0, -2.0, 0.5]))
        assert np.allclose(w, [5.0, 0.5, -2.0])
        # columns follow the sorted eigenvalues
        assert np.allclose(np.abs(v), np.eye(3)[:, [0, 2, 1]])

    @pytest.mark.parametrize("n,seed", [(3, 0), (8, 1), (25, 2), (60, 3)])
    def test_reconstruction_and_orthonormality(self, n, seed):
        a = random_symmetric(n, seed)
        w, v = linalg.sym_eig(a)
        assert np.allclose(v @ np.diag(w) @ v.T, a, atol=1e-10)
        assert np.allclose(v.T @ v, np.eye(n), atol=1e-10)
        assert np.all(np.diff(w) <= 1e-12)  # descending

    def test_matches_lapack_eigenvalues(self):
        a = random_symmetric(40, 7)
        w, _ = linalg.sym_eig(a)
        assert np.allclose(w, np.linalg.eigvalsh(a)[::-1], atol=1e-9)

    def test_zero_matrix(self):
        w, v = linalg.sym_eig(np.zeros((4, 4)))
        assert np.all(w == 0.0) and np.allclose(v, np.eye(4))

    def test_rejects_nonsymmetric(self):
        with pytest.raises(ValidationError):
            linalg.sym_eig([[1.0, 2.0], [0.0, 1.0]])

    def test_rejects_nonfinite(self):
        with pytest.raises(ValidationError):
            linalg.sym_eig([[np.nan, 0.0], [0.0, 1.0]])

    def test_rejects_nonsquare(self):
        with pytest.raises(ValidationError):
            linalg.sym_eig(np.ones((2, 3)))


class TestGram:
    def test_entries_are_scaled_inner_products(self):
        rng = np.random.default_rng(0)
        z = rng.normal(size=(5, 3))
        g = linalg.gram(z, scale=0.25)
        for i in range(3):
            for j in range(3):
                assert abs(g[i, j] - 0.25 * float(z[:, i] @ z[:, j])) < 1e-12

    def test_output_symmetric_psd(self):
        z = np.random.default_rng(1).normal(size=(4, 6))
        g = linalg.gram(z)
        assert np.array_equal(g, g.T)
        assert np.linalg.eigvalsh(g).min() > -1e-10

    def test_rejects_bad_scale(self):
        with pytest.raises(ValidationError):
            linalg.gram(np.eye(2), scale=0.0)


class TestLogDet:
    def test_identity_gram(self):
        # det(I + I) = 2^n
        n = 5
        assert abs(linalg.logdet_plus_identity(np.eye(n)) - n * np.log(2.0)) < 1e-12

    @pytest.mark.parametrize("seed", range(5))
    def test_matches_lu_route(self, seed):
        # independent oracle: LU-based slogdet of I + G
        rng = np.random.default_rng(seed)
        z = rng.normal(size=(8, 12))
        g = linalg.gram(z, scale=0.1)
        sign, want = np.linalg.slogdet(np.eye(12) + g)
        assert sign == 1.0
        got = linalg.logdet_plus_identity(g)
        assert abs(got - want) < 1e-10 * max(1.0, abs(want))

    def test_clamps_roundoff_negatives(self):
        g = np.diag([1.0, -5e-11])
        got = linalg.logdet_plus_identity(g)
        assert abs(got - np.log(2.0)) < 1e-12

    def test_rejects_indefinite(self):
        with pytest.raises(NumericalError):
            linalg.logdet_plus_identity(np.diag([1.0, -0.5]))


class TestSpectralNorm:
    def test_diagonal(self):
        assert linalg.spectral_norm(np.diag([1.0, -3.0, 2.0])) == pytest.approx(3.0)

    def test_matches_svd(self):
        a = random_symmetric(12, 4)
        assert linalg.spectral_norm(a) == pytest.approx(
            np.linalg.norm(a, ord=2), abs=1e-10
        )


class TestPolyTrace:
    def test_single_power_matches_eigenvalue_sums(self):
        a = random_symmetric(6, 5)
        lam = np.linalg.eigvalsh(a)
        for k in (1, 2, 3, 5):
            want = float(np.sum(lam**k))
            assert linalg.poly_trace(a, {k: 1.0}) == pytest.approx(want, rel=1e-10)

    def test_linear_combination(self):
        a = random_symmetric(5, 6)
        got = linalg.poly_trace(a, {0: 2.0, 1: -1.0, 3: 0.5})
        lam = np.linalg.eigvalsh(a)
        want = 2.0 * 5 + -1.0 * lam.sum() + 0.5 * float(np.sum(lam**3))
        assert got == pytest.approx(want, rel=1e-10)

    def test_empty_coeffs(self):
        assert linalg.poly_trace(np.eye(3), {}) == 0.0

    def test_rejects_negative_power(self):
        with pytest.raises(ValidationError):
            linalg.poly_trace(np.eye(3), {-1: 1.0})


class TestMatrixIO:
    def test_round_trip(self, tmp_path):
        m = np.random.default_rng(9).normal(size=(7, 3))
        p = tmp_path / "m.bin"
        linalg.save_matrix(p, m)
        back = linalg.load_matrix(p)
        assert np.array_equal(back, m)

    def test_layout_is_stable(self, tmp_path):
        # magic + little-endian u32 dims + row-major float64 payload
        p = tmp_path / "m.bin"
        linalg.save_matrix(p, [[1.0, 2.0], [3.0, 4.0]])
        raw = p.read_bytes()
        assert raw[:4] == b"MECM"
        assert raw[4:12] == (2).to_bytes(4, "little") * 2
        assert np.frombuffer(raw[12:], dtype="<f8").tolist() == [1.0, 2.0, 3.0, 4.0]

    def test_bad_magic_rejected(self, tmp_path):
        p = tmp_path / "junk.bin"
        p.write_bytes(b"XXXX" + b"\x00" * 16)
        with pytest.raises(DataError):
            linalg.load_matrix(p)

    def test_truncation_rejected(self, tmp_path):
        p = tmp_path / "m.bin"
        linalg.save_matrix(p, np.ones((3, 3)))
        p.write_bytes(p.read_bytes()[:-8])
        with pytest.raises(DataError):
            linalg.load_matrix(p)
