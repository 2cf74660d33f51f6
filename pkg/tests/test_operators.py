from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from finite_qkd.operators import (DimensionError, HermitianOperator, block_diag, coherent_overlap, eigendecompose,
                                  hermitian, max_eigenvalue, pauli, tensor_product)
from finite_qkd.pmqkd import sdp_problem
from finite_qkd.settings import TOL

from conftest import random_hermitian

complex_amp = st.complex_numbers(max_magnitude=2.0, allow_nan=False, allow_infinity=False)


def fock_overlap(alpha: complex, beta: complex, cutoff: int = 200) -> complex:
    """<alpha|beta> by summing the Fock expansion term by term."""
    total = 0j
    term = 1.0 + 0j  # (conj(alpha) beta)^n / n!
    for n in range(cutoff):
        if n:
            term *= np.conj(alpha) * beta / n
        total += term
    return math.exp(-(abs(alpha) ** 2 + abs(beta) ** 2) / 2) * total


class TestHermitianOperator:
    def test_rejects_non_hermitian(self):
        with pytest.raises(ValueError):
            HermitianOperator(np.array([[0, 1], [0, 0]]))

    def test_rejects_non_square(self):
        with pytest.raises(DimensionError):
            HermitianOperator(np.zeros((2, 3)))

    def test_entries_read_only_and_symmetrized(self):
        m = np.array([[1, 1 + 1e-14], [1, 2]], dtype=complex)
        op = HermitianOperator(m)
        assert np.array_equal(op.entries, op.entries.conj().T)
        with pytest.raises(ValueError):
            op.entries[0, 0] = 3

    def test_block_coupling_rejected(self):
        m = np.ones((2, 2))
        with pytest.raises(ValueError):
            HermitianOperator(m, ((0, 0, 1), (1, 1, 2)))

    def test_blocks_must_tile(self):
        with pytest.raises(DimensionError):
            HermitianOperator(np.eye(3), ((0, 0, 1), (1, 2, 3)))

    def test_block_diag_and_lookup(self):
        op = block_diag([np.eye(2), 2 * np.eye(3)], labels=[5, 7])
        assert op.dim == 5
        assert np.allclose(op.block(7), 2 * np.eye(3))
        with pytest.raises(KeyError):
            op.block(0)

    def test_arithmetic(self):
        a = hermitian(pauli("Z"))
        b = hermitian(pauli("X"))
        assert np.allclose((a + b).entries, pauli("Z") + pauli("X"))
        assert np.allclose((2 * a - b).entries, 2 * pauli("Z") - pauli("X"))
        assert a.trace() == 0.0
        assert a.expectation(np.diag([1.0, 0.0])) == 1.0


class TestTensorProduct:
    def test_identity(self):
        i2 = hermitian(np.eye(2))
        assert np.array_equal(tensor_product(i2, i2).entries, np.eye(4))

    def test_zz_spectrum(self):
        z = hermitian(pauli("Z"))
        w = np.linalg.eigvalsh(tensor_product(z, z).entries)
        assert np.allclose(np.sort(w), [-1, -1, 1, 1])

    def test_yy_traceless(self):
        y = hermitian(pauli("Y"))
        assert abs(tensor_product(y, y).trace()) == 0.0

    @given(st.integers(1, 5), st.integers(1, 5), st.integers(0, 2 ** 32 - 1))
    def test_trace_multiplicative(self, da, db, seed):
        rng = np.random.default_rng(seed)
        a, b = hermitian(random_hermitian(rng, da)), hermitian(random_hermitian(rng, db))
        lhs = tensor_product(a, b).trace()
        rhs = a.trace() * b.trace()
        assert abs(lhs - rhs) <= 1e-10 * max(1.0, abs(rhs))

    def test_dimension_limit(self):
        big = hermitian(np.eye(100))
        with pytest.raises(DimensionError):
            tensor_product(big, big)


class TestCoherentOverlap:
    def test_normalized(self):
        assert coherent_overlap(0.3 + 0.4j, 0.3 + 0.4j) == pytest.approx(1.0, abs=1e-15)

    def test_antipodal(self):
        mu = 0.5
        assert coherent_overlap(math.sqrt(mu), -math.sqrt(mu)).real == pytest.approx(math.exp(-1), abs=1e-15)

    @pytest.mark.parametrize("mu1,mu2", [(0.1, 0.2), (0.5, 0.05), (1.3, 0.7)])
    def test_against_fock_series(self, mu1, mu2):
        a, b = math.sqrt(mu1), 1j * math.sqrt(mu2)
        closed = math.exp(-(mu1 + mu2) / 2) * np.exp(1j * math.sqrt(mu1 * mu2))
        assert coherent_overlap(a, b) == pytest.approx(closed, abs=1e-14)
        assert coherent_overlap(a, b) == pytest.approx(fock_overlap(a, b), abs=1e-13)

    @given(complex_amp, complex_amp)
    def test_conjugate_symmetry(self, a, b):
        assert coherent_overlap(a, b) == np.conj(coherent_overlap(b, a))


class TestEigen:
    @given(st.integers(1, 32), st.integers(0, 2 ** 32 - 1))
    def test_reconstruction_and_orthonormality(self, n, seed):
        rng = np.random.default_rng(seed)
        a = random_hermitian(rng, n, scale=rng.uniform(0.01, 100))
        es = eigendecompose(a)
        err = np.max(np.abs(es.reconstruct() - a))
        assert err <= TOL.reconstruction_rtol * (1 + np.max(np.abs(a)))
        assert np.max(np.abs(es.eigenvectors.conj().T @ es.eigenvectors - np.eye(n))) <= TOL.unitary_atol
        assert np.all(np.diff(es.eigenvalues) >= 0)

    def test_reconstruction_bulk(self):
        rng = np.random.default_rng(7)
        for _ in range(1000):
            n = int(rng.integers(1, 33))
            a = random_hermitian(rng, n)
            es = eigendecompose(a)
            assert np.max(np.abs(es.reconstruct() - a)) <= 1e-10 * (1 + np.max(np.abs(a)))

    def test_phase_convention(self):
        rng = np.random.default_rng(3)
        es = eigendecompose(random_hermitian(rng, 6))
        for col in es.eigenvectors.T:
            first = col[np.flatnonzero(np.abs(col) > 1e-8)[0]]
            assert first.imag == pytest.approx(0.0, abs=1e-15) and first.real > 0

    def test_max_eigenvalue_zero(self):
        r = max_eigenvalue(np.zeros((3, 3)))
        assert r.value == 0.0 and r.radius <= 1e-14

    def test_max_eigenvalue_diag(self):
        r = max_eigenvalue(np.diag([-1.0, -3.0]))
        assert r.value == pytest.approx(-1.0, abs=1e-15) and r.radius <= 1e-12

    @given(st.integers(1, 20), st.integers(0, 2 ** 32 - 1))
    def test_max_eigenvalue_encloses_truth(self, n, seed):
        rng = np.random.default_rng(seed)
        a = random_hermitian(rng, n)
        r = max_eigenvalue(a)
        exact = float(np.linalg.eigvalsh(a)[-1])
        assert abs(r.value - exact) <= r.radius + 1e-13
        assert r.upper >= exact - 1e-15

    def test_phase_error_operator_top_eigenvalue(self):
        # (I - Y (x) Y)/2 has eigenvalues {0, 1}; the 1/4 basis weight scales it.
        e = sdp_problem(0.05, 0.05, np.zeros(4)).objective
        r = max_eigenvalue(e)
        assert r.value == pytest.approx(0.25, abs=1e-12)
        w = np.linalg.eigvalsh(e.entries)
        assert np.sum(np.isclose(w, 0.25, atol=1e-12)) == 4
