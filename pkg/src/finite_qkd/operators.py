"""Dense Hermitian operators, tensor products, eigensolves and coherent overlaps.

All matrices here are small (at most a few dozen rows), so everything is
stored densely as complex128 numpy arrays.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .settings import TOL


class DimensionError(ValueError):
    pass


class EigenSolverError(RuntimeError):
    pass


Block = tuple[int, int, int]  # (label, start, stop)


@dataclass(frozen=True, eq=False)
class HermitianOperator:
    """A finite-dimensional Hermitian matrix, optionally block diagonal.

    Parameters
    ----------
    entries : array_like
        Square complex matrix. Stored as a read-only complex128 copy.
    blocks : sequence of (label, start, stop), optional
        Contiguous index ranges forming a block-diagonal partition.  Entries
        coupling two distinct blocks must be exactly zero.
    """

    entries: np.ndarray
    blocks: tuple[Block, ...] | None = field(default=None)

    def __post_init__(self):
        m = np.array(self.entries, dtype=complex, copy=True)
        if m.ndim != 2 or m.shape[0] != m.shape[1]:
            raise DimensionError(f"operator must be square, got shape {m.shape}")
        if m.shape[0] > TOL.max_dim:
            raise DimensionError(f"dimension {m.shape[0]} exceeds max_dim {TOL.max_dim}")
        dev = np.max(np.abs(m - m.conj().T)) if m.size else 0.0
        if dev > TOL.hermitian_atol:
            raise ValueError(f"matrix is not Hermitian (max deviation {dev:.3e})")
        # symmetrize so downstream eigensolvers see an exactly Hermitian array
        m = 0.5 * (m + m.conj().T)
        if self.blocks is not None:
            blocks = tuple((int(l), int(a), int(b)) for l, a, b in self.blocks)
            _check_blocks(m, blocks)
            object.__setattr__(self, "blocks", blocks)
        m.setflags(write=False)
        object.__setattr__(self, "entries", m)

    @property
    def dim(self) -> int:
        return self.entries.shape[0]

    def block(self, label: int) -> np.ndarray:
        for l, a, b in self.blocks or ():
            if l == label:
                return self.entries[a:b, a:b]
        raise KeyError(label)

    def __add__(self, other: HermitianOperator) -> HermitianOperator:
        return HermitianOperator(self.entries + other.entries, self.blocks)

    def __sub__(self, other: HermitianOperator) -> HermitianOperator:
        return HermitianOperator(self.entries - other.entries, self.blocks)

    def __mul__(self, c: float) -> HermitianOperator:
        return HermitianOperator(float(c) * self.entries, self.blocks)

    __rmul__ = __mul__

    def trace(self) -> float:
        return float(np.trace(self.entries).real)

    def expectation(self, rho: np.ndarray) -> float:
        """tr(self @ rho) for Hermitian rho."""
        return float(np.real(np.sum(self.entries * np.asarray(rho).T)))


def _check_blocks(m: np.ndarray, blocks: Sequence[Block]) -> None:
    n = m.shape[0]
    ranges = sorted((a, b) for _, a, b in blocks)
    pos = 0
    for a, b in ranges:
        if a != pos or b <= a:
            raise DimensionError(f"blocks must tile [0, {n}) contiguously")
        pos = b
    if pos != n:
        raise DimensionError(f"blocks cover [0, {pos}) but dim is {n}")
    mask = np.ones_like(m, dtype=bool)
    for _, a, b in blocks:
        mask[a:b, a:b] = False
    if np.any(m[mask] != 0):
        raise ValueError("entries couple distinct blocks")


def hermitian(entries, blocks=None) -> HermitianOperator:
    return HermitianOperator(np.asarray(entries), blocks)


def tensor_product(a: HermitianOperator, b: HermitianOperator) -> HermitianOperator:
    """Kronecker product with row index (i1, i2) -> i1 * dim(b) + i2."""
    if a.dim * b.dim > TOL.max_dim:
        raise DimensionError(f"tensor product dimension {a.dim * b.dim} exceeds {TOL.max_dim}")
    return HermitianOperator(np.kron(a.entries, b.entries))


def block_diag(parts: Sequence[np.ndarray], labels: Sequence[int] | None = None) -> HermitianOperator:
    """Assemble a block-diagonal operator from square blocks."""
    labels = list(range(len(parts))) if labels is None else list(labels)
    sizes = [np.asarray(p).shape[0] for p in parts]
    n = sum(sizes)
    m = np.zeros((n, n), dtype=complex)
    blocks = []
    pos = 0
    for lab, p, s in zip(labels, parts, sizes):
        m[pos:pos + s, pos:pos + s] = p
        blocks.append((lab, pos, pos + s))
        pos += s
    return HermitianOperator(m, tuple(blocks))


def coherent_overlap(alpha: complex, beta: complex) -> complex:
    """Inner product <alpha|beta> of two coherent states."""
    alpha, beta = complex(alpha), complex(beta)
    return complex(np.exp(-(abs(alpha) ** 2 + abs(beta) ** 2) / 2 + alpha.conjugate() * beta))


@dataclass(frozen=True)
class EigenSystem:
    eigenvalues: np.ndarray
    eigenvectors: np.ndarray

    def reconstruct(self) -> np.ndarray:
        v = self.eigenvectors
        return (v * self.eigenvalues) @ v.conj().T


def eigendecompose(a: HermitianOperator | np.ndarray) -> EigenSystem:
    """Hermitian eigendecomposition with a reproducible phase convention.

    Eigenvalues come back ascending.  Each eigenvector is rotated so that its
    first component of non-negligible magnitude is real and positive.
    """
    m = a.entries if isinstance(a, HermitianOperator) else np.asarray(a, dtype=complex)
    try:
        w, v = np.linalg.eigh(m)
    except np.linalg.LinAlgError as exc:
        raise EigenSolverError(f"eigh failed on {m.shape[0]}x{m.shape[0]} matrix: {exc}") from exc
    v = v.copy()
    for j in range(v.shape[1]):
        col = v[:, j]
        idx = np.flatnonzero(np.abs(col) > 1e-8)
        if idx.size:
            ph = col[idx[0]] / abs(col[idx[0]])
            v[:, j] = col / ph
    return EigenSystem(w, v)


@dataclass(frozen=True)
class CertifiedEigenvalue:
    value: float
    radius: float

    @property
    def upper(self) -> float:
        return self.value + self.radius


def max_eigenvalue(a: HermitianOperator | np.ndarray) -> CertifiedEigenvalue:
    """Largest eigenvalue with a rigorous enclosure radius.

    With computed eigenpairs (w, V) the residual R = A V - V diag(w) gives
    A = V diag(w) V^-1 + R V^-1, so by Bauer-Fike every eigenvalue of A lies
    within kappa(V) ||V^-1|| ||R|| of some w_i.  A floating-point allowance for
    forming R is added on top.
    """
    m = a.entries if isinstance(a, HermitianOperator) else np.asarray(a, dtype=complex)
    n = m.shape[0]
    if n == 0:
        raise DimensionError("empty operator")
    es = eigendecompose(m)
    w, v = es.eigenvalues, es.eigenvectors
    r = m @ v - v * w
    res = np.linalg.norm(r, "fro")
    orth = np.linalg.norm(v.conj().T @ v - np.eye(n), 2)
    if orth >= 0.5:
        raise EigenSolverError(f"eigenvectors far from orthonormal (defect {orth:.2e})")
    inv_norm = 1.0 / np.sqrt(1.0 - orth)
    kappa = np.sqrt((1.0 + orth) / (1.0 - orth))
    u = np.finfo(float).eps
    # rounding in m @ v and v * w: each entry is a length-n dot product
    fp = 2.0 * n * u * (np.linalg.norm(m, "fro") + np.max(np.abs(w))) * np.sqrt(n)
    radius = kappa * inv_norm * (res + fp)
    return CertifiedEigenvalue(float(w[-1]), float(radius))


def pauli(name: str) -> np.ndarray:
    return {
        "I": np.eye(2, dtype=complex),
        "X": np.array([[0, 1], [1, 0]], dtype=complex),
        "Y": np.array([[0, -1j], [1j, 0]], dtype=complex),
        "Z": np.array([[1, 0], [0, -1]], dtype=complex),
    }[name]
