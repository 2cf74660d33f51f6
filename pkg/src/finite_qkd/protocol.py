"""Finite data model of prepare-and-measure and MDI protocol instances.

States enter only through their Gram matrices.  The ancilla register of an
MDI instance is indexed ``i * d_B + j``; a prepare-and-measure instance uses
the same code path with a trivial announcement register.

Gram convention: ``gram[s, t] = <psi_s|psi_t>``.  This is exactly the ancilla
marginal of the renormalized density matrix, so ``p = tr(P G)`` holds for the
honest state by construction.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from enum import Enum
from typing import Iterable, Mapping, Sequence

import numpy as np

from .operators import HermitianOperator, block_diag, eigendecompose
from .settings import TOL


class ProtocolKind(str, Enum):
    PREPARE_AND_MEASURE = "PrepareAndMeasure"
    MDI = "MDI"


class ProtocolError(ValueError):
    pass


def _check_prob_vector(name: str, v: np.ndarray) -> None:
    if np.any(v < 0):
        raise ProtocolError(f"{name} has negative entries")
    if abs(v.sum() - 1.0) > TOL.probability_sum_atol:
        raise ProtocolError(f"{name} sums to {v.sum():.15g}, expected 1")


def _check_gram(name: str, g: np.ndarray) -> None:
    if g.ndim != 2 or g.shape[0] != g.shape[1]:
        raise ProtocolError(f"{name} must be square")
    if np.max(np.abs(g - g.conj().T)) > TOL.hermitian_atol:
        raise ProtocolError(f"{name} is not Hermitian")
    if np.max(np.abs(np.diag(g) - 1.0)) > TOL.hermitian_atol:
        raise ProtocolError(f"{name} must have unit diagonal")
    if np.linalg.eigvalsh(0.5 * (g + g.conj().T)).min() < -TOL.gram_psd_atol:
        raise ProtocolError(f"{name} is not positive semidefinite")


@dataclass(frozen=True, eq=False)
class ProtocolInstance:
    """Protocol data reduced to probabilities and Gram values.

    ``p_test`` is indexed ``[i, y_or_j, outcome]`` where the last axis runs
    over Bob's POVM outcomes (prepare-and-measure) or Charlie's announcements
    (MDI).
    """

    kind: ProtocolKind
    tau_A: np.ndarray
    tau_B: np.ndarray
    gram_A: np.ndarray
    p_test: np.ndarray
    aux_probs: np.ndarray
    gram_B: np.ndarray | None = None
    announcement_dim: int = 1

    def __post_init__(self):
        kind = ProtocolKind(self.kind)
        object.__setattr__(self, "kind", kind)
        for name in ("tau_A", "tau_B", "aux_probs"):
            v = np.asarray(getattr(self, name), dtype=float)
            _check_prob_vector(name, v)
            object.__setattr__(self, name, v)
        ga = np.asarray(self.gram_A, dtype=complex)
        _check_gram("gram_A", ga)
        if ga.shape[0] != self.tau_A.size:
            raise ProtocolError("gram_A size does not match tau_A")
        object.__setattr__(self, "gram_A", ga)
        if kind is ProtocolKind.MDI:
            if self.gram_B is None:
                raise ProtocolError("MDI instances need gram_B")
            gb = np.asarray(self.gram_B, dtype=complex)
            _check_gram("gram_B", gb)
            if gb.shape[0] != self.tau_B.size:
                raise ProtocolError("gram_B size does not match tau_B")
            object.__setattr__(self, "gram_B", gb)
        pt = np.asarray(self.p_test, dtype=float)
        # the last axis counts announcements (MDI) or Bob's POVM outcomes (prepare-and-measure)
        n_last = self.announcement_dim if kind is ProtocolKind.MDI else (pt.shape[-1] if pt.ndim == 3 else -1)
        if pt.shape != (self.d_A, self.tau_B.size, n_last):
            raise ProtocolError(f"p_test shape {pt.shape} != {(self.d_A, self.tau_B.size, n_last)}")
        if np.any(pt < 0) or np.any(pt > 1):
            raise ProtocolError("p_test entries must lie in [0, 1]")
        object.__setattr__(self, "p_test", pt)

    @property
    def d_A(self) -> int:
        return self.tau_A.size

    @property
    def d_B(self) -> int:
        return self.tau_B.size

    @property
    def ancilla_dim(self) -> int:
        return self.d_A * self.d_B if self.kind is ProtocolKind.MDI else self.d_A

    def ancilla_weights(self) -> np.ndarray:
        """Emission probabilities indexed like the ancilla register."""
        if self.kind is ProtocolKind.MDI:
            return np.kron(self.tau_A, self.tau_B)
        return self.tau_A

    def ancilla_gram(self) -> np.ndarray:
        if self.kind is ProtocolKind.MDI:
            return np.kron(self.gram_A, self.gram_B)
        return self.gram_A

    def to_dict(self) -> dict:
        def cplx(m):
            return None if m is None else [[[z.real, z.imag] for z in row] for row in np.asarray(m)]

        return {
            "kind": self.kind.value,
            "tau_A": self.tau_A.tolist(),
            "tau_B": self.tau_B.tolist(),
            "gram_A": cplx(self.gram_A),
            "gram_B": cplx(self.gram_B),
            "announcement_dim": self.announcement_dim,
            "p_test": self.p_test.tolist(),
            "aux_probs": self.aux_probs.tolist(),
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> ProtocolInstance:
        def cplx(m):
            if m is None:
                return None
            a = np.asarray(m, dtype=float)
            return a[..., 0] + 1j * a[..., 1]

        return cls(
            kind=ProtocolKind(d["kind"]),
            tau_A=np.asarray(d["tau_A"]),
            tau_B=np.asarray(d["tau_B"]),
            gram_A=cplx(d["gram_A"]),
            gram_B=cplx(d.get("gram_B")),
            announcement_dim=int(d.get("announcement_dim", 1)),
            p_test=np.asarray(d["p_test"]),
            aux_probs=np.asarray(d["aux_probs"]),
        )

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    @classmethod
    def from_json(cls, text: str) -> ProtocolInstance:
        return cls.from_dict(json.loads(text))


@dataclass(frozen=True, eq=False)
class AnnouncementScheme:
    """Signal/test split and key reconciliation over (i, j, alpha, xi).

    ``signal[i, j, a, xi]`` is True when the tuple lands in the signal set;
    ``reconcile`` holds the sifted bit there and -1 elsewhere.  A boolean mask
    makes the signal and test sets disjoint and exhaustive by construction.
    """

    signal: np.ndarray
    reconcile: np.ndarray

    def __post_init__(self):
        s = np.asarray(self.signal, dtype=bool)
        r = np.asarray(self.reconcile, dtype=int)
        if s.shape != r.shape or s.ndim != 4:
            raise ProtocolError("signal and reconcile must share a 4-axis shape")
        if np.any(~np.isin(r[s], (0, 1))):
            raise ProtocolError("signal tuples must reconcile to a bit")
        if np.any(r[~s] != -1):
            raise ProtocolError("test tuples must not carry a reconciled bit")
        object.__setattr__(self, "signal", s)
        object.__setattr__(self, "reconcile", r)

    def test_labels(self) -> list[tuple[int, int, int, int]]:
        return [tuple(int(x) for x in idx) for idx in np.argwhere(~self.signal)]

    def test_probabilities(self, aux_probs: Sequence[float]) -> np.ndarray:
        """p_test(i, j, xi): total auxiliary probability of the test set."""
        aux = np.asarray(aux_probs, dtype=float)
        return np.einsum("ijax,a->ijx", (~self.signal).astype(float), aux)


@dataclass(frozen=True, eq=False)
class ConstraintSet:
    P_ops: tuple[HermitianOperator, ...]
    p_vals: np.ndarray
    Q_ops: tuple[HermitianOperator, ...]
    q_nom: np.ndarray

    def __post_init__(self):
        if len(self.P_ops) != len(self.p_vals):
            raise ProtocolError("P_ops and p_vals lengths differ")
        if len(self.Q_ops) != len(self.q_nom):
            raise ProtocolError("Q_ops and q_nom lengths differ")
        object.__setattr__(self, "p_vals", np.asarray(self.p_vals, dtype=float))
        object.__setattr__(self, "q_nom", np.asarray(self.q_nom, dtype=float))
        for q in self.Q_ops:
            if q.blocks is None:
                raise ProtocolError("Q operators must carry the announcement block structure")


@dataclass(frozen=True, eq=False)
class PhaseErrorSpec:
    E_obs_blocks: tuple[np.ndarray, ...]
    E_ph: HermitianOperator

    def __post_init__(self):
        for x, blk in enumerate(self.E_obs_blocks):
            w = np.linalg.eigvalsh(np.asarray(blk))
            if w.size and (w.min() < -TOL.gram_psd_atol or w.max() > 1 + TOL.gram_psd_atol):
                raise ProtocolError(f"observed phase-error block {x} is not a POVM element")


def renormalize(op: np.ndarray | HermitianOperator, weights: Sequence[float], direction: str = "forward",
                trailing_dim: int = 1) -> np.ndarray:
    """Apply the renormalization map (or its inverse) on the ancilla factor.

    ``op`` acts on ancilla (dimension ``len(weights)``) tensored with a
    trailing factor of dimension ``trailing_dim`` that is left untouched.  The
    ancilla indices are transposed and element (s, t) is divided
    (``forward``) or multiplied (``inverse``) by sqrt(w_s w_t).  For MDI
    instances pass ``np.kron(tau_A, tau_B)`` as the weights.
    """
    m = op.entries if isinstance(op, HermitianOperator) else np.asarray(op, dtype=complex)
    w = np.asarray(weights, dtype=float)
    d = w.size
    if m.shape != (d * trailing_dim, d * trailing_dim):
        raise ProtocolError(f"operator shape {m.shape} incompatible with ancilla {d} x {trailing_dim}")
    if direction == "forward":
        zero = np.flatnonzero(w <= 0)
        if zero.size:
            raise ProtocolError(f"forward renormalization needs positive weights; index {int(zero[0])} is zero")
        scale = 1.0 / np.sqrt(np.outer(w, w))
    elif direction == "inverse":
        scale = np.sqrt(np.outer(w, w))
    else:
        raise ValueError(f"unknown direction {direction!r}")
    t = m.reshape(d, trailing_dim, d, trailing_dim)
    # partial transpose on the ancilla: (s, b; t, b') <- (t, b; s, b')
    t = t.transpose(2, 1, 0, 3) * scale[:, None, :, None]
    return t.reshape(d * trailing_dim, d * trailing_dim)


def elementary_pair_operator(dim: int, s: int, t: int) -> np.ndarray:
    """Symmetrized (s >= t) or anti-symmetrized (s < t) matrix unit."""
    m = np.zeros((dim, dim), dtype=complex)
    if s >= t:
        m[s, t] += 0.5
        m[t, s] += 0.5
    else:
        m[s, t] += 0.5 / 1j
        m[t, s] -= 0.5 / 1j
    return m


def elementary_pair_value(gram: np.ndarray, s: int, t: int) -> float:
    """tr(P_{s,t} gram): Re gram[s, t] for s >= t, Im gram[t, s] for s < t."""
    return float(gram[s, t].real) if s >= t else float(gram[t, s].imag)


def build_inner_product_constraints(instance: ProtocolInstance, nu_coeffs: Sequence[Mapping[tuple[int, int], float]]
                                    ) -> tuple[list[HermitianOperator], np.ndarray]:
    """Combine elementary pair constraints into (P_k, p_k).

    ``nu_coeffs[k]`` maps an ancilla index pair ``(s, t)`` to its coefficient.
    """
    dim = instance.ancilla_dim
    gram = instance.ancilla_gram()
    ops, vals = [], []
    for k, nu in enumerate(nu_coeffs):
        m = np.zeros((dim, dim), dtype=complex)
        v = 0.0
        for (s, t), c in nu.items():
            if not (0 <= s < dim and 0 <= t < dim):
                raise ProtocolError(f"nu[{k}] references pair ({s}, {t}) outside ancilla dimension {dim}")
            m += c * elementary_pair_operator(dim, s, t)
            v += c * elementary_pair_value(gram, s, t)
        ops.append(HermitianOperator(m))
        vals.append(v)
    return ops, np.asarray(vals)


def build_observation_constraints(instance: ProtocolInstance, beta_coeffs: np.ndarray,
                                  povms: Sequence[Sequence[np.ndarray]] | None = None) -> list[HermitianOperator]:
    """Q_l = sum beta[l, i, j, x] * Q_{x, i, j}, block diagonal over x.

    MDI: Q_{x,i,j} = |ij><ij| on block x.  Prepare-and-measure: pass Bob's
    POVMs as ``povms[y][b]``; Q_{b,i|y} = |i><i| (x) Gamma^b_y in a single block.
    Terms with p_test = 0 are dropped.
    """
    beta = np.asarray(beta_coeffs, dtype=float)
    shape = instance.p_test.shape
    if beta.shape[1:] != shape:
        raise ProtocolError(f"beta shape {beta.shape[1:]} does not match p_test {shape}")
    out = []
    if instance.kind is ProtocolKind.MDI:
        da = instance.ancilla_dim
        for bl in beta:
            blocks = [np.zeros((da, da), dtype=complex) for _ in range(instance.announcement_dim)]
            for i, j, x in zip(*np.nonzero(bl)):
                if instance.p_test[i, j, x] > 0:
                    s = i * instance.d_B + j
                    blocks[x][s, s] += bl[i, j, x]
            out.append(block_diag(blocks))
        return out
    if povms is None:
        raise ProtocolError("prepare-and-measure observation constraints need Bob's POVMs")
    db = np.asarray(povms[0][0]).shape[0]
    for bl in beta:
        m = np.zeros((instance.d_A * db, instance.d_A * db), dtype=complex)
        for i, y, b in zip(*np.nonzero(bl)):
            if instance.p_test[i, y, b] > 0:
                proj = np.zeros((instance.d_A, instance.d_A))
                proj[i, i] = 1.0
                m += bl[i, y, b] * np.kron(proj, np.asarray(povms[y][b]))
        out.append(block_diag([m]))
    return out


def build_phase_error_operator(instance: ProtocolInstance, obs_blocks: Sequence[np.ndarray],
                               trailing_dim: int = 1) -> PhaseErrorSpec:
    """Renormalize each per-announcement block and stack them block-diagonally.

    Each block acts on ancilla (x) trailing factor (Bob's system for
    prepare-and-measure, trivial for MDI).
    """
    n = instance.ancilla_dim * trailing_dim
    if len(obs_blocks) != instance.announcement_dim:
        raise ProtocolError(f"expected {instance.announcement_dim} blocks, got {len(obs_blocks)}")
    blocks = []
    for x, blk in enumerate(obs_blocks):
        b = np.asarray(blk, dtype=complex)
        if b.shape != (n, n):
            raise ProtocolError(f"block {x} has shape {b.shape}, expected {(n, n)}")
        blocks.append(renormalize(b, instance.ancilla_weights(), "inverse", trailing_dim))
    return PhaseErrorSpec(tuple(np.asarray(b) for b in obs_blocks), block_diag(blocks))


def aggregate_test_counts(instance: ProtocolInstance, beta_coeffs: np.ndarray, raw_counts: np.ndarray) -> np.ndarray:
    """N_l = sum beta * N_test / (tau_A tau_B p_test)."""
    beta = np.asarray(beta_coeffs, dtype=float)
    counts = np.asarray(raw_counts, dtype=float)
    if counts.shape != instance.p_test.shape:
        raise ProtocolError(f"counts shape {counts.shape} != {instance.p_test.shape}")
    if np.any(counts < 0):
        raise ProtocolError("counts must be nonnegative")
    denom = instance.tau_A[:, None, None] * instance.tau_B[None, :, None] * instance.p_test
    active = beta != 0
    bad = active & (denom[None] == 0)
    if np.any(bad):
        l, i, j, x = (int(v) for v in np.argwhere(bad)[0])
        raise ProtocolError(f"beta[{l}] weights tuple ({i}, {j}, {x}) whose test probability is zero")
    safe = np.where(denom > 0, denom, 1.0)
    return np.einsum("lijx,ijx->l", beta, counts / safe)


def restrict(op: np.ndarray, isometry: np.ndarray) -> np.ndarray:
    """V^dagger op V."""
    return isometry.conj().T @ np.asarray(op) @ isometry


def pair_basis_eigen(op: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    es = eigendecompose(op)
    return es.eigenvalues, es.eigenvectors
