"""Primal and dual phase-error SDPs with a posteriori certificate verification.

The primal maximizes tr(E G) over block-diagonal G >= 0 subject to linear
equalities tr(A_i G) = c_i.  The dual minimizes -Lambda . C subject to
E + sum_i Lambda_i A_i <= 0.  Conic solves are delegated to cvxpy (Clarabel
by default) on the real symmetric embedding of each block; whatever comes
back is only trusted after :func:`verify_certificate` has bounded the largest
eigenvalue of the assembled operator rigorously.
"""

from __future__ import annotations

import hashlib
import json
import warnings
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Sequence

import cvxpy as cp
import numpy as np

from .operators import HermitianOperator, max_eigenvalue
from .settings import TOL

DEFAULT_SOLVER = "CLARABEL"
PRIMAL_ROW_SCALE_FLOOR = 1e-3
_SOLVER_OPTIONS = {
    "CLARABEL": dict(tol_gap_abs=1e-11, tol_gap_rel=1e-11, tol_feas=1e-11, max_iter=500),
}


class SolveStatus(str, Enum):
    OPTIMAL = "optimal"
    INFEASIBLE = "infeasible"
    UNBOUNDED = "unbounded"
    NUMERICAL_FAILURE = "numerical_failure"


class SdpError(RuntimeError):
    """Raised when a conic solve does not produce a usable answer."""

    def __init__(self, status: SolveStatus, message: str, details: dict | None = None):
        super().__init__(f"{status.value}: {message}")
        self.status = status
        self.details = details or {}


@dataclass(frozen=True, eq=False)
class SdpProblem:
    """Phase-error SDP data.

    Parameters
    ----------
    objective : HermitianOperator
        E_ph.  Its ``blocks`` define the block-diagonal structure imposed on G.
    gram_ops, p_vals : inner-product constraints tr(P_k G) = p_k, with P_k
        already extended to the full space.
    obs_ops, q_vals : observation constraints tr(Q_l G) = q_l.
    """

    objective: HermitianOperator
    gram_ops: tuple[HermitianOperator, ...]
    p_vals: np.ndarray
    obs_ops: tuple[HermitianOperator, ...]
    q_vals: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "gram_ops", tuple(self.gram_ops))
        object.__setattr__(self, "obs_ops", tuple(self.obs_ops))
        p = np.asarray(self.p_vals, dtype=float).ravel()
        q = np.asarray(self.q_vals, dtype=float).ravel()
        if p.size != len(self.gram_ops) or q.size != len(self.obs_ops):
            raise ValueError("constraint operators and values differ in length")
        object.__setattr__(self, "p_vals", p)
        object.__setattr__(self, "q_vals", q)
        n = self.objective.dim
        for a in self.constraint_ops:
            if a.dim != n:
                raise ValueError(f"constraint dimension {a.dim} != objective dimension {n}")
        for lab, a, b in self.block_structure:
            for op in self.constraint_ops:
                m = op.entries
                if np.any(np.abs(m[a:b, :a]) > TOL.block_offdiag_atol) or \
                        np.any(np.abs(m[a:b, b:]) > TOL.block_offdiag_atol):
                    raise ValueError(f"constraint couples block {lab} to the rest of the space")

    @property
    def block_structure(self) -> tuple[tuple[int, int, int], ...]:
        return self.objective.blocks or ((0, 0, self.objective.dim),)

    @property
    def constraint_ops(self) -> tuple[HermitianOperator, ...]:
        return self.gram_ops + self.obs_ops

    @property
    def constraint_values(self) -> np.ndarray:
        return np.concatenate([self.p_vals, self.q_vals])

    def with_observations(self, q_vals: Sequence[float]) -> SdpProblem:
        return replace(self, q_vals=np.asarray(q_vals, dtype=float))

    def operator_hash(self, include_values: bool = True) -> str:
        """Digest of the operators and, by default, the p-values.

        Observation values are never included: they change with the channel
        while the certificate stays tied to the operators.
        """
        h = hashlib.sha256()
        for op in (self.objective,) + self.constraint_ops:
            h.update(np.round(op.entries, 13).tobytes())
        if include_values:
            h.update(np.round(self.p_vals, 13).tobytes())
        h.update(str(self.block_structure).encode())
        return h.hexdigest()


@dataclass(frozen=True)
class Verification:
    max_eig: float
    radius: float
    accepted: bool


@dataclass(frozen=True, eq=False)
class DualCertificate:
    lam: np.ndarray
    eta: np.ndarray
    margin: float
    bound_value: float
    verification: Verification
    solver_meta: dict = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "lam", np.asarray(self.lam, dtype=float))
        object.__setattr__(self, "eta", np.asarray(self.eta, dtype=float))
        if self.margin < 0:
            raise ValueError("margin must be nonnegative")

    @property
    def multipliers(self) -> np.ndarray:
        return np.concatenate([self.lam, self.eta])

    def scaled(self, factor: float) -> DualCertificate:
        """Multipliers, margin and bound scaled by ``factor``; verification cleared."""
        return DualCertificate(factor * self.lam, factor * self.eta, factor * self.margin,
                               factor * self.bound_value, Verification(np.nan, np.nan, False),
                               dict(self.solver_meta))


@dataclass(frozen=True, eq=False)
class PrimalResult:
    value: float
    optimizer: np.ndarray
    dual_value: float
    status: SolveStatus

    @property
    def gap(self) -> float:
        return abs(self.dual_value - self.value)

    def __iter__(self):
        yield self.value
        yield self.optimizer


def _embed(m: np.ndarray) -> np.ndarray:
    """Real symmetric embedding [[Re, -Im], [Im, Re]] of a Hermitian matrix."""
    re, im = m.real, m.imag
    return np.block([[re, -im], [im, re]])


def _block_entries(problem: SdpProblem, op: HermitianOperator) -> list[np.ndarray]:
    return [op.entries[a:b, a:b] for _, a, b in problem.block_structure]


def _solve(prob: cp.Problem, solver: str | None) -> str:
    solver = solver or DEFAULT_SOLVER
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", UserWarning)
            prob.solve(solver=solver, warm_start=False, **_SOLVER_OPTIONS.get(solver, {}))
    except cp.error.SolverError as exc:
        raise SdpError(SolveStatus.NUMERICAL_FAILURE, str(exc)) from exc
    return prob.status


def _status_error(status: str, what: str) -> SdpError | None:
    if status in (cp.OPTIMAL, cp.OPTIMAL_INACCURATE):
        return None
    if status in (cp.INFEASIBLE, cp.INFEASIBLE_INACCURATE):
        return SdpError(SolveStatus.INFEASIBLE, f"{what} is infeasible")
    if status in (cp.UNBOUNDED, cp.UNBOUNDED_INACCURATE):
        return SdpError(SolveStatus.UNBOUNDED, f"{what} is unbounded")
    return SdpError(SolveStatus.NUMERICAL_FAILURE, f"{what}: solver status {status}")


def _primal_program(problem: SdpProblem, ops: Sequence[HermitianOperator], vals: np.ndarray):
    blocks = problem.block_structure
    ys = [cp.Variable((2 * (b - a), 2 * (b - a)), PSD=True) for _, a, b in blocks]
    obj_blocks = _block_entries(problem, problem.objective)
    objective = sum(0.5 * cp.trace(_embed(e) @ y) for e, y in zip(obj_blocks, ys))
    cons = []
    for op, c in zip(ops, vals):
        parts = _block_entries(problem, op)
        cons.append(sum(0.5 * cp.trace(_embed(p) @ y) for p, y in zip(parts, ys)) == c)
    return cp.Problem(cp.Maximize(objective), cons), ys, cons


def _diagnose_infeasible(problem: SdpProblem, solver: str | None) -> str:
    prob, _, _ = _primal_program(problem, problem.gram_ops, problem.p_vals)
    if _status_error(_solve(prob, solver), "gram") is not None:
        return "gram"
    return "observation"


def _row_scales(values: np.ndarray) -> np.ndarray:
    """Per-constraint scale factors bringing small right-hand sides towards 1.

    Observation values can be 1e-8 while inner products are O(1); without
    rescaling the interior-point iterates stall with constraint residuals that
    the large multipliers amplify into visible objective errors.
    """
    return 1.0 / np.maximum(np.abs(values), PRIMAL_ROW_SCALE_FLOOR)


def solve_primal(problem: SdpProblem, solver: str | None = None) -> PrimalResult:
    """Maximize tr(E G) over block-diagonal G >= 0 meeting all constraints.

    Raises
    ------
    SdpError
        With ``status`` INFEASIBLE (``details['family']`` names the failing
        constraint family), UNBOUNDED, or NUMERICAL_FAILURE.
    """
    vals = problem.constraint_values
    scales = _row_scales(vals)
    ops = [op * s for op, s in zip(problem.constraint_ops, scales)]
    prob, ys, cons = _primal_program(problem, ops, vals * scales)
    err = _status_error(_solve(prob, solver), "primal")
    if err is not None:
        if err.status is SolveStatus.INFEASIBLE:
            err.details["family"] = _diagnose_infeasible(problem, solver)
        raise err
    n = problem.objective.dim
    g = np.zeros((n, n), dtype=complex)
    for (_, a, b), y in zip(problem.block_structure, ys):
        d = b - a
        yv = 0.5 * (y.value + y.value.T)
        g[a:b, a:b] = 0.5 * (yv[:d, :d] + yv[d:, d:]) + 0.5j * (yv[d:, :d] - yv[:d, d:])
    value = float(prob.value)
    # cvxpy reports equality duals for max problems with the sign of d(value)/dc
    y = scales * np.array([float(np.asarray(c.dual_value).ravel()[0]) for c in cons])
    dual_value = float(y @ vals)
    return PrimalResult(value, g, dual_value, SolveStatus.OPTIMAL)


def _assemble(problem: SdpProblem, multipliers: np.ndarray) -> np.ndarray:
    m = problem.objective.entries.copy()
    for c, op in zip(multipliers, problem.constraint_ops):
        if c != 0.0:
            m = m + c * op.entries
    return m


def verify_certificate(problem: SdpProblem, cert: DualCertificate) -> Verification:
    """Rigorous check that E + sum lambda P + sum eta Q <= 0.

    The radius combines a Bauer-Fike enclosure for each diagonal block with a
    bound on the rounding incurred while assembling the operator.
    """
    mult = cert.multipliers
    if mult.size != len(problem.constraint_ops):
        raise ValueError(f"certificate has {mult.size} multipliers, problem has {len(problem.constraint_ops)}")
    if not np.all(np.isfinite(mult)):
        return Verification(float("inf"), 0.0, False)
    L = _assemble(problem, mult)
    n = L.shape[0]
    u = np.finfo(float).eps
    magnitude = np.abs(problem.objective.entries) + sum(
        abs(c) * np.abs(op.entries) for c, op in zip(mult, problem.constraint_ops))
    assembly = (len(mult) + 2) * u * float(np.linalg.norm(magnitude, 2))
    worst, radius = -np.inf, 0.0
    for _, a, b in problem.block_structure:
        ce = max_eigenvalue(L[a:b, a:b])
        worst = max(worst, ce.value)
        radius = max(radius, ce.radius)
    # entries outside the declared blocks must vanish for the blockwise check to be exact
    mask = np.ones((n, n), dtype=bool)
    for _, a, b in problem.block_structure:
        mask[a:b, a:b] = False
    leak = float(np.abs(L[mask]).sum()) if mask.any() else 0.0
    radius = float(radius + assembly + leak)
    return Verification(float(worst), radius, bool(worst + radius <= 0.0))


def identity_combination(problem: SdpProblem) -> np.ndarray | None:
    """Coefficients c with sum c_i A_i = I, or None if the identity is not spanned."""
    n = problem.objective.dim
    ops = problem.constraint_ops
    if not ops:
        return None
    a = np.stack([op.entries.ravel() for op in ops], axis=1)
    a = np.concatenate([a.real, a.imag])
    target = np.eye(n).ravel()
    target = np.concatenate([target, np.zeros_like(target)])
    c, *_ = np.linalg.lstsq(a, target, rcond=None)
    if np.linalg.norm(a @ c - target) > 1e-9 * np.sqrt(n):
        return None
    return c


def default_margin(problem: SdpProblem) -> float:
    return TOL.certificate_margin * max(float(np.linalg.norm(problem.objective.entries, 2)), 1e-300)


@dataclass(frozen=True, eq=False)
class _DualProgram:
    problem: cp.Problem
    multipliers: cp.Variable
    values: cp.Parameter
    margin: cp.Parameter


_DUAL_CACHE: dict[str, _DualProgram] = {}


def _dual_program(problem: SdpProblem) -> _DualProgram:
    """Compiled dual with the constraint values and margin as parameters.

    Only the operators enter the cache key, so sweeping observations or
    inner products reuses the same canonicalization.
    """
    key = problem.operator_hash(include_values=False)
    cached = _DUAL_CACHE.get(key)
    if cached is not None:
        return cached
    ops = problem.constraint_ops
    m = len(ops)
    lam = cp.Variable(m)
    values = cp.Parameter(m)
    margin = cp.Parameter(nonneg=True)
    cons = []
    for _, a, b in problem.block_structure:
        d = b - a
        expr = _embed(problem.objective.entries[a:b, a:b])
        mats = [_embed(op.entries[a:b, a:b]) for op in ops]
        active = [i for i, mat in enumerate(mats) if np.any(mat != 0)]
        if active:
            stack = np.stack([mats[i].ravel() for i in active], axis=1)
            lhs = cp.reshape(stack @ lam[active], (2 * d, 2 * d), order="C") + expr
        else:
            lhs = cp.Constant(expr)
        lhs = 0.5 * (lhs + lhs.T)
        cons.append(lhs + margin * np.eye(2 * d) << 0)
    program = _DualProgram(cp.Problem(cp.Minimize(-(values @ lam)), cons), lam, values, margin)
    if len(_DUAL_CACHE) > 64:
        _DUAL_CACHE.clear()
    _DUAL_CACHE[key] = program
    return program


def solve_dual_with_margin(problem: SdpProblem, margin: float | None = None, solver: str | None = None
                           ) -> DualCertificate:
    """Minimize -Lambda . C subject to E + sum Lambda A <= -margin * I.

    The returned certificate has been verified.  If the floating-point optimum
    misses the cone by a hair, the multipliers are shifted along the
    combination of constraints that spans the identity and re-verified.
    """
    if margin is None:
        margin = default_margin(problem)
    if margin < 0:
        raise ValueError("margin must be nonnegative")
    program = _dual_program(problem)
    program.values.value = problem.constraint_values
    program.margin.value = float(margin)
    status = _solve(program.problem, solver)
    err = _status_error(status, "dual")
    if err is not None:
        raise err
    lam = program.multipliers
    mult = np.asarray(lam.value, dtype=float)
    meta = {"solver": solver or DEFAULT_SOLVER, "status": status, "shift": 0.0}
    cert = _certificate(problem, mult, margin, meta)
    if not cert.verification.accepted:
        c = identity_combination(problem)
        if c is None:
            raise SdpError(SolveStatus.NUMERICAL_FAILURE,
                           "dual solution fails verification and the identity is not spanned",
                           {"max_eig": cert.verification.max_eig, "radius": cert.verification.radius})
        v = cert.verification
        shift = v.max_eig + v.radius + margin
        meta["shift"] = float(shift)
        cert = _certificate(problem, mult - shift * c, margin, meta)
        if not cert.verification.accepted:
            raise SdpError(SolveStatus.NUMERICAL_FAILURE, "repaired dual still fails verification",
                           {"max_eig": cert.verification.max_eig, "radius": cert.verification.radius})
    return cert


def _certificate(problem: SdpProblem, mult: np.ndarray, margin: float, meta: dict) -> DualCertificate:
    k = len(problem.gram_ops)
    bound = float(-(mult @ problem.constraint_values))
    prelim = DualCertificate(mult[:k], mult[k:], margin, bound, Verification(np.nan, np.nan, False), meta)
    return replace(prelim, verification=verify_certificate(problem, prelim))


def linear_bound(cert: DualCertificate, p_vals: Sequence[float], q_obs: Sequence[float]) -> float:
    """-sum lambda p - sum eta q_obs: an upper bound on tr(E G) for any feasible G."""
    return float(-(cert.lam @ np.asarray(p_vals, dtype=float)) - cert.eta @ np.asarray(q_obs, dtype=float))


def certificate_to_dict(cert: DualCertificate, problem: SdpProblem) -> dict:
    return {
        "protocol_hash": problem.operator_hash(),
        "q_nom": problem.q_vals.tolist(),
        "p_vals": problem.p_vals.tolist(),
        "lambda": cert.lam.tolist(),
        "eta": cert.eta.tolist(),
        "margin": cert.margin,
        "bound_value": cert.bound_value,
        "solver_meta": cert.solver_meta,
        "verification": {"max_eig": cert.verification.max_eig, "radius": cert.verification.radius,
                         "accepted": cert.verification.accepted},
    }


def certificate_from_dict(d: dict) -> tuple[DualCertificate, str]:
    """Parse a certificate record; returns it with its stored protocol hash."""
    v = d["verification"]
    cert = DualCertificate(np.asarray(d["lambda"], dtype=float), np.asarray(d["eta"], dtype=float),
                           float(d["margin"]), float(d["bound_value"]),
                           Verification(float(v["max_eig"]), float(v["radius"]), bool(v["accepted"])),
                           dict(d.get("solver_meta", {})))
    return cert, str(d["protocol_hash"])


def dumps_certificate(cert: DualCertificate, problem: SdpProblem) -> str:
    return json.dumps(certificate_to_dict(cert, problem), indent=2, sort_keys=True)


def _operator_to_dict(op: HermitianOperator) -> dict:
    m = op.entries
    return {"entries": np.stack([m.real, m.imag], axis=-1).tolist(),
            "blocks": None if op.blocks is None else [list(b) for b in op.blocks]}


def _operator_from_dict(d: dict) -> HermitianOperator:
    a = np.asarray(d["entries"], dtype=float)
    if a.ndim != 3 or a.shape[-1] != 2:
        raise ValueError("operator entries must be an n x n array of [re, im] pairs")
    blocks = d.get("blocks")
    return HermitianOperator(a[..., 0] + 1j * a[..., 1], None if blocks is None else [tuple(b) for b in blocks])


def problem_to_dict(problem: SdpProblem) -> dict:
    """JSON-ready description of an SDP instance (complex entries as [re, im])."""
    return {"objective": _operator_to_dict(problem.objective),
            "gram_ops": [_operator_to_dict(op) for op in problem.gram_ops],
            "p_vals": problem.p_vals.tolist(),
            "obs_ops": [_operator_to_dict(op) for op in problem.obs_ops],
            "q_vals": problem.q_vals.tolist()}


def problem_from_dict(d: dict) -> SdpProblem:
    return SdpProblem(_operator_from_dict(d["objective"]), tuple(_operator_from_dict(o) for o in d["gram_ops"]),
                      np.asarray(d["p_vals"], dtype=float), tuple(_operator_from_dict(o) for o in d["obs_ops"]),
                      np.asarray(d["q_vals"], dtype=float))
