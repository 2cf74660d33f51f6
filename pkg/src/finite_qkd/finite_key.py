"""Key length, phase-error count bound and security parameter accounting."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .concentration import DeviationTerms, EpsilonBudget
from .sdp import DualCertificate


def binary_entropy(x: float) -> float:
    """h(x) = -x log2 x - (1 - x) log2(1 - x), with h(0) = h(1) = 0."""
    if not 0.0 <= x <= 1.0:
        raise ValueError(f"binary entropy argument must lie in [0, 1], got {x}")
    if x == 0.0 or x == 1.0:
        return 0.0
    return -x * math.log2(x) - (1 - x) * math.log2(1 - x)


@dataclass(frozen=True, eq=False)
class FiniteKeyInputs:
    n_tot: float
    n_sig: float
    n_l: np.ndarray
    certificate: DualCertificate
    p_vals: np.ndarray
    p_trash: float
    budget: EpsilonBudget
    f_EC: float = 1.1
    e_bit: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "n_l", np.asarray(self.n_l, dtype=float))
        object.__setattr__(self, "p_vals", np.asarray(self.p_vals, dtype=float))
        if not 0 <= self.n_sig <= self.n_tot:
            raise ValueError("need 0 <= n_sig <= n_tot")
        if not 0.0 < self.p_trash < 1.0:
            raise ValueError("p_trash must lie strictly inside (0, 1)")
        if self.f_EC < 1.0:
            raise ValueError("f_EC must be at least 1")
        if not 0.0 <= self.e_bit <= 0.5:
            raise ValueError("e_bit must lie in [0, 1/2]")
        if self.n_l.size != self.certificate.eta.size:
            raise ValueError("one count per observation multiplier is required")


@dataclass(frozen=True)
class FiniteKeyResult:
    m_ph_upper: float
    key_length: float
    net_key: float
    eps_PA: float
    eps_tot: float
    rate_per_pulse: float

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def m_ph_upper(inputs: FiniteKeyInputs, deviations: DeviationTerms) -> float:
    """Upper bound on the phase-error count.

    -sum eta N_l - (1 - p_t) N sum lambda p + (1 - p_t) Delta1 + ((1 - p_t)/p_t) Delta2.

    The trash-round variable has mean p_t * sum(lambda p), which is why the
    second term carries (1 - p_t) rather than (1 - p_t)/p_t.
    """
    cert = inputs.certificate
    if not cert.verification.accepted:
        raise ValueError("certificate has not passed verification")
    pt = inputs.p_trash
    lam_p = float(cert.lam @ inputs.p_vals)
    return float(-(cert.eta @ inputs.n_l) - (1 - pt) * inputs.n_tot * lam_p
                 + (1 - pt) * deviations.delta1 + (1 - pt) / pt * deviations.delta2)


def key_length(inputs: FiniteKeyInputs, m_ph_u: float) -> FiniteKeyResult:
    """K = N_sig (1 - h(r)) - s_PA with r = M_ph^U / N_sig clamped to [0, 1/2]."""
    b = inputs.budget
    eps_pa = b.eps_PA
    eps_tot = b.eps_tot
    if inputs.n_sig <= 0:
        return FiniteKeyResult(max(m_ph_u, 0.0), 0.0, 0.0, eps_pa, eps_tot, 0.0)
    r = min(max(m_ph_u / inputs.n_sig, 0.0), 0.5)
    k = max(inputs.n_sig * (1 - binary_entropy(r)) - b.s_PA, 0.0)
    h_ec = inputs.f_EC * inputs.n_sig * binary_entropy(inputs.e_bit)
    net = k - h_ec
    return FiniteKeyResult(float(m_ph_u), float(k), float(net), eps_pa, eps_tot, float(max(net, 0.0) / inputs.n_tot))


def asymptotic_rate(q_sig: float, e_ph_u: float, e_bit: float, f_EC: float = 1.1) -> float:
    """Q_sig (1 - h(e_ph) - f_EC h(e_bit)), floored at 0; error rates above 1/2 give 0."""
    if e_ph_u >= 0.5:
        return 0.0
    r = q_sig * (1 - binary_entropy(max(e_ph_u, 0.0)) - f_EC * binary_entropy(min(max(e_bit, 0.0), 0.5)))
    return max(r, 0.0)
