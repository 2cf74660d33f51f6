"""Numerical tolerances shared across the package."""

from __future__ import annotations

from dataclasses import dataclass


@dataclass(frozen=True)
class Tolerances:
    hermitian_atol: float = 1e-12
    probability_sum_atol: float = 1e-12
    gram_psd_atol: float = 1e-10
    reconstruction_rtol: float = 1e-10
    unitary_atol: float = 1e-10
    max_dim: int = 4096
    # relative margin for dual certificates, in units of the objective's spectral norm
    certificate_margin: float = 1e-8
    duality_gap: float = 1e-7
    block_offdiag_atol: float = 1e-8


TOL = Tolerances()
