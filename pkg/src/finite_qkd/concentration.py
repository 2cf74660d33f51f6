"""Kato and Bernstein deviation bounds and their composition.

Kato's inequality (for 0 <= X_u <= 1 adapted to a filtration) states that

    Pr{ sum(E[X_u | F_{u-1}] - X_u) >= [b + a(2X/n - 1)] sqrt(n) }
        <= exp(-(2b^2 - 2a^2) / (1 + 4a / (3 sqrt(n)))^2).

The lower-deviation parameters (a0, b0) minimize b + a(2X_nom/n - 1) subject
to the right-hand side equalling epsilon.  The upper-deviation parameters
(a1, b1) follow from X_u -> 1 - X_u, a -> -a.  In both cases b is obtained
from the constraint itself, so the residual is at rounding level.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum
from functools import lru_cache
from typing import Sequence

import numpy as np


class Direction(str, Enum):
    LOWER = "lower"  # bounds sum E - sum X (Delta^0)
    UPPER = "upper"  # bounds sum X - sum E (Delta^1)


def _log_eps(epsilon: float) -> float:
    if not 0.0 < epsilon <= 1.0:
        raise ValueError(f"epsilon must lie in (0, 1], got {epsilon}")
    return math.log(epsilon)


@dataclass(frozen=True)
class KatoParams:
    a: float
    b: float
    direction: Direction
    n: float
    epsilon: float
    x_nom: float

    def __post_init__(self):
        if self.b < 0:
            raise ValueError("b must be nonnegative")

    def constraint_value(self) -> float:
        """exp(-(2b^2 - 2a^2) / (1 + 4a'/(3 sqrt n))^2) with a' = a (lower) or -a (upper)."""
        a_eff = self.a if self.direction is Direction.LOWER else -self.a
        return math.exp(-(2 * self.b ** 2 - 2 * self.a ** 2) / (1 + 4 * a_eff / (3 * math.sqrt(self.n))) ** 2)


def _a0(n: float, x_nom: float, ln_eps: float) -> float:
    """Closed-form optimal a for the lower-deviation bound."""
    v = x_nom * (n - x_nom)
    root = math.sqrt(-n * n * ln_eps * (9 * v - 2 * n * ln_eps))
    num = (27 * math.sqrt(2) * (n - 2 * x_nom) * root + 216 * math.sqrt(n) * v * ln_eps
           - 48 * n ** 1.5 * ln_eps ** 2)
    den = 4 * (9 * n - 8 * ln_eps) * (9 * v - 2 * n * ln_eps)
    return num / den


def _b_from_constraint(a_eff: float, n: float, ln_eps: float) -> float:
    """b solving exp(-(2b^2 - 2a^2) / (1 + 4a/(3 sqrt n))^2) = eps."""
    s = 1 + 4 * a_eff / (3 * math.sqrt(n))
    return math.sqrt(max(a_eff * a_eff - 0.5 * ln_eps * s * s, 0.0))


@lru_cache(maxsize=4096)
def kato_optimal_params(n: float, x_nom: float, epsilon: float, direction: Direction | str = Direction.LOWER
                        ) -> KatoParams:
    """Closed-form optimal Kato parameters.

    Parameters
    ----------
    n : float
        Number of rounds (> 0).
    x_nom : float
        Anticipated value of sum X_u, in [0, n].
    epsilon : float
        Failure probability in (0, 1].
    direction : Direction
        ``LOWER`` gives (a0, b0); ``UPPER`` gives (a1, b1) = (-a0(n, n - x_nom), ...).
    """
    direction = Direction(direction)
    if not n > 0:
        raise ValueError("n must be positive")
    if not 0.0 <= x_nom <= n:
        raise ValueError(f"x_nom must lie in [0, n], got {x_nom}")
    ln_eps = _log_eps(epsilon)
    if ln_eps == 0.0:
        return KatoParams(0.0, 0.0, direction, n, epsilon, x_nom)
    if direction is Direction.LOWER:
        a = _a0(n, x_nom, ln_eps)
        b = _b_from_constraint(a, n, ln_eps)
    else:
        a = -_a0(n, n - x_nom, ln_eps)
        b = _b_from_constraint(-a, n, ln_eps)
    return KatoParams(float(a), float(b), direction, n, epsilon, x_nom)


def azuma_params(n: float, epsilon: float, direction: Direction | str = Direction.UPPER) -> KatoParams:
    """The a = 0 choice, b = sqrt(-ln eps / 2)."""
    return KatoParams(0.0, math.sqrt(-_log_eps(epsilon) / 2), Direction(direction), n, epsilon, n / 2)


def kato_delta(params: KatoParams, x_observed: float) -> float:
    """[b + a(2X/n - 1)] sqrt(n)."""
    n = params.n
    return (params.b + params.a * (2 * x_observed / n - 1)) * math.sqrt(n)


def bernstein_delta(n: float, bound_M: float, second_moment_e: float, epsilon: float) -> float:
    """Deviation for sums of i.i.d. variables with |Y - E Y| <= M and E[(Y - E Y)^2] <= e.

    Solves n x^2 + (2 ln(eps)/3) x + 2 (e/M^2) ln(eps) = 0 for the positive
    root x and returns n M x, i.e.

        -M ln(eps)/3 + (1/2) sqrt((2 M ln(eps)/3)^2 - 8 n e ln(eps)).
    """
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    if second_moment_e < 0:
        raise ValueError("second moment must be nonnegative")
    if bound_M <= 0:
        raise ValueError("M must be positive")
    ln_eps = _log_eps(epsilon)
    if ln_eps == 0.0:
        return 0.0
    c = 2 * bound_M * ln_eps / 3
    return -bound_M * ln_eps / 3 + 0.5 * math.sqrt(c * c - 8 * n * second_moment_e * ln_eps)


def bernstein_tail(n: float, bound_M: float, second_moment_e: float, delta: float) -> float:
    """Tail bound exp(-n x^2 / (2 e/M^2 + 2x/3)) at x = delta / (n M)."""
    x = delta / (n * bound_M)
    return math.exp(-n * x * x / (2 * second_moment_e / bound_M ** 2 + 2 * x / 3))


def delta_ph(n_tot: float, n_sig: float, n_sig_nom: float, eps0: float) -> float:
    """Upper deviation for the phase-error count, using Theta_ph <= N_sig."""
    if not 0 <= n_sig <= n_tot:
        raise ValueError("need 0 <= n_sig <= n_tot")
    p = kato_optimal_params(float(n_tot), float(n_sig_nom), float(eps0), Direction.UPPER)
    if p.a > 0:
        return kato_delta(p, n_sig)
    return math.sqrt(-n_tot * _log_eps(eps0) / 2)


@dataclass(frozen=True)
class TrashStatistics:
    """Distribution summary of the trash-round variable chi_P.

    ``mean`` is E[chi_P] (already including the trash probability),
    ``second_moment`` is E[chi_P^2].  The range [omega_min, omega_max] must
    contain every value chi_P can take, including 0 on non-trash rounds.
    """

    mean: float
    second_moment: float
    omega_max: float
    omega_min: float

    def __post_init__(self):
        if not self.omega_max > self.omega_min:
            raise ValueError("degenerate trash spectrum: omega_max must exceed omega_min")
        if not self.omega_min <= 0.0 <= self.omega_max:
            raise ValueError("trash range must contain 0")
        if self.second_moment < 0:
            raise ValueError("second moment must be nonnegative")

    @property
    def width(self) -> float:
        return self.omega_max - self.omega_min


def bernstein_trash(n_tot: float, stats: TrashStatistics, epsilon: float) -> float:
    return bernstein_delta(n_tot, stats.width, stats.second_moment, epsilon)


def theta_p_bounds(n_tot: float, stats: TrashStatistics, eps6: float) -> tuple[float, float, float]:
    """(Theta_P^nom, Theta_P^U, Theta_P^L) of the normalized trash variable."""
    d = bernstein_trash(n_tot, stats, eps6)
    w = stats.width
    nom = n_tot * (stats.mean - stats.omega_min) / w
    return nom, nom + d / w, nom - d / w


def delta_P(n_tot: float, stats: TrashStatistics, eps6: float, eps7: float) -> float:
    """Upper Kato deviation of sum chi_P, evaluated at the Bernstein-bounded Theta_P."""
    nom, up, lo = theta_p_bounds(n_tot, stats, eps6)
    if not -1e-9 * n_tot <= nom <= n_tot * (1 + 1e-9):
        raise ValueError(f"Theta_P^nom = {nom} outside [0, {n_tot}]")
    nom = min(max(nom, 0.0), float(n_tot))
    p = kato_optimal_params(float(n_tot), nom, float(eps7), Direction.UPPER)
    theta = up if p.a > 0 else lo
    return stats.width * kato_delta(p, theta)


@dataclass(frozen=True)
class EpsilonBudget:
    """Failure-probability allocation.

    ``eps_ph_count`` is charged to the phase-error Kato bound, ``eps_q[l]`` to
    observation l, ``eps_bern`` to each one-sided Bernstein bound on the trash
    sum (and to the lower Bernstein bound used in Delta2), ``eps_kato_p`` to the
    Kato bound on the trash sum.
    """

    eps_ph: float
    eps_ph_count: float
    eps_q: tuple[float, ...]
    eps_bern: float
    eps_kato_p: float
    s_PA: int
    s_prime: int
    eps_EC: float | None = None

    def __post_init__(self):
        object.__setattr__(self, "eps_q", tuple(float(e) for e in self.eps_q))
        if self.eps_EC is None:
            object.__setattr__(self, "eps_EC", 2.0 ** (-self.s_prime))
        for e in (self.eps_ph_count, *self.eps_q, self.eps_bern, self.eps_kato_p):
            if not 0.0 < e <= 1.0:
                raise ValueError(f"budget entries must lie in (0, 1], got {e}")
        if not 0.0 < self.eps_ph <= 1.0:
            raise ValueError("eps_ph must lie in (0, 1]")
        if self.eps_ph < 1.0 and self.kato_total > self.eps_ph / 2 * (1 + 1e-12):
            raise ValueError("Kato allocations exceed eps_ph / 2")

    @classmethod
    def uniform(cls, eps_ph: float = 2.0 ** -66, s_PA: int = 66, s_prime: int = 32, n_obs: int = 4
                ) -> EpsilonBudget:
        """Split eps_ph/2 evenly over the Kato and Bernstein events."""
        k = 2 * (n_obs + 3)
        e = eps_ph / k
        return cls(eps_ph, e, (e,) * n_obs, e, e, s_PA, s_prime)

    @classmethod
    def relaxed(cls, epsilon: float, n_obs: int = 4) -> EpsilonBudget:
        """Every event charged ``epsilon`` (for coverage experiments)."""
        return cls(1.0, epsilon, (epsilon,) * n_obs, epsilon, epsilon, 0, 0, eps_EC=1.0)

    @property
    def eps(self) -> tuple[float, ...]:
        """(eps_0, eps_1..eps_L, eps_5 = eps_6 + eps_7, eps_6, eps_7)."""
        return (self.eps_ph_count, *self.eps_q, self.eps_bern + self.eps_kato_p, self.eps_bern, self.eps_kato_p)

    @property
    def kato_total(self) -> float:
        return self.eps_ph_count + sum(self.eps_q) + self.eps_bern + self.eps_kato_p

    @property
    def eps_PA(self) -> float:
        return math.sqrt(2 * (self.eps_ph + 2.0 ** (-self.s_PA)))

    @property
    def eps_tot(self) -> float:
        return self.eps_EC + self.eps_PA

    def to_dict(self) -> dict:
        return {"eps_ph": self.eps_ph, "eps_ph_count": self.eps_ph_count, "eps_q": list(self.eps_q),
                "eps_bern": self.eps_bern, "eps_kato_p": self.eps_kato_p, "s_PA": self.s_PA,
                "s_prime": self.s_prime, "eps_EC": self.eps_EC}

    @classmethod
    def from_dict(cls, d: dict) -> EpsilonBudget:
        return cls(float(d["eps_ph"]), float(d["eps_ph_count"]), tuple(d["eps_q"]), float(d["eps_bern"]),
                   float(d["eps_kato_p"]), int(d["s_PA"]), int(d["s_prime"]),
                   None if d.get("eps_EC") is None else float(d["eps_EC"]))


@dataclass(frozen=True)
class DeviationTerms:
    delta_ph: float
    delta_Q: tuple[float, ...]
    delta_P: float
    delta_bern: float
    p_trash: float

    @property
    def delta1(self) -> float:
        return (self.delta_ph + sum(self.delta_Q)) / (1 - self.p_trash) + self.delta_P / self.p_trash

    @property
    def delta2(self) -> float:
        return self.delta_bern


def signed_observation_delta(eta: float, n_tot: float, theta_obs: float, theta_nom: float, norm: float,
                             epsilon: float) -> float:
    """|eta| Delta^{sgn eta}(N, Theta, Theta_nom, eps) / norm; zero when eta = 0."""
    if eta == 0.0:
        return 0.0
    nom = min(max(theta_nom, 0.0), float(n_tot))
    direction = Direction.UPPER if eta > 0 else Direction.LOWER
    p = kato_optimal_params(float(n_tot), nom, float(epsilon), direction)
    return abs(eta) * kato_delta(p, theta_obs) / norm


def compose_bounds(budget: EpsilonBudget, eta: Sequence[float], n_tot: float, n_sig: float, n_sig_nom: float,
                   n_obs: Sequence[float], obs_norms: Sequence[float], theta_q_nom: Sequence[float],
                   p_trash: float, trash: TrashStatistics) -> DeviationTerms:
    """Assemble every deviation entering the phase-error count bound.

    ``n_obs[l]`` are the aggregated counts N_l, ``obs_norms[l]`` the factors
    mapping chi_{Q,l} into [0, 1] (Theta_{Q,l} = norm_l N_l), and
    ``theta_q_nom`` the anticipated Theta_{Q,l}.
    """
    eta = np.asarray(eta, dtype=float)
    if len(budget.eps_q) < eta.size:
        raise ValueError(f"budget has {len(budget.eps_q)} observation entries, need {eta.size}")
    if not 0.0 < p_trash < 1.0:
        raise ValueError("p_trash must lie strictly inside (0, 1)")
    d_ph = delta_ph(n_tot, n_sig, n_sig_nom, budget.eps_ph_count)
    d_q = tuple(
        signed_observation_delta(float(e), n_tot, norm * n, tn, norm, eps)
        for e, n, norm, tn, eps in zip(eta, n_obs, obs_norms, theta_q_nom, budget.eps_q)
    )
    d_p = delta_P(n_tot, trash, budget.eps_bern, budget.eps_kato_p)
    d_b = bernstein_trash(n_tot, trash, budget.eps_bern)
    return DeviationTerms(d_ph, d_q, d_p, d_b, p_trash)
