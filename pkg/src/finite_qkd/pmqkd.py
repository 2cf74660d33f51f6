"""Phase-matching QKD: operators, channel statistics and the finite-size key rate.

Each party's ancilla is indexed ``i = kappa + 2 * pi`` (key bit kappa, basis
pi), so the joint ancilla index is ``4 * i + j``.  The SDP lives on the
same-basis subspace spanned by |kappa_a, kappa_b, pi>, indexed
``s = kappa_a + 2 * pi + 4 * kappa_b``, tensored with the announcement
xi in {0 (in-phase click), 1 (anti-phase click), 2 (inconclusive)}.  The
variable is block diagonal over xi, giving three 8 x 8 blocks.

The phase-error operator is proportional to p_aux0 * p_basis0**2 while every
constraint operator is independent of the protocol probabilities.  A
certificate is therefore solved once at the reference point p_aux0 =
p_basis0 = 1 and rescaled.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, replace
from functools import lru_cache
from itertools import product
from typing import Iterable, Sequence

import numpy as np

from .concentration import (DeviationTerms, Direction, EpsilonBudget, TrashStatistics, bernstein_trash,
                            compose_bounds, delta_P, delta_ph, kato_delta, kato_optimal_params)
from .finite_key import FiniteKeyInputs, FiniteKeyResult, asymptotic_rate, binary_entropy, key_length, m_ph_upper
from .operators import HermitianOperator, block_diag, coherent_overlap, eigendecompose, pauli
from .protocol import (AnnouncementScheme, ConstraintSet, PhaseErrorSpec, ProtocolInstance, ProtocolKind,
                       build_inner_product_constraints, build_observation_constraints,
                       build_phase_error_operator, renormalize, restrict)
from .sdp import DualCertificate, SdpProblem, Verification, linear_bound, solve_dual_with_margin, verify_certificate

N_ANNOUNCE = 3
REDUCED_DIM = 8
SAME_BASIS_STATES = [(ka, kb, pi) for pi in (0, 1) for kb in (0, 1) for ka in (0, 1)]


def reduced_index(ka: int, kb: int, pi: int) -> int:
    return ka + 2 * pi + 4 * kb


def party_index(kappa: int, pi: int) -> int:
    return kappa + 2 * pi


def joint_index(ka: int, kb: int, pi: int) -> int:
    return 4 * party_index(ka, pi) + party_index(kb, pi)


@lru_cache(maxsize=1)
def reduced_isometry() -> np.ndarray:
    """16 x 8 embedding of the same-basis subspace into the joint ancilla."""
    v = np.zeros((16, REDUCED_DIM))
    for ka, kb, pi in SAME_BASIS_STATES:
        v[joint_index(ka, kb, pi), reduced_index(ka, kb, pi)] = 1.0
    v.setflags(write=False)
    return v


@dataclass(frozen=True)
class PmQkdParams:
    """Protocol settings.

    ``mu_x`` and ``mu_y`` are the mean photon numbers of the X- and Y-basis
    pulses.
    """

    mu_x: float = 0.05
    mu_y: float = 0.05
    p_basis0: float = 0.9
    p_aux0: float = 0.9
    p_trash: float = 0.01
    budget: EpsilonBudget = field(default_factory=EpsilonBudget.uniform)
    f_EC: float = 1.1
    n_tot: float = 1e12

    def __post_init__(self):
        for name in ("p_basis0", "p_aux0", "p_trash"):
            v = getattr(self, name)
            if not 0.0 < v < 1.0:
                raise ValueError(f"{name} must lie strictly inside (0, 1), got {v}")
        if not (self.mu_x > 0 and self.mu_y > 0):
            raise ValueError("intensities must be positive")
        if self.n_tot <= 0:
            raise ValueError("n_tot must be positive")
        if self.f_EC < 1:
            raise ValueError("f_EC must be at least 1")

    @property
    def p_basis1(self) -> float:
        return 1.0 - self.p_basis0

    @property
    def p_aux1(self) -> float:
        return 1.0 - self.p_aux0

    @property
    def phase_error_scale(self) -> float:
        return self.p_aux0 * self.p_basis0 ** 2

    def observation_norms(self) -> np.ndarray:
        """Factors mapping chi_{Q,l} into [0, 1]."""
        x = self.p_basis0 ** 2 * self.p_aux1
        y = self.p_basis1 ** 2
        return np.array([x, y, x, y])


@dataclass(frozen=True)
class ChannelModel:
    distance_km: float
    attenuation_db_per_km: float = 0.2
    detector_efficiency: float = 1.0
    dark_count: float = 1e-8
    charlie_position: float = 0.5

    def __post_init__(self):
        if self.distance_km < 0:
            raise ValueError("distance must be nonnegative")
        if not 0.0 < self.detector_efficiency <= 1.0:
            raise ValueError("detector efficiency must lie in (0, 1]")
        if not 0.0 <= self.dark_count < 1.0:
            raise ValueError("dark count probability must lie in [0, 1)")
        if not 0.0 <= self.charlie_position <= 1.0:
            raise ValueError("charlie_position must lie in [0, 1]")
        if self.attenuation_db_per_km < 0:
            raise ValueError("attenuation must be nonnegative")

    def arm_transmittances(self) -> tuple[float, float]:
        """(eta_A, eta_B) from each sender to Charlie's detectors."""
        loss = self.attenuation_db_per_km * self.distance_km
        ea = 10 ** (-loss * self.charlie_position / 10) * self.detector_efficiency
        eb = 10 ** (-loss * (1 - self.charlie_position) / 10) * self.detector_efficiency
        return ea, eb

    @property
    def eta_tot(self) -> float:
        return 10 ** (-self.attenuation_db_per_km * self.distance_km / 10) * self.detector_efficiency


@dataclass(frozen=True)
class ObservedCounts:
    n_sig: float
    n_bit_x: float
    n_bit_y: float
    n_pass_x: float
    n_pass_y: float

    def __post_init__(self):
        for k, v in asdict(self).items():
            if v < 0:
                raise ValueError(f"{k} must be nonnegative")
        if self.n_bit_x > self.n_pass_x or self.n_bit_y > self.n_pass_y:
            raise ValueError("bit-error counts cannot exceed pass counts")

    @classmethod
    def from_rates(cls, n_tot: float, rates: dict) -> ObservedCounts:
        """Counts from per-round rates, e.g. {'n_sig': 1e-6, ...} times n_tot."""
        return cls(**{k: float(rates[k]) * n_tot for k in ("n_sig", "n_bit_x", "n_bit_y", "n_pass_x", "n_pass_y")})


@dataclass(frozen=True)
class NominalStats:
    """Anticipated channel behaviour.

    ``e_bit_*`` are bit-error rates among passing rounds, so
    ``p_pass * e_bit`` is the joint probability of a pass with a bit error.
    """

    e_bit_x_nom: float
    e_bit_y_nom: float
    p_pass_x_nom: float
    p_pass_y_nom: float
    n_sig_nom: float
    theta_q_nom: tuple[float, float, float, float]

    @property
    def q_nom(self) -> np.ndarray:
        return np.array([self.p_pass_x_nom * self.e_bit_x_nom, self.p_pass_y_nom * self.e_bit_y_nom,
                         self.p_pass_x_nom, self.p_pass_y_nom])

    def expected_counts(self, params: PmQkdParams) -> ObservedCounts:
        q = self.q_nom
        n = params.n_tot * (1 - params.p_trash)
        x = params.p_basis0 ** 2 * params.p_aux1
        y = params.p_basis1 ** 2
        return ObservedCounts(self.n_sig_nom, n * x * q[0], n * y * q[1], n * x * q[2], n * y * q[3])


# ---------------------------------------------------------------- sources


def party_amplitudes(mu_x: float, mu_y: float) -> np.ndarray:
    """Coherent amplitudes (-1)^kappa i^pi sqrt(mu_pi), indexed kappa + 2 pi."""
    mus = (mu_x, mu_y)
    return np.array([(-1) ** k * (1j ** p) * math.sqrt(mus[p]) for p in (0, 1) for k in (0, 1)])


def party_gram(mu_x: float, mu_y: float) -> np.ndarray:
    amp = party_amplitudes(mu_x, mu_y)
    return np.array([[coherent_overlap(a, b) for b in amp] for a in amp])


def party_weights(p_basis0: float) -> np.ndarray:
    return np.array([p_basis0 / 2, p_basis0 / 2, (1 - p_basis0) / 2, (1 - p_basis0) / 2])


def announcement_scheme() -> AnnouncementScheme:
    """Signal iff both X basis, alpha = 0 and a conclusive announcement."""
    signal = np.zeros((4, 4, 2, N_ANNOUNCE), dtype=bool)
    rec = -np.ones((4, 4, 2, N_ANNOUNCE), dtype=int)
    for ka, kb in product((0, 1), repeat=2):
        for xi in (0, 1):
            i, j = party_index(ka, 0), party_index(kb, 0)
            signal[i, j, 0, xi] = True
            rec[i, j, 0, xi] = ka
    return AnnouncementScheme(signal, rec)


def protocol_instance(mu_x: float, mu_y: float, p_basis0: float, p_aux0: float) -> ProtocolInstance:
    g = party_gram(mu_x, mu_y)
    tau = party_weights(p_basis0)
    aux = np.array([p_aux0, 1 - p_aux0])
    return ProtocolInstance(ProtocolKind.MDI, tau, tau, g, announcement_scheme().test_probabilities(aux), aux,
                            gram_B=g, announcement_dim=N_ANNOUNCE)


def observation_coefficients() -> np.ndarray:
    """beta[l, i, j, xi] for (X bit error, Y bit error, X pass, Y pass)."""
    beta = np.zeros((4, 4, 4, N_ANNOUNCE))
    for ka, kb, pi in SAME_BASIS_STATES:
        i, j = party_index(ka, pi), party_index(kb, pi)
        for xi in (0, 1):
            err = ka != (kb ^ xi)
            if err:
                beta[pi, i, j, xi] = 0.25
            beta[2 + pi, i, j, xi] = 0.25
    return beta


def phase_error_obs_blocks(p_aux0: float) -> list[np.ndarray]:
    """Observed phase-error POVM elements on the 16-dim joint ancilla, per xi."""
    s = np.diag([1.0, 1j])
    minus = np.array([1.0, -1.0]) / math.sqrt(2)
    u_cy = np.kron(np.diag([1.0, 0.0]), np.eye(2)) + np.kron(np.diag([0.0, 1.0]), pauli("Y"))
    sm = s @ minus
    core = u_cy.conj().T @ np.kron(np.outer(sm, sm.conj()), np.eye(2)) @ u_cy  # on A0 (x) B0
    xb = np.kron(np.eye(2), pauli("X"))
    blocks = []
    for xi in range(N_ANNOUNCE):
        if xi == 2:
            blocks.append(np.zeros((16, 16), dtype=complex))
            continue
        c = core if xi == 0 else xb @ core @ xb
        full = np.zeros((16, 16), dtype=complex)
        for (ka, kb), (ka2, kb2) in product(product((0, 1), repeat=2), repeat=2):
            full[4 * party_index(ka, 0) + party_index(kb, 0), 4 * party_index(ka2, 0) + party_index(kb2, 0)] = \
                c[2 * ka + kb, 2 * ka2 + kb2]
        blocks.append(p_aux0 * full)
    return blocks


def _extend_blocks(op8: np.ndarray) -> HermitianOperator:
    return block_diag([op8] * N_ANNOUNCE)


@lru_cache(maxsize=256)
def _operators_cached(mu_x: float, mu_y: float, p_basis0: float, p_aux0: float):
    inst = protocol_instance(mu_x, mu_y, p_basis0, p_aux0)
    v = reduced_isometry()
    spec16 = build_phase_error_operator(inst, phase_error_obs_blocks(p_aux0))
    e_blocks = [restrict(spec16.E_ph.block(x), v) for x in range(N_ANNOUNCE)]
    e_ph = block_diag(e_blocks)
    # inner products between same-basis joint states, in the fixed pair order
    pairs = [(joint_index(*a), joint_index(*b)) for b in SAME_BASIS_STATES_K for a in SAME_BASIS_STATES_K]
    p16, p_vals = build_inner_product_constraints(inst, [{pr: 1.0} for pr in pairs])
    p8 = [restrict(p.entries, v) for p in p16]
    # observation operators do not depend on the probabilities; build them from
    # an instance in which every test tuple has positive probability
    ref = protocol_instance(mu_x, mu_y, 0.5, 0.5)
    q16 = build_observation_constraints(ref, observation_coefficients())
    q_full = [block_diag([restrict(q.block(x), v) for x in range(N_ANNOUNCE)]) for q in q16]
    return e_ph, tuple(HermitianOperator(p) for p in p8), p_vals, tuple(q_full), spec16, inst


# states ordered by the pair-label k = 1 + s + 8 s'
SAME_BASIS_STATES_K = sorted(SAME_BASIS_STATES, key=lambda t: reduced_index(*t))


def build_pmqkd_operators(params: PmQkdParams, q_nom: Sequence[float] | None = None
                          ) -> tuple[PhaseErrorSpec, ConstraintSet, ProtocolInstance]:
    """Phase-error operator, constraints and protocol data on the reduced space.

    The phase-error operator is 24 x 24 (block diagonal over xi); the 64
    inner-product operators act on the 8-dim same-basis ancilla and are
    extended as P_k (x) I over the three announcement blocks; the four
    observation operators act on the full space.
    """
    e_ph, p8, p_vals, q_full, spec16, inst = _operators_cached(params.mu_x, params.mu_y, params.p_basis0,
                                                               params.p_aux0)
    q = np.zeros(4) if q_nom is None else np.asarray(q_nom, dtype=float)
    return (PhaseErrorSpec(spec16.E_obs_blocks, e_ph), ConstraintSet(p8, p_vals, q_full, q), inst)


def sdp_problem(mu_x: float, mu_y: float, q_nom: Sequence[float], p_basis0: float = 1.0, p_aux0: float = 1.0
                ) -> SdpProblem:
    """The phase-error SDP; defaults give the reference point used for certification."""
    e_ph, p8, p_vals, q_full, _, _ = _operators_cached(float(mu_x), float(mu_y), float(p_basis0), float(p_aux0))
    return SdpProblem(e_ph, tuple(_extend_blocks(p.entries) for p in p8), p_vals, q_full, np.asarray(q_nom))


# ---------------------------------------------------------------- channel


def _click_probabilities(mean_correct: float, mean_wrong: float, p_d: float) -> tuple[float, float]:
    """(pass, pass-with-bit-error) for two threshold detectors."""
    pc = 1 - math.exp(-mean_correct) * (1 - p_d)
    pw = 1 - math.exp(-mean_wrong) * (1 - p_d)
    p_pass = pc * (1 - pw) + pw * (1 - pc)
    return p_pass, pw * (1 - pc)


def basis_rates(mu: float, channel: ChannelModel) -> tuple[float, float]:
    """(p_pass, joint probability of pass and bit error) for one basis."""
    ea, eb = channel.arm_transmittances()
    good = (math.sqrt(ea) + math.sqrt(eb)) ** 2 * mu / 2
    bad = (math.sqrt(ea) - math.sqrt(eb)) ** 2 * mu / 2
    return _click_probabilities(good, bad, channel.dark_count)


def simulate_channel_nominal(params: PmQkdParams, channel: ChannelModel) -> NominalStats:
    px, ex = basis_rates(params.mu_x, channel)
    py, ey = basis_rates(params.mu_y, channel)
    n = params.n_tot * (1 - params.p_trash)
    n_sig = n * params.p_basis0 ** 2 * params.p_aux0 * px
    norms = params.observation_norms()
    q = np.array([ex, ey, px, py])
    theta = tuple(float(v) for v in n * norms * q)
    return NominalStats(ex / px if px > 0 else 0.0, ey / py if py > 0 else 0.0, px, py, n_sig, theta)


def honest_gram(mu_x: float, mu_y: float, channel: ChannelModel) -> np.ndarray:
    """Renormalized state of the honest lossy channel on the reduced 24-dim space.

    G_xi[s, t] = <env_s|env_t> <c_s, d_s| Pi_xi |c_t, d_t>, where c and d are
    the beam-splitter output modes and Pi_xi the threshold-detector outcome
    with dark counts modelled as (1 - p_d)|0><0| for no click.
    """
    ea, eb = channel.arm_transmittances()
    pd = channel.dark_count
    amp = party_amplitudes(mu_x, mu_y)
    states = SAME_BASIS_STATES_K
    c, d, env = [], [], []
    for ka, kb, pi in states:
        a = amp[party_index(ka, pi)]
        b = amp[party_index(kb, pi)]
        c.append((math.sqrt(ea) * a + math.sqrt(eb) * b) / math.sqrt(2))
        d.append((math.sqrt(ea) * a - math.sqrt(eb) * b) / math.sqrt(2))
        env.append((math.sqrt(1 - ea) * a, math.sqrt(1 - eb) * b))
    n = len(states)
    blocks = [np.zeros((n, n), dtype=complex) for _ in range(N_ANNOUNCE)]
    for s, t in product(range(n), repeat=2):
        e = coherent_overlap(env[s][0], env[t][0]) * coherent_overlap(env[s][1], env[t][1])
        oc, od = coherent_overlap(c[s], c[t]), coherent_overlap(d[s], d[t])
        nc = (1 - pd) * math.exp(-(abs(c[s]) ** 2 + abs(c[t]) ** 2) / 2)
        nd = (1 - pd) * math.exp(-(abs(d[s]) ** 2 + abs(d[t]) ** 2) / 2)
        blocks[0][s, t] = e * (oc - nc) * nd
        blocks[1][s, t] = e * nc * (od - nd)
        blocks[2][s, t] = e * (oc * od) - blocks[0][s, t] - blocks[1][s, t]
    g = np.zeros((3 * n, 3 * n), dtype=complex)
    for x in range(N_ANNOUNCE):
        g[x * n:(x + 1) * n, x * n:(x + 1) * n] = blocks[x]
    return g


# ---------------------------------------------------------------- certificates


def certify(mu_x: float, mu_y: float, q_nom: Sequence[float], margin: float | None = None
            ) -> tuple[SdpProblem, DualCertificate]:
    """Solve and verify the dual at the reference point p_aux0 = p_basis0 = 1."""
    problem = sdp_problem(mu_x, mu_y, q_nom)
    return problem, solve_dual_with_margin(problem, margin)


def scale_certificate(cert: DualCertificate, source: tuple[float, float], target: tuple[float, float],
                      mu: tuple[float, float] | None = None) -> DualCertificate:
    """Rescale multipliers by p'_aux0 p'_basis0^2 / (p_aux0 p_basis0^2).

    ``source`` and ``target`` are (p_aux0, p_basis0).  When ``mu`` is given,
    the result is re-verified against the target phase-error operator and a
    failure raises ``RuntimeError``.
    """
    (pa, pb), (pa2, pb2) = source, target
    if pa <= 0 or pb <= 0:
        raise ValueError("source parameters must be positive")
    if not cert.verification.accepted:
        raise ValueError("only accepted certificates can be rescaled")
    factor = pa2 * pb2 ** 2 / (pa * pb ** 2)
    if factor == 1.0:
        return cert
    scaled = cert.scaled(factor)
    if mu is None:
        return replace(scaled, verification=Verification(
            cert.verification.max_eig * factor, cert.verification.radius * factor, True))
    problem = sdp_problem(mu[0], mu[1], np.zeros(4), p_basis0=pb2, p_aux0=pa2)
    v = verify_certificate(problem, scaled)
    if not v.accepted:
        raise RuntimeError(f"scaled certificate fails verification (max_eig={v.max_eig}, radius={v.radius})")
    return replace(scaled, verification=v)


def plob_bound(channel: ChannelModel) -> float:
    """-log2(1 - eta_tot), the repeaterless secret-key capacity per pulse."""
    eta = channel.eta_tot
    if not 0.0 < eta <= 1.0:
        raise ValueError("end-to-end transmittance must lie in (0, 1]")
    if eta == 1.0:
        return math.inf
    return -math.log1p(-eta) / math.log(2)


# ---------------------------------------------------------------- trash rounds


@dataclass(frozen=True, eq=False)
class TrashDistribution:
    """Spectral data of the trash-round observable and its outcome distribution."""

    omegas: np.ndarray
    probabilities: np.ndarray
    stats: TrashStatistics


def trash_distribution(params: PmQkdParams, cert: DualCertificate) -> TrashDistribution:
    """Eigen-decomposition of T(sum lambda P) on Alice and Bob's ancillas.

    ``cert`` must already be scaled to ``params``.
    """
    _, p8, p_vals, _, _, _ = _operators_cached(params.mu_x, params.mu_y, params.p_basis0, params.p_aux0)
    v = reduced_isometry()
    comb8 = sum(c * p.entries for c, p in zip(cert.lam, p8))
    comb16 = v @ comb8 @ v.T
    tau = party_weights(params.p_basis0)
    w = np.kron(tau, tau)
    p_obs = renormalize(comb16, w, "forward")
    g = party_gram(params.mu_x, params.mu_y)
    rho_a = np.sqrt(np.outer(tau, tau)) * g.conj()
    rho = np.kron(rho_a, rho_a)
    es = eigendecompose(0.5 * (p_obs + p_obs.conj().T))
    probs = np.real(np.einsum("ki,kl,li->i", es.eigenvectors.conj(), rho, es.eigenvectors))
    probs = np.clip(probs, 0.0, None)
    probs = probs / probs.sum()
    om = es.eigenvalues
    pt = params.p_trash
    stats = TrashStatistics(mean=pt * float(om @ probs), second_moment=pt * float(om ** 2 @ probs),
                            omega_max=max(float(om.max()), 0.0), omega_min=min(float(om.min()), 0.0))
    return TrashDistribution(om, probs, stats)


# ---------------------------------------------------------------- rates


@dataclass(frozen=True, eq=False)
class RateReport:
    params: PmQkdParams
    channel: ChannelModel
    nominal: NominalStats
    counts: ObservedCounts
    certificate: DualCertificate
    deviations: DeviationTerms
    result: FiniteKeyResult
    rate_asymptotic: float
    e_ph_asymptotic: float

    @property
    def rate_finite(self) -> float:
        return self.result.rate_per_pulse


def observation_totals(params: PmQkdParams, counts: ObservedCounts) -> np.ndarray:
    """N_l: observed counts divided by their normalization factors."""
    norms = params.observation_norms()
    raw = np.array([counts.n_bit_x, counts.n_bit_y, counts.n_pass_x, counts.n_pass_y])
    return raw / norms


def finite_rate(params: PmQkdParams, channel: ChannelModel, counts: ObservedCounts | None = None,
                reference: DualCertificate | None = None, nominal: NominalStats | None = None) -> RateReport:
    """Finite-size key rate per pulse.

    Parameters
    ----------
    reference : DualCertificate, optional
        Accepted certificate at the reference point.  Solved from the nominal
        statistics when omitted.
    counts : ObservedCounts, optional
        Observed counts; the nominal expectation is used when omitted.
    """
    nominal = nominal or simulate_channel_nominal(params, channel)
    if reference is None:
        _, reference = certify(params.mu_x, params.mu_y, nominal.q_nom)
    if not reference.verification.accepted:
        raise ValueError("refusing to use an unverified certificate")
    counts = counts or nominal.expected_counts(params)
    cert = scale_certificate(reference, (1.0, 1.0), (params.p_aux0, params.p_basis0))
    trash = trash_distribution(params, cert)
    n_l = observation_totals(params, counts)
    budget = params.budget
    dev = compose_bounds(budget, cert.eta, params.n_tot, counts.n_sig, nominal.n_sig_nom, n_l,
                         params.observation_norms(), nominal.theta_q_nom, params.p_trash, trash.stats)
    e_bit = counts.n_bit_x / counts.n_pass_x if counts.n_pass_x > 0 else 0.0
    _, _, p_vals, _, _, _ = _operators_cached(params.mu_x, params.mu_y, params.p_basis0, params.p_aux0)
    inputs = FiniteKeyInputs(params.n_tot, counts.n_sig, n_l, cert, p_vals, params.p_trash, budget,
                             params.f_EC, min(e_bit, 0.5))
    m_u = m_ph_upper(inputs, dev)
    res = key_length(inputs, m_u)
    # asymptotic reference with the same certificate and nominal statistics
    bound_ref = linear_bound(reference, p_vals, nominal.q_nom)
    e_ph = bound_ref / nominal.p_pass_x_nom if nominal.p_pass_x_nom > 0 else 0.5
    q_sig = (1 - params.p_trash) * params.p_basis0 ** 2 * params.p_aux0 * nominal.p_pass_x_nom
    r_asym = asymptotic_rate(q_sig, e_ph, min(nominal.e_bit_x_nom, 0.5), params.f_EC)
    return RateReport(params, channel, nominal, counts, cert, dev, res, r_asym, e_ph)


@dataclass(frozen=True)
class SearchSpec:
    mu_x: tuple[float, float] = (1e-3, 0.2)
    mu_y: tuple[float, float] = (0.01, 0.5)
    p_basis0: tuple[float, float] = (0.6, 0.98)
    p_aux0: tuple[float, float] = (0.6, 0.98)
    p_trash: tuple[float, float] = (1e-3, 0.2)
    coarse_points: int = 5
    fine_points: int = 3
    prob_points: int = 4

    def __post_init__(self):
        for name in ("mu_x", "mu_y", "p_basis0", "p_aux0", "p_trash"):
            lo, hi = getattr(self, name)
            if not 0 < lo <= hi:
                raise ValueError(f"empty or invalid range for {name}: {(lo, hi)}")
        for name in ("p_basis0", "p_aux0", "p_trash"):
            if getattr(self, name)[1] >= 1:
                raise ValueError(f"{name} range must stay below 1")


def _log_grid(lo: float, hi: float, n: int) -> np.ndarray:
    if lo == hi or n <= 1:
        return np.array([lo])
    return np.geomspace(lo, hi, n)


def _lin_grid(lo: float, hi: float, n: int) -> np.ndarray:
    if lo == hi or n <= 1:
        return np.array([lo])
    return np.linspace(lo, hi, n)


@dataclass(frozen=True, eq=False)
class OptimizationResult:
    params: PmQkdParams
    report: RateReport
    evaluations: int


def _best_probabilities(base: PmQkdParams, channel: ChannelModel, spec: SearchSpec, reference: DualCertificate,
                        nominal_cache: dict, grids: tuple[np.ndarray, np.ndarray, np.ndarray]):
    best = None
    count = 0
    for pb, pa, pt in product(*grids):
        p = replace(base, p_basis0=float(pb), p_aux0=float(pa), p_trash=float(pt))
        try:
            rep = finite_rate(p, channel, reference=reference)
        except (ValueError, RuntimeError):
            continue
        count += 1
        if best is None or rep.rate_finite > best.rate_finite:
            best = rep
    return best, count


def optimize_parameters(channel: ChannelModel, spec: SearchSpec = SearchSpec(), base: PmQkdParams | None = None
                        ) -> OptimizationResult:
    """Two-stage grid search maximizing the finite rate at nominal counts.

    The SDP is solved once per intensity pair; the probability parameters
    are searched by rescaling that certificate.
    """
    base = base or PmQkdParams()
    evaluations = 0

    def evaluate(mx, my, prob_grids):
        nonlocal evaluations
        p0 = replace(base, mu_x=float(mx), mu_y=float(my))
        nominal = simulate_channel_nominal(replace(p0, p_basis0=0.5, p_aux0=0.5), channel)
        try:
            _, ref = certify(mx, my, nominal.q_nom)
        except RuntimeError:
            return None
        rep, n = _best_probabilities(p0, channel, spec, ref, {}, prob_grids)
        evaluations += n
        return rep

    def prob_grids(center: PmQkdParams | None, shrink: float):
        if center is None:
            return (_lin_grid(*spec.p_basis0, spec.prob_points), _lin_grid(*spec.p_aux0, spec.prob_points),
                    _log_grid(*spec.p_trash, spec.prob_points))
        out = []
        for name, log in (("p_basis0", False), ("p_aux0", False), ("p_trash", True)):
            lo, hi = getattr(spec, name)
            c = getattr(center, name)
            if log:
                f = (hi / lo) ** (shrink / 2)
                g = _log_grid(max(lo, c / f), min(hi, c * f), spec.fine_points)
            else:
                h = (hi - lo) * shrink / 2
                g = _lin_grid(max(lo, c - h), min(hi, c + h), spec.fine_points)
            out.append(np.unique(np.append(g, c)))
        return tuple(out)

    best = None
    mxs = _log_grid(*spec.mu_x, spec.coarse_points)
    mys = _log_grid(*spec.mu_y, spec.coarse_points)
    coarse_probs = prob_grids(None, 1.0)
    for mx, my in product(mxs, mys):
        rep = evaluate(mx, my, coarse_probs)
        if rep is not None and (best is None or rep.rate_finite > best.rate_finite):
            best = rep
    if best is None:
        raise ValueError("no feasible parameter point in the search region")
    # refinement around the coarse optimum
    step_x = (spec.mu_x[1] / spec.mu_x[0]) ** (1 / max(spec.coarse_points - 1, 1))
    step_y = (spec.mu_y[1] / spec.mu_y[0]) ** (1 / max(spec.coarse_points - 1, 1))
    c = best.params
    fx = _log_grid(max(spec.mu_x[0], c.mu_x / step_x ** 0.5), min(spec.mu_x[1], c.mu_x * step_x ** 0.5),
                   spec.fine_points)
    fy = _log_grid(max(spec.mu_y[0], c.mu_y / step_y ** 0.5), min(spec.mu_y[1], c.mu_y * step_y ** 0.5),
                   spec.fine_points)
    fine_probs = prob_grids(c, 1.0 / max(spec.prob_points - 1, 1))
    for mx, my in product(fx, fy):
        rep = evaluate(mx, my, fine_probs)
        if rep is not None and rep.rate_finite > best.rate_finite:
            best = rep
    return OptimizationResult(best.params, best, evaluations)


# ---------------------------------------------------------------- Monte Carlo coverage


@dataclass(frozen=True)
class CoverageReport:
    """Empirical violation frequencies of each one-sided bound.

    ``allowed[name]`` is the failure probability charged to the bound and
    ``threshold[name]`` adds three binomial standard deviations.  A bound
    whose allowance is below 10 / trials cannot be checked meaningfully;
    ``measurable`` is then False and every ``passed`` entry is None.
    """

    trials: int
    n_tot: float
    source: str
    seed: int | None
    frequencies: dict
    allowed: dict
    threshold: dict
    passed: dict
    measurable: bool
    mean_phase_errors: float
    mean_m_ph_upper: float

    @property
    def all_passed(self) -> bool:
        return self.measurable and all(self.passed.values())

    def to_dict(self) -> dict:
        return {**asdict(self), "all_passed": self.all_passed}


def _phase_error_probability(params: PmQkdParams, channel: ChannelModel, nominal: NominalStats,
                             source: str) -> float:
    """Per-round probability of a signal round carrying a phase error."""
    problem = sdp_problem(params.mu_x, params.mu_y, nominal.q_nom)
    if source == "worst":
        from .sdp import solve_primal
        value = solve_primal(problem).value
    elif source == "honest":
        value = float(np.real(np.sum(problem.objective.entries * honest_gram(params.mu_x, params.mu_y, channel).T)))
    else:
        raise ValueError(f"unknown source {source!r}; expected 'worst' or 'honest'")
    value = min(max(value, 0.0), nominal.p_pass_x_nom)
    return (1 - params.p_trash) * params.phase_error_scale * value


def monte_carlo_validate(params: PmQkdParams, channel: ChannelModel, trials: int,
                         budget: EpsilonBudget | None = None, seed: int | None = 0, source: str = "worst",
                         reference: DualCertificate | None = None) -> CoverageReport:
    """Empirical coverage of the deviation bounds under i.i.d. rounds.

    Each round falls into one of: signal with or without phase error, X test
    with or without bit error (passing), Y test likewise, a trash round with
    one of the eigenvalues of the trash observable, or an unused outcome.
    The phase-error probability comes from the worst-case state of the SDP
    (``source='worst'``) or from the honest channel (``source='honest'``).
    The remaining probabilities are fixed by the constraints and equal the
    nominal channel statistics.

    Parameters
    ----------
    params : PmQkdParams
        ``n_tot`` sets the rounds per trial; ``params.budget`` is replaced by
        ``budget`` when given.
    trials : int
        Number of independent protocol runs.
    """
    if trials < 1:
        raise ValueError("trials must be positive")
    if budget is not None:
        params = replace(params, budget=budget)
    budget = params.budget
    n = int(round(params.n_tot))
    if n < 1:
        raise ValueError("n_tot must be at least one round")
    nominal = simulate_channel_nominal(params, channel)
    if reference is None:
        _, reference = certify(params.mu_x, params.mu_y, nominal.q_nom)
    cert = scale_certificate(reference, (1.0, 1.0), (params.p_aux0, params.p_basis0))
    trash = trash_distribution(params, cert)
    pt = params.p_trash
    q = nominal.q_nom
    x_w = (1 - pt) * params.p_basis0 ** 2 * params.p_aux1
    y_w = (1 - pt) * params.p_basis1 ** 2
    p_sig = (1 - pt) * params.phase_error_scale * q[2]
    p_ph = min(_phase_error_probability(params, channel, nominal, source), p_sig)
    probs = np.concatenate([[p_ph, p_sig - p_ph, x_w * q[0], x_w * (q[2] - q[0]), y_w * q[1], y_w * (q[3] - q[1])],
                            pt * trash.probabilities])
    probs = np.clip(probs, 0.0, None)
    probs = np.append(probs, max(1.0 - probs.sum(), 0.0))
    probs = probs / probs.sum()

    rng = np.random.default_rng(seed)
    draws = rng.multinomial(n, probs, size=trials)
    omegas = trash.omegas
    stats = trash.stats
    norms = params.observation_norms()
    eta = cert.eta
    names = ["phase_error"] + [f"observation_{l}" for l in range(4)] + ["trash_kato", "bernstein_lower",
                                                                        "bernstein_upper", "m_ph_upper"]
    viol = dict.fromkeys(names, 0)
    allowed = {"phase_error": budget.eps_ph_count, "trash_kato": budget.eps_kato_p,
               "bernstein_lower": budget.eps_bern, "bernstein_upper": budget.eps_bern,
               "m_ph_upper": min(budget.kato_total + budget.eps_bern, 1.0)}
    for l in range(4):
        allowed[f"observation_{l}"] = budget.eps_q[l] if eta[l] != 0 else 0.0
    exp_q = np.array([x_w * q[0], y_w * q[1], x_w * q[2], y_w * q[3]]) * n
    d_bern = bernstein_trash(n, stats, budget.eps_bern)
    theta_p_nom = n * (stats.mean - stats.omega_min) / stats.width
    kato_p = kato_optimal_params(float(n), min(max(theta_p_nom, 0.0), float(n)), budget.eps_kato_p,
                                 Direction.UPPER)
    m_total = 0.0
    m_u_total = 0.0
    for row in draws:
        m_ph = row[0]
        n_sig = row[0] + row[1]
        raw = np.array([row[2], row[4], row[2] + row[3], row[4] + row[5]], dtype=float)
        counts = ObservedCounts(float(n_sig), raw[0], raw[1], raw[2], raw[3])
        chi_sum = float(omegas @ row[6:6 + omegas.size])
        if m_ph - n * p_ph > delta_ph(n, n_sig, nominal.n_sig_nom, budget.eps_ph_count):
            viol["phase_error"] += 1
        for l in range(4):
            if eta[l] == 0:
                continue
            direction = Direction.UPPER if eta[l] > 0 else Direction.LOWER
            kp = kato_optimal_params(float(n), min(max(nominal.theta_q_nom[l], 0.0), float(n)),
                                     budget.eps_q[l], direction)
            dev = raw[l] - exp_q[l] if direction is Direction.UPPER else exp_q[l] - raw[l]
            if dev > kato_delta(kp, raw[l]):
                viol[f"observation_{l}"] += 1
        theta_p = (chi_sum - n * stats.omega_min) / stats.width
        if theta_p - theta_p_nom > kato_delta(kato_p, theta_p):
            viol["trash_kato"] += 1
        if n * stats.mean - chi_sum > d_bern:
            viol["bernstein_lower"] += 1
        if chi_sum - n * stats.mean > d_bern:
            viol["bernstein_upper"] += 1
        rep = finite_rate(params, channel, counts=counts, reference=reference, nominal=nominal)
        m_u = rep.result.m_ph_upper
        if m_ph > m_u:
            viol["m_ph_upper"] += 1
        m_total += m_ph
        m_u_total += m_u
    freqs = {k: v / trials for k, v in viol.items()}
    threshold = {k: a + 3 * math.sqrt(a * (1 - a) / trials) for k, a in allowed.items()}
    checked = [a for a in allowed.values() if a > 0]
    measurable = all(a >= 10 / trials for a in checked)
    passed = {k: (freqs[k] <= threshold[k]) if measurable else None for k in names}
    return CoverageReport(trials, float(n), source, seed, freqs, allowed, threshold, passed, measurable,
                          m_total / trials, m_u_total / trials)
