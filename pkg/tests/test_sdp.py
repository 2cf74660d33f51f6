from __future__ import annotations

import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from finite_qkd.operators import HermitianOperator, block_diag
from finite_qkd.pmqkd import ChannelModel, PmQkdParams, certify, sdp_problem, simulate_channel_nominal
from finite_qkd.sdp import (DualCertificate, SdpError, SdpProblem, SolveStatus, Verification, certificate_from_dict,
                            certificate_to_dict, default_margin, dumps_certificate, identity_combination,
                            linear_bound, problem_from_dict, problem_to_dict, solve_dual_with_margin,
                            solve_primal, verify_certificate)

from oracles import brute_force_primal, random_sdp_instance

Z = np.diag([1.0, -1.0])


def small_problem(objective, ops, vals) -> SdpProblem:
    return SdpProblem(HermitianOperator(objective), tuple(HermitianOperator(o) for o in ops), np.asarray(vals), (),
                      np.zeros(0))


@pytest.fixture(scope="module")
def pm100():
    ch = ChannelModel(100.0)
    params = PmQkdParams(mu_x=0.03, mu_y=0.2)
    nominal = simulate_channel_nominal(params, ch)
    problem, cert = certify(params.mu_x, params.mu_y, nominal.q_nom)
    return problem, cert


class TestPrimal:
    def test_pinned_state(self):
        p = small_problem(np.diag([1.0, 0.0]), [np.eye(2), Z], [1.0, -1.0])
        res = solve_primal(p)
        assert res.value == pytest.approx(0.0, abs=1e-8)
        assert np.allclose(res.optimizer, np.diag([0.0, 1.0]), atol=1e-6)

    def test_trace_only(self):
        p = small_problem(np.diag([1.0, 0.0]), [np.eye(2)], [1.0])
        value, g = solve_primal(p)
        assert value == pytest.approx(1.0, abs=1e-8)
        assert np.trace(g).real == pytest.approx(1.0, abs=1e-8)

    def test_infeasible_reports_family(self):
        p = small_problem(np.diag([1.0, 0.0]), [np.eye(2), Z], [1.0, 2.0])
        with pytest.raises(SdpError) as info:
            solve_primal(p)
        assert info.value.status is SolveStatus.INFEASIBLE
        assert info.value.details["family"] == "gram"

    def test_infeasible_observation_family(self):
        g = (HermitianOperator(np.eye(2)),)
        p = SdpProblem(HermitianOperator(np.diag([1.0, 0.0])), g, np.array([1.0]), (HermitianOperator(Z),),
                       np.array([3.0]))
        with pytest.raises(SdpError) as info:
            solve_primal(p)
        assert info.value.details["family"] == "observation"

    def test_matches_top_eigenvalue(self):
        rng = np.random.default_rng(4)
        a = rng.normal(size=(3, 3)) + 1j * rng.normal(size=(3, 3))
        e = (a + a.conj().T) / 2
        res = solve_primal(small_problem(e, [np.eye(3)], [1.0]))
        assert res.value == pytest.approx(np.linalg.eigvalsh(e)[-1], abs=1e-7)

    @pytest.mark.parametrize("seed", range(5))
    def test_random_instance_against_cholesky_oracle(self, seed):
        rng = np.random.default_rng(100 + seed)
        p = random_sdp_instance(rng, 3, 3)
        assert solve_primal(p).value == pytest.approx(brute_force_primal(p, seed=seed), abs=1e-5)

    def test_block_structure_respected(self):
        e = block_diag([np.diag([1.0, 0.0]), np.diag([0.0, 2.0])])
        ops = (HermitianOperator(np.eye(4), e.blocks),)
        p = SdpProblem(e, ops, np.array([1.0]), (), np.zeros(0))
        res = solve_primal(p)
        assert res.value == pytest.approx(2.0, abs=1e-7)
        assert np.max(np.abs(res.optimizer[:2, 2:])) == 0.0

    def test_rejects_cross_block_constraint(self):
        e = block_diag([np.eye(1), np.eye(1)])
        with pytest.raises(ValueError):
            SdpProblem(e, (HermitianOperator(np.ones((2, 2))),), np.array([1.0]), (), np.zeros(0))


class TestDual:
    def test_zero_objective(self):
        p = small_problem(np.zeros((2, 2)), [np.eye(2)], [1.0])
        cert = solve_dual_with_margin(p, margin=0.0)
        assert cert.verification.accepted
        assert cert.bound_value == pytest.approx(0.0, abs=1e-8)

    @pytest.mark.parametrize("seed", range(4))
    def test_strong_duality(self, seed):
        p = random_sdp_instance(np.random.default_rng(seed), 4, 3)
        primal = solve_primal(p).value
        cert = solve_dual_with_margin(p, margin=0.0)
        assert cert.verification.accepted
        assert cert.bound_value == pytest.approx(primal, abs=1e-6)
        assert cert.bound_value >= primal - 1e-6

    def test_default_margin(self):
        p = random_sdp_instance(np.random.default_rng(9), 3, 2)
        assert default_margin(p) == pytest.approx(1e-8 * np.linalg.norm(p.objective.entries, 2))
        cert = solve_dual_with_margin(p)
        assert cert.margin == default_margin(p)
        assert cert.verification.max_eig + cert.verification.radius <= -0.5 * cert.margin

    def test_negative_margin_rejected(self):
        p = random_sdp_instance(np.random.default_rng(9), 3, 2)
        with pytest.raises(ValueError):
            solve_dual_with_margin(p, margin=-1.0)

    def test_identity_combination(self):
        p = random_sdp_instance(np.random.default_rng(2), 3, 3)
        c = identity_combination(p)
        m = sum(ci * op.entries for ci, op in zip(c, p.constraint_ops))
        assert np.allclose(m, np.eye(3), atol=1e-10)

    def test_pmqkd_certificate_accepted(self, pm100):
        _, cert = pm100
        assert cert.verification.accepted
        assert cert.verification.max_eig + cert.verification.radius <= 0


class TestVerify:
    def cert(self, lam, eta=()):
        return DualCertificate(np.asarray(lam, float), np.asarray(eta, float), 0.0, 0.0,
                               Verification(np.nan, np.nan, False), {})

    def test_negative_identity_accepted(self):
        p = small_problem(-np.eye(2), [np.eye(2)], [1.0])
        v = verify_certificate(p, self.cert([0.0]))
        assert v.accepted and v.max_eig == pytest.approx(-1.0)

    def test_positive_identity_rejected(self):
        p = small_problem(np.eye(2), [np.eye(2)], [1.0])
        assert not verify_certificate(p, self.cert([0.0])).accepted

    def test_perturbed_pmqkd_rejected(self, pm100):
        problem, cert = pm100
        m = problem.objective.entries + sum(c * op.entries for c, op in zip(cert.multipliers, problem.constraint_ops))
        w, v = np.linalg.eigh(m[:8, :8])  # the xi = 0 block, where the observations act
        top = np.zeros(m.shape[0], dtype=complex)
        top[:8] = v[:, -1]
        overlaps = [float(np.real(top.conj() @ q.entries @ top)) for q in problem.obs_ops]
        l = int(np.argmax(overlaps))
        assert overlaps[l] > 0
        eta = cert.eta.copy()
        eta[l] += 1.01 * (abs(w[-1]) + 2 * cert.margin) / overlaps[l]
        bumped = DualCertificate(cert.lam, eta, cert.margin, cert.bound_value, cert.verification, {})
        assert not verify_certificate(problem, bumped).accepted

    def test_margin_monotone(self):
        p = random_sdp_instance(np.random.default_rng(5), 3, 3)
        for delta in (1e-6, 1e-4):
            cert = solve_dual_with_margin(p, margin=delta)
            v = cert.verification
            assert v.accepted and v.max_eig <= -delta * (1 - 1e-6) + v.radius


class TestLinearBound:
    def test_zero_multipliers(self):
        cert = DualCertificate(np.zeros(2), np.zeros(1), 0.0, 0.0, Verification(0, 0, True), {})
        assert linear_bound(cert, [0.3, 0.4], [0.5]) == 0.0

    def test_at_nominal_equals_primal(self, pm100):
        problem, cert = pm100
        primal = solve_primal(problem).value
        assert linear_bound(cert, problem.p_vals, problem.q_vals) == pytest.approx(primal, abs=1e-6)

    @pytest.mark.parametrize("seed", range(4))
    def test_bound_dominates_sampled_states(self, seed):
        rng = np.random.default_rng(seed)
        p = random_sdp_instance(rng, 3, 3)
        cert = solve_dual_with_margin(p)
        ops = p.constraint_ops
        for _ in range(20):
            a = rng.normal(size=(3, 3)) + 1j * rng.normal(size=(3, 3))
            g = a @ a.conj().T
            vals = np.array([np.trace(o.entries @ g).real for o in ops])
            bound = linear_bound(cert, vals, [])
            assert bound >= np.trace(p.objective.entries @ g).real - 1e-9


class TestSerialization:
    def test_certificate_round_trip(self, pm100):
        problem, cert = pm100
        record = json.loads(dumps_certificate(cert, problem))
        back, h = certificate_from_dict(record)
        assert h == problem.operator_hash()
        assert np.array_equal(back.lam, cert.lam) and np.array_equal(back.eta, cert.eta)
        assert back.verification == cert.verification
        assert "timestamp" not in record

    def test_hash_ignores_observations(self, pm100):
        problem, _ = pm100
        assert problem.with_observations(problem.q_vals * 2).operator_hash() == problem.operator_hash()
        other = sdp_problem(0.031, 0.2, problem.q_vals)
        assert other.operator_hash() != problem.operator_hash()

    def test_problem_round_trip(self):
        p = random_sdp_instance(np.random.default_rng(1), 3, 2)
        back = problem_from_dict(json.loads(json.dumps(problem_to_dict(p))))
        assert back.operator_hash() == p.operator_hash()
        assert np.array_equal(back.q_vals, p.q_vals)


@settings(max_examples=15)
@given(st.integers(1, 4), st.integers(1, 3), st.integers(0, 2 ** 32 - 1))
def test_weak_duality_property(dim, n_cons, seed):
    p = random_sdp_instance(np.random.default_rng(seed), dim, n_cons)
    primal = solve_primal(p).value
    cert = solve_dual_with_margin(p)
    assert cert.verification.accepted
    assert linear_bound(cert, p.p_vals, p.q_vals) >= primal - 1e-6
