import io
import math
import warnings

import numpy as np
import pytest
import sympy as sp

from msqkd.channels import (
    AttackOperator,
    InitialState,
    honest_attack,
    random_symmetric_attack,
    semi_honest_attack,
    semi_honest_f_norms,
)
from msqkd.keyrate import (
    InconsistentInputWarning,
    InconsistentObservation,
    KeyRateReport,
    ObservedParams,
    bound_chain,
    check_Q,
    conditional_states,
    devetak_winter,
    estimate_q_from_pw,
    exact_IAC,
    f0_upper_bound,
    find_threshold,
    keyrate_semi_honest,
    keyrate_worst_high,
    keyrate_worst_low,
    p_a_formula,
    q_z_formula,
    thm1_bound,
    write_curve_csv,
)
from msqkd.quantum import binary_entropy, trace_norm


# -- closed forms ----------------------------------------------------------------------

def test_p_a_formula_examples():
    assert p_a_formula(0, (0, 1, 0, 0)) == pytest.approx(0.5)
    for Q in (0.0, 0.3, 1.0):
        assert p_a_formula(Q, (1, 1, 1, 1)) == pytest.approx(1.0)
    p = q = 0.2
    Q = p / 2
    expected = (1 - Q) * (1 - q / 2) / 2 + Q * q / 4
    assert p_a_formula(Q, semi_honest_f_norms(q)) == pytest.approx(expected)


def test_q_z_formula_examples():
    assert q_z_formula(0.1, 0, 0, 0.4) == 0
    p = q = 0.2
    f = semi_honest_f_norms(q)
    p_a = p_a_formula(p / 2, f)
    assert q_z_formula(p / 2, f[2], f[3], p_a) == pytest.approx(p * q / (8 * p_a))
    assert q_z_formula(0.3, 1, 1, 0.3) == pytest.approx(1.0)
    with pytest.raises(ValueError):
        q_z_formula(0.1, 0.5, 0.5, 0)


def test_q_z_formula_clamps_inconsistent_inputs():
    with pytest.warns(InconsistentInputWarning):
        assert q_z_formula(0.5, 1, 1, 0.2) == 1.0


def test_thm1_bound_examples():
    assert thm1_bound(0, (0, 1, 0, 0), 0.5).value == 0
    p, q = 0.2, 0.2
    Q = p / 2
    f = semi_honest_f_norms(q)
    p_a = p_a_formula(Q, f)
    expected = (1 - Q) / p_a * math.sqrt(q / 4 * (1 - 3 * q / 4)) + Q / p_a * q / 4
    b = thm1_bound(Q, f, p_a)
    assert b.value == pytest.approx(expected)
    assert b.loose == pytest.approx((1 - Q) / p_a * math.sqrt(q / 4) + Q / p_a)
    capped = thm1_bound(0.4, (1, 1, 1, 1), 1.0)
    assert capped.value == 1.0
    big = thm1_bound(0.2, (0.5, 0.5, 0.5, 0.5), 0.1)
    assert big.capped and big.value == 1.0 and big.tight > 1


def test_devetak_winter():
    assert devetak_winter(1, 0) == 1
    assert devetak_winter(0.8, 0.8) == 0
    rep = keyrate_semi_honest(0.2, 0.2)
    f = semi_honest_f_norms(0.2)
    i_ab = 1 - binary_entropy(rep.inputs.Q_Z)
    assert devetak_winter(i_ab, thm1_bound(0.1, f, rep.inputs.p_a).value) == pytest.approx(rep.rate, abs=1e-15)


def test_report_rate_is_exact_difference():
    rep = KeyRateReport.build(0.9, 0.35, "x", ObservedParams(0.1, 0.01, 0.4))
    assert rep.rate == 0.9 - 0.35


def test_observed_params_range():
    with pytest.raises(ValueError):
        ObservedParams(Q=1.2, Q_Z=0, p_a=0.5)


# -- exact information -------------------------------------------------------------------

def test_exact_iac_honest_is_zero():
    assert exact_IAC(honest_attack(1), 0.0) == pytest.approx(0, abs=1e-12)


def test_exact_iac_requires_symmetric_attack():
    e = np.diag([0, 1, 1, 1]).astype(complex)
    f = np.diag([1, 0, 0, 0]).astype(complex)
    biased = AttackOperator.from_computational_images(e, f, 1)
    with pytest.raises(ValueError, match="symmetric"):
        exact_IAC(biased, 0.0)


def saturating_attack(norm):
    # f0 orthogonal to f1 with equal norms, f2 = f3 = 0.
    f = np.zeros((4, 4), dtype=complex)
    f[0, 0] = math.sqrt(norm)
    f[1, 1] = 1j * math.sqrt(norm)
    e = np.diag(np.sqrt(1 - np.real(np.diag(f.conj() @ f.T)))).astype(complex)
    return AttackOperator(1, e, f)


@pytest.mark.parametrize("norm", [0.1, 0.5, 1.0])
def test_saturation_against_trace_norm(norm):
    attack = saturating_attack(norm)
    rho0, rho1, p_a = conditional_states(attack, 0.0)
    assert p_a == pytest.approx(norm)
    half = 0.5 * trace_norm(rho0 - rho1)
    assert half == pytest.approx(1.0, abs=1e-12)
    assert exact_IAC(attack, 0.0) == pytest.approx(half, abs=1e-9)
    assert thm1_bound(0.0, attack.f_norms, p_a).value == pytest.approx(1.0, abs=1e-12)


def test_check_q_warns_on_mismatch():
    init = InitialState.worst_case(0.1)
    assert check_Q(init, 0.1) == pytest.approx(0.1)
    with pytest.warns(InconsistentInputWarning):
        check_Q(init, 0.2)


def test_bound_chain_domination():
    gen = np.random.default_rng(2024)
    worst = {}
    for i in range(1000):
        d_C = (1, 2, 4)[i % 3]
        Q = (0.0, 0.05, 0.1)[(i // 3) % 3]
        chain = bound_chain(random_symmetric_attack(d_C, gen), Q)
        assert chain.violations() == [], (i, chain)
        assert chain.holevo <= min(chain.tight, 1.0) + 1e-9
        assert chain.tight <= chain.loose + 1e-9
        for name, (lhs, rhs) in chain.links().items():
            worst[name] = min(worst.get(name, np.inf), rhs - lhs)
    assert all(v >= -1e-9 for v in worst.values())


def test_semi_honest_exact_vs_bound_at_q_01():
    Q = 0.1
    p = q = 2 * Q
    attack = semi_honest_attack(q)
    _, _, p_a = conditional_states(attack, Q)
    rep = keyrate_semi_honest(p, q)
    assert p_a == pytest.approx(rep.inputs.p_a, abs=1e-12)
    exact = exact_IAC(attack, Q)
    assert 0 <= exact <= rep.i_ac_bound + 1e-12
    exact_rate = 1 - binary_entropy(rep.inputs.Q_Z) - exact
    assert exact_rate >= rep.rate
    # intermediate value of the bound-based rate
    assert 0.2 < rep.rate < 0.6
    assert rep.rate == pytest.approx(0.440248, abs=1e-5)


# -- estimation helpers --------------------------------------------------------------------

def test_estimate_q_from_pw():
    assert estimate_q_from_pw(0.3, 0.3 / 4) == pytest.approx(0)
    assert estimate_q_from_pw(0.0, 0.25) == pytest.approx(1)
    for p in (0.05, 0.2, 0.4):
        p_w = (1 - p) * p / 4 + p / 4
        assert estimate_q_from_pw(p, p_w) == pytest.approx(p)
    with pytest.raises(InconsistentObservation):
        estimate_q_from_pw(0.2, 0.01)
    with pytest.raises(ValueError):
        estimate_q_from_pw(1.0, 0.3)


def test_f0_upper_bound_examples():
    assert f0_upper_bound(0, 0.04).value == pytest.approx(0.2)
    assert f0_upper_bound(0.3, 0, f2=0).value == 0
    expected = math.sqrt(0.95) * (math.sqrt(0.05) + math.sqrt(0.05)) / 0.95
    assert f0_upper_bound(0.05, 0.05).value == pytest.approx(expected)
    clamped = f0_upper_bound(0.4, 0.5)
    assert clamped.value == 1.0 and clamped.clamped


def test_f0_bound_consistent_with_semi_honest():
    for p in np.linspace(0, 0.9, 19):
        for q in np.linspace(0, 0.9, 19):
            Q = p / 2
            p_w = (1 - q) * p / 4 + q / 4
            truth = math.sqrt(q / 4)
            assert f0_upper_bound(Q, p_w, f2=q / 4).value >= truth - 1e-12
            assert f0_upper_bound(Q, p_w).value >= truth - 1e-12


# -- key-rate formulas ------------------------------------------------------------------------

def test_rate_examples():
    assert keyrate_worst_low(0, 0, 0, 0.5).rate == 1
    assert keyrate_worst_high(0, 0, 0.5).rate == 1
    assert keyrate_semi_honest(0, 0).rate == 1


def test_rates_reduce_to_shannon_term():
    for q_z in (0.0, 0.05, 0.2):
        assert keyrate_worst_low(0, q_z, 0, 0.4).rate == 1 - binary_entropy(q_z)
    for p in (0.0, 0.1, 0.3):
        rep = keyrate_semi_honest(p, 0.0)
        assert rep.i_ac_bound == 0
        assert rep.rate == 1 - binary_entropy(rep.inputs.Q_Z)


def test_worst_low_symbolic_oracle():
    Q, Q_Z, p_w, p_a = sp.Rational(1, 50), sp.Rational(1, 50), sp.Rational(1, 50), sp.Rational(1, 2)
    h = -Q_Z * sp.log(Q_Z, 2) - (1 - Q_Z) * sp.log(1 - Q_Z, 2)
    leak = (sp.sqrt(1 - Q) * (sp.sqrt(Q) + sp.sqrt(p_w)) + Q) / p_a
    oracle = float(sp.N(1 - h - leak, 30))
    rep = keyrate_worst_low(0.02, 0.02, 0.02, 0.5)
    assert rep.rate == pytest.approx(oracle, abs=1e-12)
    assert rep.i_ab == pytest.approx(float(sp.N(1 - h, 30)), abs=1e-12)


def test_worst_high_symbolic_oracle():
    Q, p_w, p_a = sp.Rational(1, 20), sp.Rational(1, 20), sp.Rational(3, 10)
    q_z = Q**2 / p_a
    h = -q_z * sp.log(q_z, 2) - (1 - q_z) * sp.log(1 - q_z, 2)
    oracle = float(sp.N(1 - h - (sp.sqrt(1 - Q) * (Q + sp.sqrt(p_w)) + Q**2) / p_a, 30))
    assert keyrate_worst_high(0.05, 0.05, 0.3).rate == pytest.approx(oracle, abs=1e-12)


def test_worst_high_validity():
    assert "Q-beyond-validity" in keyrate_worst_high(0.45, 0.1, 0.3).flags
    assert keyrate_worst_high(0.2, 0.1, 0.3).flags == ()
    with pytest.raises(ValueError):
        keyrate_worst_high(0.7, 0.1, 0.3)


def test_semi_honest_cap_flag_tracks_bound():
    for p in np.linspace(0, 0.98, 15):
        for q in np.linspace(0, 0.98, 15):
            rep = keyrate_semi_honest(p, q)
            b = thm1_bound(p / 2, semi_honest_f_norms(q), rep.inputs.p_a)
            assert ("bound-capped" in rep.flags) == b.capped
            assert rep.i_ac_bound == b.value <= 1.0


@pytest.mark.parametrize("p_a", [0.5, 0.3])
def test_worst_case_monotone(p_a):
    grid = np.round(np.arange(0, 0.3 + 1e-12, 1e-3), 12)
    low = [keyrate_worst_low(Q, Q, Q, p_a).rate for Q in grid]
    high = [keyrate_worst_high(Q, Q, p_a).rate for Q in grid]
    assert np.all(np.diff(low) <= 1e-12)
    assert np.all(np.diff(high) <= 1e-12)


def test_rate_preconditions():
    with pytest.raises(ValueError):
        keyrate_worst_low(0.1, 0.1, 0.1, 0)
    with pytest.raises(ValueError):
        keyrate_semi_honest(1.0, 0.2)


# -- thresholds ---------------------------------------------------------------------------------

def test_threshold_no_crossing():
    th = find_threshold(lambda Q: 1.0, 0.0, 0.3)
    assert th.q_star == 0.3 and not th.crossed


def test_threshold_requires_positive_start():
    with pytest.raises(ValueError):
        find_threshold(lambda Q: -1.0, 0.0, 0.3)


def test_threshold_linear():
    th = find_threshold(lambda Q: 0.1234 - Q, 0.0, 1.0)
    assert th.crossed
    assert th.q_star == pytest.approx(0.1234, abs=1e-6)
    assert th.bracket[0] <= 0.1234 <= th.bracket[1]
    assert th.rates[0] >= 0 > th.rates[1]


def test_threshold_keeps_last_nonnegative_region():
    # dips below zero then recovers: scan must report the last crossing
    th = find_threshold(lambda Q: 1 if Q < 0.1 or 0.2 < Q < 0.25 else -1, 0.0, 0.5)
    assert th.q_star == pytest.approx(0.25, abs=1e-3)


def test_thresholds():
    semi = find_threshold(lambda Q: keyrate_semi_honest(2 * Q, 2 * Q).rate, 0, 0.499)
    assert semi.q_star == pytest.approx(0.199, abs=1e-3)
    low = find_threshold(lambda Q: keyrate_worst_low(Q, Q, Q, 0.5).rate, 0, 0.5)
    assert low.q_star == pytest.approx(0.0335, abs=5e-4)
    high5 = find_threshold(lambda Q: keyrate_worst_high(Q, Q, 0.5).rate, 0, 0.5)
    assert high5.q_star == pytest.approx(0.1065, abs=5e-4)
    high3 = find_threshold(lambda Q: keyrate_worst_high(Q, Q, 0.3).rate, 0, math.sqrt(0.15))
    assert high3.q_star == pytest.approx(0.0525, abs=5e-4)


def test_curve_csv_format():
    buf = io.StringIO()
    write_curve_csv([(Q, keyrate_worst_low(Q, Q, Q, 0.5)) for Q in (0.0, 0.01)], buf)
    lines = buf.getvalue().splitlines()
    assert lines[0] == "Q,r,i_ab,i_ac_bound,formula_tag"
    assert lines[1] == "0,1,1,0,worst-low"
    assert len(lines[2].split(",")[1]) <= 11


def test_reports_do_not_emit_warnings_in_normal_range():
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        keyrate_semi_honest(0.2, 0.2)
        keyrate_worst_low(0.02, 0.02, 0.02, 0.5)
