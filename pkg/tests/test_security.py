"""Risk-model and attack-description tests. The aggregate risk curve is
checked against a 50-digit mpmath evaluation of the same closed forms on
randomly sampled parameter sets."""

import math
import random

import mpmath
import pytest

from uavnet.security import (DEFAULT_INTENSITY, AttackSpec, RiskError,
                             RiskParams, aggregate_risk, analytic_resilience,
                             default_attack, empirical_resilience,
                             interference_peak_time, risk_components,
                             sample_risk_trace)


def _oracle_risk(p: RiskParams, t: float) -> float:
    """Same model evaluated at 50 decimal digits, rounded to float at the end."""
    with mpmath.workdps(50):
        tt = mpmath.mpf(t)
        d = mpmath.mpf(p.lam_disaster) * mpmath.e ** (-mpmath.mpf(p.mu_disaster) * tt)
        s = mpmath.mpf(p.lam_stress) * (1 - mpmath.e ** (-mpmath.mpf(p.mu_stress) * tt))
        i = mpmath.mpf(p.lam_interference) * tt * mpmath.e ** (-mpmath.mpf(p.mu_interference) * tt)
        m = mpmath.mpf(p.lam_malicious) * (1 - mpmath.e ** (-mpmath.mpf(p.mu_malicious) * tt))
        w = [mpmath.mpf(x) for x in p.weights]
        return float(w[0] * d + w[1] * s + w[2] * i + w[3] * m)


def test_components_frozen_values():
    p = RiskParams(mu_disaster=1.0, mu_stress=0.2,
                   lam_interference=2.0, mu_interference=0.6,
                   mu_malicious=1.0)
    d, s, i, m = risk_components(p, 1.0)
    assert d == pytest.approx(0.36787944117144233, rel=1e-15)      # e^-1
    assert s == pytest.approx(0.18126924692201818, rel=1e-15)      # 1 - e^-0.2
    assert i == pytest.approx(1.0976232721880528, rel=1e-15)       # 2 e^-0.6
    assert m == pytest.approx(0.6321205588285577, rel=1e-15)       # 1 - e^-1


def test_components_at_zero():
    p = RiskParams()
    d, s, i, m = risk_components(p, 0.0)
    assert d == p.lam_disaster
    assert s == 0.0
    assert i == 0.0
    assert m == 0.0


def test_components_reject_negative_time():
    with pytest.raises(RiskError):
        risk_components(RiskParams(), -0.1)


def test_aggregate_matches_high_precision_oracle():
    rng = random.Random(20260821)
    for _ in range(100):
        w = [rng.uniform(0.05, 1.0) for _ in range(4)]
        total = sum(w)
        p = RiskParams(
            lam_disaster=rng.uniform(0.0, 5.0),
            lam_stress=rng.uniform(0.0, 5.0),
            lam_interference=rng.uniform(0.0, 5.0),
            lam_malicious=rng.uniform(0.0, 5.0),
            mu_disaster=rng.uniform(0.01, 3.0),
            mu_stress=rng.uniform(0.01, 3.0),
            mu_interference=rng.uniform(0.01, 3.0),
            mu_malicious=rng.uniform(0.01, 3.0),
            weights=(w[0] / total, w[1] / total, w[2] / total,
                     1.0 - (w[0] + w[1] + w[2]) / total),
        )
        t = rng.uniform(0.0, 20.0)
        got = aggregate_risk(p, t)
        want = _oracle_risk(p, t)
        assert got == pytest.approx(want, rel=1e-12, abs=1e-300)


def test_parameter_validation():
    with pytest.raises(RiskError):
        RiskParams(lam_stress=-1.0)
    with pytest.raises(RiskError):
        RiskParams(mu_disaster=0.0)
    with pytest.raises(RiskError):
        RiskParams(weights=(0.5, 0.5, 0.5, 0.5))
    with pytest.raises(RiskError):
        RiskParams(weights=(-0.5, 0.5, 0.5, 0.5))


def test_resilience_zero_at_time_zero():
    assert analytic_resilience(RiskParams(), 0.0) == 0.0


def test_resilience_requires_nonzero_base():
    # with the disaster scale zeroed nothing is active at t=0
    p = RiskParams(lam_disaster=0.0)
    with pytest.raises(RiskError):
        analytic_resilience(p, 1.0)


def test_interference_peak_time():
    p = RiskParams(mu_interference=0.25)
    assert interference_peak_time(p) == 4.0
    # the t*exp(-mu t) term really is maximal there
    peak = p.lam_interference * 4.0 * math.exp(-1.0)
    for t in (3.0, 3.9, 4.1, 5.0):
        assert p.lam_interference * t * math.exp(-0.25 * t) < peak


def test_sample_risk_trace_values():
    p = RiskParams()
    times = [0.0, 0.5, 1.0, 2.0, 5.0, 10.0]
    trace = sample_risk_trace(p, times)
    assert trace.times_s == times
    for k, t in enumerate(times):
        d, s, i, m = risk_components(p, t)
        assert trace.disaster[k] == d
        assert trace.stress[k] == s
        assert trace.interference[k] == i
        assert trace.malicious[k] == m
        assert trace.aggregate[k] == pytest.approx(aggregate_risk(p, t), rel=1e-15)
        assert trace.resilience[k] == pytest.approx(
            analytic_resilience(p, t), rel=1e-15)
    assert trace.empirical_times_s == []


def test_attack_spec_validation():
    with pytest.raises(RiskError):
        AttackSpec(kind="flood", start_s=0.0, stop_s=1.0, intensity=1.0)
    with pytest.raises(RiskError):
        AttackSpec(kind="ddos", start_s=5.0, stop_s=5.0, intensity=1.0)
    with pytest.raises(RiskError):
        AttackSpec(kind="ddos", start_s=0.0, stop_s=1.0, intensity=-1.0)
    with pytest.raises(RiskError):
        AttackSpec(kind="spoofing", start_s=0.0, stop_s=1.0, intensity=1.5)
    with pytest.raises(RiskError):
        AttackSpec(kind="tampering", start_s=0.0, stop_s=1.0, intensity=1.01)


def test_attack_active_window_is_half_open():
    a = AttackSpec(kind="ddos", start_s=10.0, stop_s=20.0, intensity=100.0)
    assert not a.active(9.999)
    assert a.active(10.0)
    assert a.active(19.999)
    assert not a.active(20.0)


def test_default_attack_uses_catalog_intensity():
    for kind, intensity in DEFAULT_INTENSITY.items():
        a = default_attack(kind, start_s=1.0, stop_s=2.0)
        assert a.kind == kind
        assert a.intensity == intensity
        assert a.targets is None
    override = default_attack("ddos", start_s=1.0, stop_s=2.0, intensity=50.0)
    assert override.intensity == 50.0
    with pytest.raises(RiskError):
        default_attack("flood", start_s=1.0, stop_s=2.0)


def test_empirical_resilience():
    assert empirical_resilience(100.0, 85.0) == pytest.approx(0.85)
    assert empirical_resilience(100.0, 120.0) == 1.0   # clamped
    assert empirical_resilience(100.0, -5.0) == 0.0    # clamped
    with pytest.raises(RiskError):
        empirical_resilience(0.0, 10.0)
