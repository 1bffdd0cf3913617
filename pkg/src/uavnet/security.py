"""Threat model: analytic risk curves, attack descriptions, resilience scores.

The four risk components are closed forms in mission time t (seconds):
decaying natural-hazard exposure, saturating infrastructure stress, a
rise-and-fade interference pulse, and saturating malicious pressure. The
aggregate is a weighted sum and resilience is measured as relative risk
reduction against t = 0.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np

ATTACK_KINDS = ("ddos", "spoofing", "tampering", "malware")


class RiskError(ValueError):
    """Raised for non-evaluable risk inputs (zero initial risk, bad weights)."""


@dataclass
class RiskParams:
    """Scales (lam_*) and rates (mu_*) for the four components, plus weights.

    Defaults are declared operating points, not measurements: unit scales,
    rates 0.5/0.1/0.3/0.1, uniform weights.
    """

    lam_disaster: float = 1.0
    mu_disaster: float = 0.5
    lam_stress: float = 1.0
    mu_stress: float = 0.1
    lam_interference: float = 1.0
    mu_interference: float = 0.3
    lam_malicious: float = 1.0
    mu_malicious: float = 0.1
    weights: Tuple[float, float, float, float] = (0.25, 0.25, 0.25, 0.25)

    def __post_init__(self) -> None:
        lams = (self.lam_disaster, self.lam_stress,
                self.lam_interference, self.lam_malicious)
        mus = (self.mu_disaster, self.mu_stress,
               self.mu_interference, self.mu_malicious)
        if any(l < 0.0 for l in lams):
            raise RiskError(f"risk scales must be non-negative: {lams}")
        if any(m <= 0.0 for m in mus):
            raise RiskError(f"risk rates must be positive: {mus}")
        if any(w < 0.0 for w in self.weights):
            raise RiskError(f"risk weights must be non-negative: {self.weights}")
        if abs(sum(self.weights) - 1.0) > 1e-9:
            raise RiskError(f"risk weights must sum to 1: {self.weights}")


def risk_components(params: RiskParams, t: float) -> Tuple[float, float, float, float]:
    """(disaster, stress, interference, malicious) at mission time t >= 0."""
    if t < 0.0:
        raise RiskError(f"mission time must be non-negative, got {t}")
    d = params.lam_disaster * math.exp(-params.mu_disaster * t)
    s = params.lam_stress * (1.0 - math.exp(-params.mu_stress * t))
    i = params.lam_interference * t * math.exp(-params.mu_interference * t)
    m = params.lam_malicious * (1.0 - math.exp(-params.mu_malicious * t))
    return d, s, i, m


def aggregate_risk(params: RiskParams, t: float) -> float:
    """Weighted component sum at time t."""
    w = params.weights
    c = risk_components(params, t)
    return w[0] * c[0] + w[1] * c[1] + w[2] * c[2] + w[3] * c[3]


def analytic_resilience(params: RiskParams, t: float) -> float:
    """Relative risk reduction 1 - risk(t)/risk(0).

    Zero at t = 0 by construction; negative whenever risk exceeds its initial
    value (kept verbatim, not clamped). Errors when risk(0) == 0.
    """
    base = aggregate_risk(params, 0.0)
    if base == 0.0:
        raise RiskError("initial aggregate risk is zero; resilience undefined")
    return 1.0 - aggregate_risk(params, t) / base


def interference_peak_time(params: RiskParams) -> float:
    """Mission time maximizing the interference pulse (1/mu)."""
    if params.mu_interference <= 0.0:
        raise RiskError("interference rate must be positive")
    return 1.0 / params.mu_interference


@dataclass
class RiskTrace:
    """Sampled risk/resilience curves, analytic plus any empirical points."""

    times_s: List[float] = field(default_factory=list)
    disaster: List[float] = field(default_factory=list)
    stress: List[float] = field(default_factory=list)
    interference: List[float] = field(default_factory=list)
    malicious: List[float] = field(default_factory=list)
    aggregate: List[float] = field(default_factory=list)
    resilience: List[float] = field(default_factory=list)
    empirical_times_s: List[float] = field(default_factory=list)
    empirical_resilience: List[float] = field(default_factory=list)


def sample_risk_trace(params: RiskParams, times_s) -> RiskTrace:
    trace = RiskTrace()
    for t in np.asarray(times_s, dtype=np.float64):
        t = float(t)
        d, s, i, m = risk_components(params, t)
        trace.times_s.append(t)
        trace.disaster.append(d)
        trace.stress.append(s)
        trace.interference.append(i)
        trace.malicious.append(m)
        trace.aggregate.append(aggregate_risk(params, t))
        trace.resilience.append(analytic_resilience(params, t))
    return trace


@dataclass
class AttackSpec:
    """One scheduled attack window against the running fleet.

    kind: ddos (junk floods against validators), spoofing (forged-identity
    traffic), tampering (in-transit payload corruption), malware (nodes turned
    Byzantine). intensity meaning per kind: junk messages/s per target,
    forged messages/s per spoofing node, corruption probability, or count of
    compromised nodes.
    """

    kind: str
    start_s: float
    stop_s: float
    intensity: float
    targets: Optional[List[int]] = None  # explicit victim/compromised set

    def __post_init__(self) -> None:
        if self.kind not in ATTACK_KINDS:
            raise RiskError(
                f"unknown attack kind {self.kind!r}, expected one of {ATTACK_KINDS}"
            )
        if self.stop_s <= self.start_s:
            raise RiskError(f"attack window empty: {self.start_s}..{self.stop_s}")
        if self.intensity < 0.0:
            raise RiskError(f"attack intensity must be non-negative: {self.intensity}")
        if self.kind in ("spoofing", "tampering") and self.intensity > 1.0:
            raise RiskError(f"{self.kind} intensity is a fraction, must be <= 1")

    def active(self, t_s: float) -> bool:
        return self.start_s <= t_s < self.stop_s


DEFAULT_INTENSITY: Dict[str, float] = {
    "ddos": 2000.0,     # junk msgs/s per targeted validator
    "spoofing": 0.2,    # fraction of nodes emitting forged-identity traffic
    "tampering": 0.15,  # per-message corruption probability
    "malware": 6.0,     # count of nodes turned Byzantine
}


def default_attack(kind: str, start_s: float, stop_s: float,
                   intensity: Optional[float] = None) -> AttackSpec:
    if intensity is None:
        if kind not in DEFAULT_INTENSITY:
            raise RiskError(f"unknown attack kind {kind!r}")
        intensity = DEFAULT_INTENSITY[kind]
    return AttackSpec(kind=kind, start_s=start_s, stop_s=stop_s, intensity=intensity)


def empirical_resilience(baseline_committed: float, attacked_committed: float) -> float:
    """Committed-throughput ratio attacked/baseline over an attack window.

    Clamped to [0, 1]; a zero-throughput baseline is an error because the
    ratio is meaningless without traffic.
    """
    if baseline_committed <= 0.0:
        raise RiskError("baseline committed throughput is zero; ratio undefined")
    return max(0.0, min(1.0, attacked_committed / baseline_committed))
