"""Deterministic discrete-event simulation tying the pieces together.

One integer-microsecond clock drives everything: flocking advances the fleet,
the radio model recomputes link state, queued messages land, replicas react,
and the workload generator keeps transactions flowing. All randomness comes
from named substreams of a single seed, and every iteration walks sorted
collections, so a (scenario, seed) pair fully determines each output byte.
"""

from __future__ import annotations

import heapq
import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Set, Tuple

import numpy as np
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import connected_components

from . import consensus as cs
from . import flocking as fl
from .channel import ChannelParams, LinkMatrix
from .contracts import (ALL_RIGHTS, RIGHT_READ_LEDGER, RIGHT_REPORT_FINDING,
                        RIGHT_SUBMIT_TX, RIGHT_UPDATE_STATUS, ContractSet,
                        make_call_payload)
from .metrics import MetricsRecorder
from .security import ATTACK_KINDS, AttackSpec, DEFAULT_INTENSITY
from .flocking import ROLE_CONNECTIVITY, ROLE_DELIVERY, ROLE_MONITOR, ROLE_SURVEY

SUBSTREAMS = ("mobility", "channel", "latency", "attacks", "consensus", "workload")

ROLE_SENSING = {
    ROLE_DELIVERY: 0.6,
    ROLE_CONNECTIVITY: 0.7,
    ROLE_SURVEY: 0.9,
    ROLE_MONITOR: 0.8,
}
BATTERY_CAPACITY_J = 1.0e6

JUNK_SENDER_FAN = 8      # distinct forged origins a flood is spread across
SPOOF_RATE_HZ = 5.0      # forged messages per second per impersonated node
EVIDENCE_WITNESSES = 3   # honest nodes shown both halves of an equivocation
TAMPER_FLIPS = 3         # bytes corrupted per tampered delivery


class ScenarioError(ValueError):
    """Bad scenario text or field values; the message names the field."""


# ---- scenario ----

def parse_scenario_text(text: str) -> Dict[str, str]:
    """'key = value' lines; '#' starts a comment; later duplicates are errors."""
    mapping: Dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ScenarioError(f"line {lineno}: expected 'key = value', got {raw.strip()!r}")
        key, value = line.split("=", 1)
        key, value = key.strip(), value.strip()
        if not key:
            raise ScenarioError(f"line {lineno}: empty key")
        if key in mapping:
            raise ScenarioError(f"line {lineno}: duplicate key {key!r}")
        mapping[key] = value
    return mapping


@dataclass
class ScenarioConfig:
    dt_s: float = 0.1
    duration_s: float = 600.0
    seed: int = 42
    region_size_m: float = 25_000.0
    altitude_m: float = 30.0
    n_uavs: int = 200
    flock_delivery: int = 90
    flock_connectivity: int = 25
    flock_monitoring: int = 85
    deployment_radius_m: float = 2_500.0
    spawn_radius_m: float = 1200.0
    latency_ms_min: float = 30.0
    latency_ms_max: float = 100.0
    budget_per_step: int = 400
    per_sender_quota: int = 25
    n_delegates: int = 20
    block_time_s: float = 5.0
    view_timeout_s: float = 2.0
    epoch_blocks: int = 10
    removal_threshold: int = 3
    max_block_txs: int = 600
    signature_scheme: str = "keyed_hash"
    per_uav_tps: float = 1.67
    target_tps: float = 100.0
    coordination_fraction: float = 0.5
    contract_fraction: float = 0.3
    search_radius_m: float = 2_500.0
    contracts_dump_height: Optional[int] = None
    trajectory_csv: Optional[str] = None
    trajectory_every_s: float = 1.0
    v_max_mps: float = 20.0
    neighbor_radius_m: float = 150.0
    attacks: List[AttackSpec] = field(default_factory=list)
    obstacles: List[fl.Obstacle] = field(default_factory=list)

    def validate(self) -> None:
        checks = [
            (self.dt_s > 0.0, "sim.dt_s must be positive"),
            (self.duration_s > 0.0, "sim.duration_s must be positive"),
            (self.seed >= 0, "sim.seed must be non-negative"),
            (self.n_uavs >= 4, "fleet.n_uavs must be at least 4"),
            (self.region_size_m > 0.0, "region.size_m must be positive"),
            (self.altitude_m > 0.0, "region.altitude_m must be positive"),
            (min(self.flock_delivery, self.flock_connectivity,
                 self.flock_monitoring) >= 0, "flock counts must be non-negative"),
            (self.flock_delivery + self.flock_connectivity + self.flock_monitoring > 0,
             "flock counts must not all be zero"),
            (self.deployment_radius_m > 0.0, "fleet.deployment_radius_m must be positive"),
            (self.spawn_radius_m > 0.0, "fleet.spawn_radius_m must be positive"),
            (0.0 <= self.latency_ms_min <= self.latency_ms_max,
             "net.latency_ms_min must lie in [0, net.latency_ms_max]"),
            (self.budget_per_step >= 1, "node.budget_per_step must be at least 1"),
            (self.per_sender_quota >= 1, "node.per_sender_quota must be at least 1"),
            (self.n_delegates >= 4, "consensus.n_delegates must be at least 4"),
            (self.block_time_s > 0.0, "consensus.block_time_s must be positive"),
            (self.view_timeout_s > 0.0, "consensus.view_timeout_s must be positive"),
            (self.epoch_blocks >= 1, "consensus.epoch_blocks must be at least 1"),
            (self.removal_threshold >= 1, "consensus.removal_threshold must be at least 1"),
            (self.max_block_txs >= 1, "consensus.max_block_txs must be at least 1"),
            (self.signature_scheme in cs.SCHEMES,
             f"consensus.signature_scheme must be one of {sorted(cs.SCHEMES)}"),
            (self.per_uav_tps >= 0.0, "workload.per_uav_tps must be non-negative"),
            (self.target_tps >= 0.0, "workload.target_tps must be non-negative"),
            (0.0 <= self.coordination_fraction <= 1.0,
             "workload.coordination_fraction must lie in [0, 1]"),
            (0.0 <= self.contract_fraction <= 1.0 - self.coordination_fraction,
             "workload.contract_fraction plus coordination_fraction must not exceed 1"),
            (self.search_radius_m > 0.0, "contracts.search_radius_m must be positive"),
            (self.trajectory_every_s > 0.0, "output.trajectory_every_s must be positive"),
            (self.v_max_mps > 0.0, "flock.v_max_mps must be positive"),
            (self.neighbor_radius_m > 0.0, "flock.neighbor_radius_m must be positive"),
        ]
        problems = [msg for ok, msg in checks if not ok]
        if problems:
            raise ScenarioError("; ".join(problems))


_KEY_MAP = {
    "sim.dt_s": ("dt_s", float),
    "sim.duration_s": ("duration_s", float),
    "sim.seed": ("seed", int),
    "region.size_m": ("region_size_m", float),
    "region.altitude_m": ("altitude_m", float),
    "fleet.n_uavs": ("n_uavs", int),
    "fleet.deployment_radius_m": ("deployment_radius_m", float),
    "fleet.spawn_radius_m": ("spawn_radius_m", float),
    "flock.delivery": ("flock_delivery", int),
    "flock.connectivity": ("flock_connectivity", int),
    "flock.monitoring": ("flock_monitoring", int),
    "flock.v_max_mps": ("v_max_mps", float),
    "flock.neighbor_radius_m": ("neighbor_radius_m", float),
    "net.latency_ms_min": ("latency_ms_min", float),
    "net.latency_ms_max": ("latency_ms_max", float),
    "node.budget_per_step": ("budget_per_step", int),
    "node.per_sender_quota": ("per_sender_quota", int),
    "consensus.n_delegates": ("n_delegates", int),
    "consensus.block_time_s": ("block_time_s", float),
    "consensus.view_timeout_s": ("view_timeout_s", float),
    "consensus.epoch_blocks": ("epoch_blocks", int),
    "consensus.removal_threshold": ("removal_threshold", int),
    "consensus.max_block_txs": ("max_block_txs", int),
    "consensus.signature_scheme": ("signature_scheme", str),
    "workload.per_uav_tps": ("per_uav_tps", float),
    "workload.target_tps": ("target_tps", float),
    "workload.coordination_fraction": ("coordination_fraction", float),
    "workload.contract_fraction": ("contract_fraction", float),
    "contracts.search_radius_m": ("search_radius_m", float),
    "contracts.dump_height": ("contracts_dump_height", int),
    "output.trajectory_csv": ("trajectory_csv", str),
    "output.trajectory_every_s": ("trajectory_every_s", float),
}

_ATTACK_FIELDS = ("kind", "start_s", "stop_s", "intensity", "targets")
_OBSTACLE_FIELDS = ("x", "y", "z", "radius_m")


def _convert(key: str, value: str, kind) -> object:
    try:
        return kind(value)
    except ValueError:
        raise ScenarioError(
            f"{key}: expected {kind.__name__}, got {value!r}"
        ) from None


def config_from_mapping(mapping: Dict[str, str]) -> ScenarioConfig:
    cfg = ScenarioConfig()
    grouped: Dict[Tuple[str, int], Dict[str, str]] = {}
    for key, value in mapping.items():
        if key in _KEY_MAP:
            attr, kind = _KEY_MAP[key]
            setattr(cfg, attr, _convert(key, value, kind))
            continue
        parts = key.split(".")
        if len(parts) == 3 and parts[0] in ("attack", "obstacle"):
            head, idx_s, fld = parts
            idx = _convert(key, idx_s, int)
            allowed = _ATTACK_FIELDS if head == "attack" else _OBSTACLE_FIELDS
            if fld not in allowed:
                raise ScenarioError(f"{key}: unknown field {fld!r}")
            grouped.setdefault((head, idx), {})[fld] = value
            continue
        raise ScenarioError(f"unknown key {key!r}")

    for (head, idx), fields in sorted(grouped.items()):
        prefix = f"{head}.{idx}"
        if head == "attack":
            kind = fields.get("kind")
            if kind not in ATTACK_KINDS:
                raise ScenarioError(
                    f"{prefix}.kind must be one of {sorted(ATTACK_KINDS)}, got {kind!r}"
                )
            targets = tuple(
                _convert(f"{prefix}.targets", t.strip(), int)
                for t in fields.get("targets", "").split(",") if t.strip()
            )
            intensity = (_convert(f"{prefix}.intensity", fields["intensity"], float)
                         if "intensity" in fields else DEFAULT_INTENSITY[kind])
            try:
                cfg.attacks.append(AttackSpec(
                    kind=kind,
                    start_s=_convert(f"{prefix}.start_s", fields.get("start_s", ""), float),
                    stop_s=_convert(f"{prefix}.stop_s", fields.get("stop_s", ""), float),
                    intensity=intensity,
                    targets=targets,
                ))
            except ValueError as exc:
                raise ScenarioError(f"{prefix}: {exc}") from None
        else:
            try:
                cfg.obstacles.append(fl.Obstacle(
                    center=np.array([
                        _convert(f"{prefix}.x", fields.get("x", ""), float),
                        _convert(f"{prefix}.y", fields.get("y", ""), float),
                        _convert(f"{prefix}.z", fields.get("z", ""), float),
                    ]),
                    radius_m=_convert(f"{prefix}.radius_m", fields.get("radius_m", ""), float),
                ))
            except ValueError as exc:
                raise ScenarioError(f"{prefix}: {exc}") from None
    return cfg


def load_scenario(path: Optional[str] = None,
                  overrides: Sequence[str] = ()) -> ScenarioConfig:
    """Config from an optional scenario file plus 'key=value' overrides,
    applied left to right."""
    mapping: Dict[str, str] = {}
    if path is not None:
        mapping = parse_scenario_text(Path(path).read_text(encoding="utf-8"))
    for item in overrides:
        if "=" not in item:
            raise ScenarioError(f"override {item!r}: expected key=value")
        key, value = item.split("=", 1)
        mapping[key.strip()] = value.strip()
    cfg = config_from_mapping(mapping)
    cfg.validate()
    return cfg


# ---- fleet construction ----

def scaled_flock_counts(n_uavs: int, weights: Tuple[int, int, int]) -> Tuple[int, int, int]:
    """Split the fleet proportionally to the configured flock weights using
    largest remainders, so counts always sum exactly to the fleet size."""
    total = sum(weights)
    exact = [n_uavs * w / total for w in weights]
    floors = [int(x) for x in exact]
    short = n_uavs - sum(floors)
    order = sorted(range(3), key=lambda i: (-(exact[i] - floors[i]), i))
    for i in order[:short]:
        floors[i] += 1
    return tuple(floors)  # type: ignore[return-value]


@dataclass
class Fleet:
    states: List[fl.UavState]
    monitor_id: int
    flock_centers: Dict[str, Tuple[float, float, float]]
    stakes: Dict[int, float]


def build_fleet(cfg: ScenarioConfig, rng: np.random.Generator) -> Fleet:
    """Three flocks on a deployment circle around the region center; the
    monitoring flock's first member becomes the fleet monitor."""
    n_del, n_conn, n_surv = scaled_flock_counts(
        cfg.n_uavs, (cfg.flock_delivery, cfg.flock_connectivity, cfg.flock_monitoring)
    )
    center = (cfg.region_size_m / 2.0, cfg.region_size_m / 2.0, cfg.altitude_m)
    centers: Dict[str, Tuple[float, float, float]] = {}
    for k, role in enumerate((ROLE_DELIVERY, ROLE_CONNECTIVITY, ROLE_SURVEY)):
        angle = 2.0 * math.pi * k / 3.0
        centers[role] = (
            center[0] + cfg.deployment_radius_m * math.cos(angle),
            center[1] + cfg.deployment_radius_m * math.sin(angle),
            cfg.altitude_m,
        )
    centers[ROLE_MONITOR] = center

    roles = ([ROLE_DELIVERY] * n_del + [ROLE_CONNECTIVITY] * n_conn
             + [ROLE_SURVEY] * n_surv)
    monitor_id = n_del + n_conn if n_surv > 0 else 0
    roles[monitor_id] = ROLE_MONITOR

    states: List[fl.UavState] = []
    stakes: Dict[int, float] = {}
    for uid, role in enumerate(roles):
        home = centers[ROLE_SURVEY] if role == ROLE_MONITOR else centers[role]
        r = cfg.spawn_radius_m * math.sqrt(float(rng.random()))
        phi = 2.0 * math.pi * float(rng.random())
        stake = 50.0 + 100.0 * float(rng.random())
        stakes[uid] = stake
        states.append(fl.UavState(
            uav_id=uid,
            role=role,
            position=np.array([home[0] + r * math.cos(phi),
                               home[1] + r * math.sin(phi),
                               cfg.altitude_m]),
            velocity=np.zeros(3),
            battery_j=BATTERY_CAPACITY_J,
            capacity_j=BATTERY_CAPACITY_J,
            stake=stake,
            sensing=ROLE_SENSING[role],
            history=0.5,
        ))
    return Fleet(states, monitor_id, centers, stakes)


# ---- the engine ----

@dataclass
class _Wire:
    """One scheduled delivery."""

    deliver_us: int
    seq: int
    sender: int
    receiver: int
    kind: str            # "consensus" | "tx" | "forged"
    payload: object      # decoded object; bypasses re-decode when untampered
    wire: bytes
    sent_us: int

    def __lt__(self, other: "_Wire") -> bool:
        return (self.deliver_us, self.seq) < (other.deliver_us, other.seq)


@dataclass
class SimulationResult:
    config: ScenarioConfig
    metrics: MetricsRecorder
    chain: List[cs.Block]
    contracts: ContractSet
    monitor_id: int
    validators: List[int]
    evicted: Set[int]
    final_states: List[fl.UavState]

    def summary(self) -> Dict:
        out = self.metrics.summary(self.config.duration_s)
        out["fleet"] = {
            "n_uavs": self.config.n_uavs,
            "monitor": self.monitor_id,
            "validators": list(self.validators),
            "evicted": sorted(self.evicted),
        }
        out["contracts"] = self.contracts.dump()
        return out


class FleetSimulation:
    """Builds the world from a config and advances it step by step."""

    def __init__(self, cfg: ScenarioConfig):
        cfg.validate()
        self.cfg = cfg
        self.dt_us = int(round(cfg.dt_s * 1e6))
        self.n_steps = int(round(cfg.duration_s / cfg.dt_s))
        self.now_us = 0
        self._seq = 0

        seqs = np.random.SeedSequence(cfg.seed).spawn(len(SUBSTREAMS))
        self.rng = {name: np.random.default_rng(s)
                    for name, s in zip(SUBSTREAMS, seqs)}

        fleet = build_fleet(cfg, self.rng["mobility"])
        self.states = fleet.states
        self.monitor_id = fleet.monitor_id
        self.stakes = fleet.stakes
        self.ids = [s.uav_id for s in self.states]

        self.flock_params = fl.FlockingParams(
            r_alpha_m=cfg.neighbor_radius_m,
            v_max_mps=cfg.v_max_mps,
            nav_targets=dict(fleet.flock_centers),
        )
        self.channel_params = ChannelParams()

        self.registry = cs.KeyRegistry(cfg.signature_scheme)
        for uid in self.ids:
            self.registry.register(uid, cs.enc_int(cfg.seed))

        self.params = cs.ConsensusParams(
            n_delegates=min(cfg.n_delegates, cfg.n_uavs),
            block_time_s=cfg.block_time_s,
            view_timeout_s=cfg.view_timeout_s,
            epoch_blocks=cfg.epoch_blocks,
            removal_threshold=cfg.removal_threshold,
            max_block_txs=cfg.max_block_txs,
            seed=cfg.seed,
            signature_scheme=cfg.signature_scheme,
        )

        self.epoch_scores: Dict[int, List[Tuple[int, float]]] = {}
        self._snapshot_scores(0)
        self._next_epoch_height = cfg.epoch_blocks
        initial = cs.select_validators(self.epoch_scores[0], self.params.n_delegates)

        self.metrics = MetricsRecorder(dt_us=self.dt_us, monitor_id=self.monitor_id)
        region_c = (cfg.region_size_m / 2.0, cfg.region_size_m / 2.0)
        self.contracts = ContractSet(fleet.monitor_id, region_c, cfg.search_radius_m)
        for s in self.states:
            rights = {RIGHT_SUBMIT_TX, RIGHT_READ_LEDGER, RIGHT_UPDATE_STATUS}
            if s.role in (ROLE_SURVEY, ROLE_MONITOR):
                rights.add(RIGHT_REPORT_FINDING)
            if s.uav_id == self.monitor_id:
                rights |= set(ALL_RIGHTS)
            self.contracts.permissions.grant(s.uav_id, rights)

        provider = lambda h: self.epoch_scores[h]
        self.nodes: Dict[int, cs.ConsensusState] = {}
        for uid in self.ids:
            self.nodes[uid] = cs.ConsensusState(
                node_id=uid,
                params=self.params,
                registry=self.registry,
                validators=list(initial),
                stake_book=dict(self.stakes),
                mempool=cs.Mempool(self.registry, self.params.mempool_capacity),
                execute_block=(lambda b, u=uid: self._on_commit(u, b)),
                epoch_provider=provider,
            )
        self.observer = cs.ConsensusState(
            node_id=-1, params=self.params, registry=self.registry,
            validators=list(initial), stake_book=dict(self.stakes),
            epoch_provider=provider,
        )

        genesis = cs.genesis_block()
        self.queue: List[_Wire] = []
        self.committed: Dict[int, cs.Block] = {0: genesis}
        self.proposed: Set[Tuple[int, int]] = set()
        self.timers: Dict[int, Tuple[int, int, int]] = {}   # uid -> (h, v, deadline)
        self.last_vc: Dict[int, List[cs.ConsensusMessage]] = {}
        self.bytes_out: Dict[int, int] = {}
        self.nonces: Dict[int, int] = {uid: 0 for uid in self.ids}
        self.tx_acc: Dict[int, float] = {uid: 0.0 for uid in self.ids}
        self.spoof_acc: Dict[int, float] = {}
        self.assign_cursor = 0
        self.finding_flip = 0
        self._budget: Dict[int, int] = {}
        self._sender_count: Dict[Tuple[int, int], int] = {}
        self._attack_targets: Dict[int, Tuple[int, ...]] = {}
        self._dump_at_height: Optional[str] = None
        self.links: Optional[LinkMatrix] = None
        self.component: Optional[np.ndarray] = None
        self._traj_rows: List[Tuple] = []
        self._recompute_links()

        # genesis is pre-seeded in self.committed, so these callbacks no-op
        for node in self._all_replicas():
            if not cs.finalize(node, genesis):
                self.metrics.record_incident(
                    f"node {node.node_id} rejected the genesis block"
                )

    # -- plumbing --

    def _all_replicas(self):
        for uid in self.ids:
            yield self.nodes[uid]
        yield self.observer

    def _snapshot_scores(self, height: int) -> None:
        max_stake = max(self.stakes.values())
        scored = []
        for s in self.states:
            if not s.operational:
                continue
            scored.append((s.uav_id, cs.validator_score(
                self.params, s.stake, max_stake, s.fuel_fraction,
                s.sensing, s.history,
            )))
        self.epoch_scores[height] = scored

    def _recompute_links(self) -> None:
        pos = np.array([s.position for s in self.states])
        self.links = LinkMatrix(self.channel_params, np.array(self.ids), pos)
        graph = csr_matrix(self.links.up.astype(np.int8))
        _, labels = connected_components(graph, directed=False)
        self.component = labels
        self._comp_index = {uid: k for k, uid in enumerate(self.ids)}

    def _reachable(self, a: int, b: int) -> bool:
        if a == b:
            return False
        return bool(self.component[self._comp_index[a]]
                    == self.component[self._comp_index[b]])

    def schedule_us(self, height: int) -> int:
        return int(round(height * self.cfg.block_time_s * 1e6))

    def _send(self, sender: int, receiver: int, kind: str, payload: object,
              wire: bytes, check_link: bool = True) -> None:
        self.metrics.record_send()
        if check_link:
            self.bytes_out[sender] = self.bytes_out.get(sender, 0) + len(wire)
            if not self._reachable(sender, receiver):
                self.metrics.record_drop("link_down")
                return
        span = self.cfg.latency_ms_max - self.cfg.latency_ms_min
        latency_ms = self.cfg.latency_ms_min + span * float(self.rng["latency"].random())
        self._seq += 1
        heapq.heappush(self.queue, _Wire(
            deliver_us=self.now_us + int(round(latency_ms * 1000.0)),
            seq=self._seq,
            sender=sender,
            receiver=receiver,
            kind=kind,
            payload=payload,
            wire=wire,
            sent_us=self.now_us,
        ))

    def _broadcast_consensus(self, sender: int, msgs: Sequence[cs.ConsensusMessage],
                             recipients: Optional[Sequence[int]] = None) -> None:
        for msg in msgs:
            wire = cs.encode_message(msg)
            targets = recipients if recipients is not None else self.observer.validators
            for rx in sorted(targets):
                if rx != sender:
                    self._send(sender, rx, "consensus", msg, wire)

    # -- attacks --

    def _active_attacks(self, kind: str) -> List[Tuple[int, AttackSpec]]:
        t = self.now_us / 1e6
        return [(i, a) for i, a in enumerate(self.cfg.attacks)
                if a.kind == kind and a.active(t)]

    def _targets_for(self, idx: int, spec: AttackSpec) -> Tuple[int, ...]:
        """Victim set, resolved once per attack on first activation."""
        if idx in self._attack_targets:
            return self._attack_targets[idx]
        if spec.targets:
            resolved = tuple(sorted(spec.targets))
        else:
            vals = sorted(self.observer.validators)
            if spec.kind == "ddos":
                resolved = tuple(vals[:max(1, len(vals) // 5)])
            elif spec.kind == "spoofing":
                count = max(1, int(round(spec.intensity * len(vals))))
                resolved = tuple(vals[:count])
            elif spec.kind == "tampering":
                resolved = tuple(vals[:max(1, min(3, len(vals)))])
            else:  # malware
                count = max(1, min(int(spec.intensity), len(vals)))
                resolved = tuple(vals[-count:])
        self._attack_targets[idx] = resolved
        return resolved

    def _infected_now(self) -> Set[int]:
        out: Set[int] = set()
        for idx, spec in self._active_attacks("malware"):
            out |= set(self._targets_for(idx, spec))
        return out

    def _tamper_targets(self) -> Dict[int, float]:
        out: Dict[int, float] = {}
        for idx, spec in self._active_attacks("tampering"):
            for t in self._targets_for(idx, spec):
                out[t] = max(out.get(t, 0.0), spec.intensity)
        return out

    def _apply_junk_floods(self) -> None:
        """Flood arrivals are modeled in aggregate: forged senders burn the
        victim's per-step budget up to the per-sender quota, and everything
        they send is discarded."""
        for idx, spec in self._active_attacks("ddos"):
            junk_per_target = int(round(spec.intensity * self.cfg.dt_s))
            for target in self._targets_for(idx, spec):
                per_sender = junk_per_target // JUNK_SENDER_FAN
                admitted = min(per_sender, self.cfg.per_sender_quota) * JUNK_SENDER_FAN
                admitted = min(admitted, self._budget_left(target))
                self._budget[target] = self._budget_left(target) - admitted
                self.metrics.junk_discarded += junk_per_target

    def _emit_spoofed(self) -> None:
        rng = self.rng["attacks"]
        for idx, spec in self._active_attacks("spoofing"):
            for victim in self._targets_for(idx, spec):
                acc = self.spoof_acc.get(victim, 0.0) + SPOOF_RATE_HZ * self.cfg.dt_s
                while acc >= 1.0:
                    acc -= 1.0
                    forged = cs.ConsensusMessage(
                        kind=cs.MSG_PREPARE,
                        height=self.nodes[victim].height,
                        view=self.nodes[victim].view,
                        sender=victim,
                        digest=bytes(rng.bytes(32)).hex(),
                        signature=bytes(rng.bytes(32)),
                    )
                    wire = cs.encode_message(forged)
                    for rx in sorted(self.observer.validators):
                        if rx != victim:
                            self._send(victim, rx, "forged", forged, wire,
                                       check_link=False)
                self.spoof_acc[victim] = acc

    def _byzantine_propose(self, uid: int) -> None:
        """An infected proposer signs two conflicting proposals and shows each
        half of the validator set a different one; a few watchers get both and
        can assemble misbehavior evidence."""
        st = self.nodes[uid]
        h = st.height
        block_a = replace(cs.propose_block(st, self.now_us), view=0)
        block_b = replace(block_a, timestamp_us=self.now_us + 1)
        pp = [
            cs.make_message(self.registry, cs.MSG_PRE_PREPARE, h, 0, uid,
                            digest=b.digest, block=b)
            for b in (block_a, block_b)
        ]
        vals = [v for v in sorted(self.observer.validators) if v != uid]
        for k, rx in enumerate(vals):
            both = k < EVIDENCE_WITNESSES
            for side, msg in enumerate(pp):
                if both or side == k % 2:
                    self._send(uid, rx, "consensus", msg, cs.encode_message(msg))

    # -- commits --

    def _on_commit(self, uid: int, block: cs.Block) -> None:
        h = block.height
        known = self.committed.get(h)
        if known is not None:
            if known.digest != block.digest:
                self.metrics.record_incident(
                    f"conflicting commit at height {h}: node {uid} finalized "
                    f"{block.digest[:12]} against {known.digest[:12]}"
                )
            return
        self.committed[h] = block
        self.metrics.record_commit(h, self.now_us, block.view, len(block.txs))
        if not cs.finalize(self.observer, block):
            self.metrics.record_incident(
                f"observer rejected committed block at height {h}"
            )
        self.contracts.apply_block(block)
        if self.cfg.contracts_dump_height == h:
            self._dump_at_height = self.contracts.dump_json()
        sync = cs.make_message(
            self.registry, cs.MSG_BLOCK_SYNC, h, block.view, uid,
            digest=block.digest, block=block,
        )
        wire = cs.encode_message(sync)
        for rx in self.ids:
            if rx != uid:
                self._send(uid, rx, "consensus", sync, wire)

    # -- delivery --

    def _budget_left(self, uid: int) -> int:
        return self._budget.get(uid, self.cfg.budget_per_step)

    def _deliver_due(self) -> None:
        tamper = self._tamper_targets()
        rng = self.rng["attacks"]
        while self.queue and self.queue[0].deliver_us <= self.now_us:
            ev = heapq.heappop(self.queue)
            left = self._budget_left(ev.receiver)
            if left <= 0:
                self.metrics.record_drop("budget")
                continue
            self._budget[ev.receiver] = left - 1
            count = self._sender_count.get((ev.receiver, ev.sender), 0) + 1
            self._sender_count[(ev.receiver, ev.sender)] = count
            if count > self.cfg.per_sender_quota:
                self.metrics.record_drop("budget")
                continue

            payload = ev.payload
            if ev.receiver in tamper and float(rng.random()) < tamper[ev.receiver]:
                corrupted = bytearray(ev.wire)
                for _ in range(TAMPER_FLIPS):
                    corrupted[int(rng.integers(len(corrupted)))] ^= 0xFF
                payload = self._decode(ev.kind, bytes(corrupted))
                if payload is None or not self._authentic(ev.kind, payload):
                    self.metrics.record_drop("tampered")
                    node = self.nodes.get(ev.receiver)
                    if node is not None:
                        node.local_faults += 1
                    continue

            self._dispatch(ev, payload)

    def _decode(self, kind: str, wire: bytes):
        try:
            if kind == "tx":
                r = cs._Reader(wire)
                tx = cs.decode_tx(r)
                r.done()
                return tx
            return cs.decode_message(wire)
        except (cs.ConsensusError, ValueError, OverflowError, UnicodeDecodeError):
            return None

    def _authentic(self, kind: str, payload) -> bool:
        if kind == "tx":
            return cs.tx_valid(self.registry, payload)
        return self.registry.verify(payload.sender, payload.preimage(),
                                    payload.signature)

    def _dispatch(self, ev: _Wire, payload: object) -> None:
        node = self.nodes.get(ev.receiver)
        if node is None:
            return
        # the drawn channel latency, not the step-quantized processing time
        latency_ms = (ev.deliver_us - ev.sent_us) / 1000.0
        s_role = self.states[ev.sender].role if 0 <= ev.sender < len(self.states) else "?"
        r_role = self.states[ev.receiver].role
        self.metrics.record_delivery(ev.sent_us, latency_ms, ev.sender,
                                     ev.receiver, s_role, r_role)
        if ev.kind == "tx":
            if node.mempool is not None:
                added = node.mempool.add(payload)
                if not added and not cs.tx_valid(self.registry, payload):
                    self.metrics.rejected_bad_sig += 1
        else:
            faults_before = node.local_faults
            outs = cs.pbft_handle(node, payload, self.now_us)
            if node.local_faults > faults_before and ev.kind == "forged":
                self.metrics.rejected_bad_sig += node.local_faults - faults_before
            if outs:
                self._broadcast_consensus(ev.receiver, outs)

    # -- consensus driving --

    def _drive_consensus(self) -> None:
        infected = self._infected_now()
        for uid in sorted(self.observer.validators):
            st = self.nodes[uid]
            h, v = st.height, st.view
            due = self.now_us >= self.schedule_us(h)

            if (due and v == 0 and (uid, h) not in self.proposed
                    and st.is_validator(uid)
                    and cs.expected_proposer(st, h, 0) == uid):
                self.proposed.add((uid, h))
                if uid in infected:
                    self._byzantine_propose(uid)
                elif st.phase == cs.PHASE_IDLE:
                    pp = cs.make_pre_prepare(st, self.now_us)
                    if pp is not None:
                        outs = cs.pbft_handle(st, pp, self.now_us)
                        self._broadcast_consensus(uid, [pp] + list(outs))

            if uid in infected:
                continue  # infected nodes neither vote on timers nor complain

            timeout_us = int(round(self.cfg.view_timeout_s * 1e6))
            timer = self.timers.get(uid)
            if timer is None or (timer[0], timer[1]) != (h, v):
                deadline = max(self.now_us, self.schedule_us(h)) + timeout_us
                self.timers[uid] = (h, v, deadline)
            elif self.now_us >= timer[2]:
                self.timers[uid] = (h, v, self.now_us + timeout_us)
                was_pbft = st.mode == cs.MODE_PBFT
                outs = cs.on_timeout(st, h, v, self.now_us)
                if outs:
                    self.metrics.view_changes += 1
                    self.last_vc[uid] = list(outs)
                    if st.mode == cs.MODE_PBFT and not was_pbft:
                        self.metrics.escalations += 1
                elif uid in self.last_vc and self.last_vc[uid] \
                        and self.last_vc[uid][0].height == h:
                    outs = self.last_vc[uid]  # lost earlier, worth repeating
                self._broadcast_consensus(uid, outs)

    # -- workload --

    def _make_contract_call(self, s: fl.UavState) -> bytes:
        if s.uav_id == self.monitor_id:
            drone = self.ids[self.assign_cursor % len(self.ids)]
            self.assign_cursor += 1
            return make_call_payload("sar", "assign_grid", {"drone": drone})
        if s.role == ROLE_SURVEY:
            self.finding_flip += 1
            kind = "Person" if self.finding_flip % 2 == 0 else "Hazard"
            return make_call_payload("sar", "report_finding", {
                "location": [round(float(s.position[0]), 1),
                             round(float(s.position[1]), 1)],
                "type": kind,
            })
        return make_call_payload("sar", "update_status", {
            "drone": s.uav_id,
            "battery": round(s.fuel_fraction, 4),
            "operational": True,
        })

    def _emit_workload(self) -> None:
        if not self.observer.validators:
            return
        rate = min(self.cfg.per_uav_tps, self.cfg.target_tps / len(self.ids))
        rng = self.rng["workload"]
        for s in self.states:
            uid = s.uav_id
            acc = self.tx_acc[uid] + rate * self.cfg.dt_s
            while acc >= 1.0:
                acc -= 1.0
                u = float(rng.random())
                if u < self.cfg.coordination_fraction:
                    kind = "coordination"
                    payload = json.dumps({
                        "p": [round(float(x), 1) for x in s.position],
                        "v": [round(float(x), 2) for x in s.velocity],
                    }, separators=(",", ":")).encode()
                elif u < self.cfg.coordination_fraction + self.cfg.contract_fraction:
                    kind = "contract_call"
                    payload = self._make_contract_call(s)
                else:
                    kind = "metric_beacon"
                    payload = json.dumps({
                        "b": round(s.fuel_fraction, 4), "r": s.role,
                    }, separators=(",", ":")).encode()
                self.nonces[uid] += 1
                tx = cs.sign_tx(self.registry, cs.Transaction(
                    kind=kind, sender=uid, nonce=self.nonces[uid],
                    timestamp_us=self.now_us, payload=payload,
                ))
                self.metrics.txs_submitted += 1
                wire = cs.encode_tx(tx)
                for rx in sorted(self.observer.validators):
                    if rx == uid:
                        self.nodes[rx].mempool.add(tx)
                    else:
                        self._send(uid, rx, "tx", tx, wire)
            self.tx_acc[uid] = acc

    # -- main loop --

    def _sample_trajectory(self) -> None:
        t = self.now_us / 1e6
        for s in self.states:
            self._traj_rows.append((
                round(t, 3), s.uav_id, s.role,
                round(float(s.position[0]), 2), round(float(s.position[1]), 2),
                round(float(s.position[2]), 2), round(s.fuel_fraction, 5),
            ))

    def step(self) -> None:
        self.now_us += self.dt_us
        self._budget = {}
        self._sender_count = {}

        graph = fl.build_proximity_graph(self.states, self.cfg.obstacles,
                                         self.flock_params)
        self.states = fl.step(self.states, graph, self.cfg.obstacles,
                              self.flock_params, self.cfg.dt_s, self.bytes_out)
        self.bytes_out = {}
        self._recompute_links()

        while self.schedule_us(self._next_epoch_height) <= self.now_us:
            self._snapshot_scores(self._next_epoch_height)
            self._next_epoch_height += self.cfg.epoch_blocks

        self._apply_junk_floods()
        self._deliver_due()
        self._drive_consensus()
        self._emit_spoofed()
        self._emit_workload()

    def run(self) -> SimulationResult:
        sample_every = max(int(round(self.cfg.trajectory_every_s / self.cfg.dt_s)), 1)
        if self.cfg.trajectory_csv is not None:
            self._sample_trajectory()
        for i in range(1, self.n_steps + 1):
            self.step()
            if self.cfg.trajectory_csv is not None and i % sample_every == 0:
                self._sample_trajectory()
        self._finish()
        return SimulationResult(
            config=self.cfg,
            metrics=self.metrics,
            chain=list(self.observer.ledger),
            contracts=self.contracts,
            monitor_id=self.monitor_id,
            validators=list(self.observer.validators),
            evicted=set(self.observer.evicted),
            final_states=list(self.states),
        )

    def _finish(self) -> None:
        if self.metrics.pending() != len(self.queue):
            self.metrics.record_incident(
                f"message accounting drift: {self.metrics.pending()} pending "
                f"vs {len(self.queue)} queued"
            )
        for line in self.contracts.violations:
            self.metrics.record_incident(f"contract invariant: {line}")
        self.metrics.evictions = len(self.observer.evicted)
        if self.cfg.trajectory_csv is not None:
            path = Path(self.cfg.trajectory_csv)
            path.parent.mkdir(parents=True, exist_ok=True)
            with open(path, "w", encoding="utf-8") as fh:
                fh.write("time_s,uav_id,role,x_m,y_m,z_m,battery_fraction\n")
                for row in self._traj_rows:
                    fh.write(",".join(str(x) for x in row) + "\n")


def run_simulation(cfg: ScenarioConfig,
                   out_dir: Optional[Path] = None) -> SimulationResult:
    """One full run; when out_dir is given the report files, chain dump, and
    final contract state land there."""
    sim = FleetSimulation(cfg)
    result = sim.run()
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        result.metrics.write_report(out_dir, cfg.duration_s)
        # the full summary supersedes the metrics-only file write_report left
        (out_dir / "summary.json").write_text(
            json.dumps(result.summary(), sort_keys=True, indent=2) + "\n",
            encoding="utf-8",
        )
        (out_dir / "chain.jsonl").write_text(
            cs.ledger_json_lines(result.chain), encoding="utf-8"
        )
        (out_dir / "contracts_final.json").write_text(
            result.contracts.dump_json(), encoding="utf-8"
        )
        dump_at = getattr(sim, "_dump_at_height", None)
        if dump_at is not None:
            (out_dir / f"contracts_h{cfg.contracts_dump_height}.json").write_text(
                dump_at, encoding="utf-8"
            )
    return result
