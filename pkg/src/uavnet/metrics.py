"""Measurement plane: latency/throughput/delivery accounting and report files.

Everything here is pure bookkeeping over values the engine hands in; nothing
samples randomness, so two runs with equal inputs serialize byte-identically.
"""

from __future__ import annotations

import csv
import json
import math
from array import array
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np

OP_SURVEILLANCE = "surveillance"
OP_TRACKING = "tracking"
OP_ASSESSMENT = "assessment"
OP_DELIVERY = "delivery"
OP_OTHER = "other"
OPERATIONS = (OP_SURVEILLANCE, OP_TRACKING, OP_ASSESSMENT, OP_DELIVERY, OP_OTHER)

DROP_CAUSES = ("link_down", "budget", "tampered")


def quantile(samples: List[float], q: float) -> float:
    """Nearest-rank quantile on a copy; q in (0, 1]."""
    if not samples:
        raise ValueError("quantile of empty sample set")
    if not 0.0 < q <= 1.0:
        raise ValueError(f"quantile order out of range: {q}")
    ordered = sorted(samples)
    rank = max(math.ceil(q * len(ordered)), 1)
    return ordered[rank - 1]


def summarize(samples: List[float]) -> Optional[Dict[str, float]]:
    """mean/median/p95/p99/min/max/count, or None when there is nothing to say."""
    if not samples:
        return None
    ordered = sorted(samples)
    n = len(ordered)

    def at(q: float) -> float:
        # same nearest-rank convention as quantile(), one shared sort
        return ordered[max(math.ceil(q * n), 1) - 1]

    return {
        "count": n,
        "mean": sum(ordered) / n,
        "median": at(0.5),
        "p95": at(0.95),
        "p99": at(0.99),
        "min": ordered[0],
        "max": ordered[-1],
    }


@dataclass
class CommitRecord:
    height: int
    time_us: int
    view: int
    n_txs: int


@dataclass
class MetricsRecorder:
    """Accumulates one run's observations and writes the report files.

    Per-delivery samples go into parallel typed arrays (value, operation code,
    same-role flag, send second); a default-scale run logs millions of them.
    """

    dt_us: int
    monitor_id: int = -1
    _lat_ms: array = field(default_factory=lambda: array("d"))
    _lat_op: array = field(default_factory=lambda: array("b"))
    _lat_within: array = field(default_factory=lambda: array("b"))
    _lat_second: array = field(default_factory=lambda: array("i"))
    commits: List[CommitRecord] = field(default_factory=list)
    _commit_heights: set = field(default_factory=set)
    view_changes: int = 0
    escalations: int = 0
    sent: int = 0
    delivered: int = 0
    dropped: Dict[str, int] = field(default_factory=lambda: {c: 0 for c in DROP_CAUSES})
    rejected_bad_sig: int = 0
    junk_discarded: int = 0
    txs_submitted: int = 0
    txs_committed: int = 0
    evictions: int = 0
    incidents: List[str] = field(default_factory=list)

    def classify_operation(self, sender: int, receiver: int,
                           sender_role: str, receiver_role: str) -> str:
        if sender == self.monitor_id:
            return OP_SURVEILLANCE
        if receiver == self.monitor_id:
            return OP_TRACKING
        if "survey" in (sender_role, receiver_role):
            return OP_ASSESSMENT
        if "delivery" in (sender_role, receiver_role):
            return OP_DELIVERY
        return OP_OTHER

    def record_send(self) -> None:
        self.sent += 1

    def record_delivery(self, sent_us: int, latency_ms: float, sender: int,
                        receiver: int, sender_role: str, receiver_role: str) -> None:
        self.delivered += 1
        op = self.classify_operation(sender, receiver, sender_role, receiver_role)
        self._lat_ms.append(latency_ms)
        self._lat_op.append(OPERATIONS.index(op))
        self._lat_within.append(1 if sender_role == receiver_role else 0)
        self._lat_second.append(int(sent_us // 1_000_000))

    def record_drop(self, cause: str) -> None:
        if cause not in self.dropped:
            raise ValueError(f"unknown drop cause: {cause}")
        self.dropped[cause] += 1

    def record_commit(self, height: int, time_us: int, view: int, n_txs: int) -> None:
        if height in self._commit_heights:
            raise ValueError(f"height {height} committed twice")
        self._commit_heights.add(height)
        self.commits.append(CommitRecord(height, time_us, view, n_txs))
        self.txs_committed += n_txs

    def record_incident(self, description: str) -> None:
        self.incidents.append(description)

    # -- derived views --

    def pending(self) -> int:
        return self.sent - self.delivered - sum(self.dropped.values())

    def delivery_ratio(self) -> Optional[float]:
        settled = self.delivered + sum(self.dropped.values())
        return self.delivered / settled if settled else None

    def tps_buckets(self, duration_s: float) -> List[int]:
        """Committed transactions per one-second bucket; sums to txs_committed."""
        n_buckets = max(int(math.ceil(duration_s)), 1)
        buckets = [0] * n_buckets
        for c in self.commits:
            idx = min(int(c.time_us // 1_000_000), n_buckets - 1)
            buckets[idx] += c.n_txs
        return buckets

    def mean_tps(self, duration_s: float) -> float:
        return self.txs_committed / duration_s if duration_s > 0 else 0.0

    def commit_gaps_s(self) -> List[float]:
        ordered = sorted(self.commits, key=lambda c: c.height)
        return [
            (b.time_us - a.time_us) / 1e6
            for a, b in zip(ordered, ordered[1:])
        ]

    def finality_latencies_s(self, block_time_s: float) -> List[float]:
        """Per-block delay from the height's scheduled proposal slot to its
        commit, in height order."""
        ordered = sorted(self.commits, key=lambda c: c.height)
        return [c.time_us / 1e6 - c.height * block_time_s for c in ordered]

    def latency_values(self, operation: Optional[str] = None,
                       within_cluster: Optional[bool] = None) -> List[float]:
        """Delivery latencies in ms, optionally restricted to one operation
        class or to same-role (within) / cross-role pairs."""
        ms = np.asarray(self._lat_ms, dtype=np.float64)
        keep = np.ones(len(ms), dtype=bool)
        if operation is not None:
            keep &= np.asarray(self._lat_op) == OPERATIONS.index(operation)
        if within_cluster is not None:
            keep &= np.asarray(self._lat_within) == (1 if within_cluster else 0)
        return ms[keep].tolist()

    def summary(self, duration_s: float) -> Dict:
        ops = {}
        for op in OPERATIONS:
            stats = summarize(self.latency_values(operation=op))
            if stats is not None:
                ops[op] = stats
        return {
            "duration_s": duration_s,
            "messages": {
                "sent": self.sent,
                "delivered": self.delivered,
                "dropped": dict(self.dropped),
                "rejected_bad_sig": self.rejected_bad_sig,
                "junk_discarded": self.junk_discarded,
                "pending": self.pending(),
                "delivery_ratio": self.delivery_ratio(),
            },
            "latency_ms": {
                "all": summarize(self.latency_values()),
                "within_cluster": summarize(self.latency_values(within_cluster=True)),
                "across_cluster": summarize(self.latency_values(within_cluster=False)),
                "by_operation": ops,
            },
            "consensus": {
                "blocks_committed": len(self.commits),
                "txs_submitted": self.txs_submitted,
                "txs_committed": self.txs_committed,
                "mean_tps": self.mean_tps(duration_s),
                "view_changes": self.view_changes,
                "escalations": self.escalations,
                "evictions": self.evictions,
                "commit_gap_s": summarize(self.commit_gaps_s()),
            },
            "incidents": list(self.incidents),
        }

    # -- files --

    def write_report(self, out_dir: Path, duration_s: float) -> Dict[str, Path]:
        """summary.json plus CSVs per family; returns the paths written."""
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        paths: Dict[str, Path] = {}

        paths["summary"] = out_dir / "summary.json"
        with open(paths["summary"], "w", encoding="utf-8") as fh:
            json.dump(self.summary(duration_s), fh, sort_keys=True, indent=2)
            fh.write("\n")

        paths["tps"] = out_dir / "tps.csv"
        with open(paths["tps"], "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(["second", "committed_txs"])
            for i, n in enumerate(self.tps_buckets(duration_s)):
                writer.writerow([i, n])

        paths["latency"] = out_dir / "latency.csv"
        cells: Dict[tuple, array] = {}
        for i, ms in enumerate(self._lat_ms):
            key = (self._lat_second[i], self._lat_op[i])
            cells.setdefault(key, array("d")).append(ms)
        with open(paths["latency"], "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            # bucketed by send second; one row per operation class seen
            writer.writerow(["second", "operation", "count",
                             "mean_ms", "p95_ms", "max_ms"])
            for sec, op_code in sorted(cells):
                vals = list(cells[(sec, op_code)])
                writer.writerow([
                    sec, OPERATIONS[op_code], len(vals),
                    f"{sum(vals) / len(vals):.3f}",
                    f"{quantile(vals, 0.95):.3f}",
                    f"{max(vals):.3f}",
                ])

        paths["commits"] = out_dir / "commits.csv"
        with open(paths["commits"], "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(["height", "time_us", "view", "n_txs"])
            for c in sorted(self.commits, key=lambda c: c.height):
                writer.writerow([c.height, c.time_us, c.view, c.n_txs])

        return paths
