"""On-chain coordination: an access-control registry and a search-and-rescue
contract, executed deterministically as blocks finalize.

Calls arrive as contract_call transactions whose payload is canonical JSON
{"contract": ..., "method": ..., "args": {...}}; the caller is the signed
transaction sender. Rejections are receipts, never exceptions, so every
replica reaches the same state from the same block sequence.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Set, Tuple

from .consensus import Block, Transaction

RIGHT_SUBMIT_TX = "SubmitTx"
RIGHT_READ_LEDGER = "ReadLedger"
RIGHT_ASSIGN_GRID = "AssignGrid"
RIGHT_REPORT_FINDING = "ReportFinding"
RIGHT_UPDATE_STATUS = "UpdateStatus"
ALL_RIGHTS = (RIGHT_SUBMIT_TX, RIGHT_READ_LEDGER, RIGHT_ASSIGN_GRID,
              RIGHT_REPORT_FINDING, RIGHT_UPDATE_STATUS)

FINDING_PERSON = "Person"
FINDING_HAZARD = "Hazard"
FINDING_TYPES = (FINDING_PERSON, FINDING_HAZARD)

ALLOW = "Allow"
DENY = "Deny"


class ContractError(ValueError):
    """Raised only for malformed configuration, never during execution."""


@dataclass
class Permission:
    principal: int
    rights: Set[str]

    def __post_init__(self) -> None:
        if not self.rights:
            raise ContractError(f"principal {self.principal} registered without rights")
        unknown = self.rights - set(ALL_RIGHTS)
        if unknown:
            raise ContractError(f"unknown rights {sorted(unknown)}")


class PermissionRegistry:
    def __init__(self) -> None:
        self.by_principal: Dict[int, Permission] = {}

    def grant(self, principal: int, rights) -> None:
        rights = set(rights)
        if principal in self.by_principal:
            self.by_principal[principal].rights |= rights
            Permission(principal, self.by_principal[principal].rights)
        else:
            self.by_principal[principal] = Permission(principal, rights)

    def rights(self, principal: int) -> Set[str]:
        p = self.by_principal.get(principal)
        return set(p.rights) if p else set()


def access_check(registry: PermissionRegistry, principal: int, action: str) -> str:
    """Allow iff the principal is registered with the action's right."""
    p = registry.by_principal.get(principal)
    if p is None:
        return DENY
    return ALLOW if action in p.rights else DENY


# ---- search-and-rescue ----

@dataclass(frozen=True)
class GridGeometry:
    """Square cells tiling the bounding square of the search disc; cells with
    no point inside the disc are dropped. Indexing is (row, col) row-major
    from the minimum corner."""

    center: Tuple[float, float]
    radius_m: float
    cell_side_m: float
    n_axis: int
    kept: Tuple[Tuple[int, int], ...]

    @staticmethod
    def build(center: Tuple[float, float], radius_m: float,
              cell_side_m: Optional[float] = None) -> "GridGeometry":
        if radius_m <= 0.0:
            raise ContractError(f"search radius must be positive: {radius_m}")
        side = cell_side_m if cell_side_m is not None else radius_m / 5.0
        if side <= 0.0:
            raise ContractError(f"cell side must be positive: {side}")
        n_axis = math.ceil(2.0 * radius_m / side)
        cx, cy = center
        ox, oy = cx - radius_m, cy - radius_m
        kept: List[Tuple[int, int]] = []
        for row in range(n_axis):
            for col in range(n_axis):
                x0, y0 = ox + col * side, oy + row * side
                nx = min(max(cx, x0), x0 + side)
                ny = min(max(cy, y0), y0 + side)
                if math.hypot(nx - cx, ny - cy) <= radius_m:
                    kept.append((row, col))
        return GridGeometry(tuple(center), radius_m, side, n_axis, tuple(kept))

    def cell_of(self, location: Tuple[float, float]) -> Tuple[int, int]:
        ox = self.center[0] - self.radius_m
        oy = self.center[1] - self.radius_m
        col = min(max(int((location[0] - ox) // self.cell_side_m), 0), self.n_axis - 1)
        row = min(max(int((location[1] - oy) // self.cell_side_m), 0), self.n_axis - 1)
        return row, col

    def in_zone(self, location: Tuple[float, float]) -> bool:
        return math.hypot(location[0] - self.center[0],
                          location[1] - self.center[1]) <= self.radius_m


@dataclass
class Finding:
    location: Tuple[float, float]
    finding_type: str
    reporter: int
    block_height: int


@dataclass
class SearchAndRescueState:
    owner: int
    grid: GridGeometry
    grid_assignments: Dict[int, Tuple[int, int]] = field(default_factory=dict)
    findings: List[Finding] = field(default_factory=list)
    uav_status: Dict[int, Tuple[float, bool]] = field(default_factory=dict)
    notifications: int = 0  # authority-notify events, counted not messaged
    _finding_keys: Set[Tuple[int, int, int, str]] = field(default_factory=set)

    def operational(self, drone: int) -> bool:
        status = self.uav_status.get(drone)
        return True if status is None else status[1]

    def release(self, drone: int) -> None:
        self.grid_assignments.pop(drone, None)


@dataclass
class Receipt:
    tx_id: str
    method: str
    verdict: str       # Allow / Deny
    result: str        # ok or the rejection reason
    block_height: int


def assign_search_grid(state: SearchAndRescueState, drone: int, caller: int,
                       registry: PermissionRegistry) -> str:
    """Map a drone to the lowest-index free cell; its old cell is released
    first. Returns 'ok' or a rejection reason."""
    if access_check(registry, caller, RIGHT_ASSIGN_GRID) != ALLOW:
        return "caller lacks AssignGrid"
    if not state.operational(drone):
        return "drone not operational"
    previous = state.grid_assignments.pop(drone, None)
    taken = set(state.grid_assignments.values())
    for cell in state.grid.kept:
        if cell not in taken:
            state.grid_assignments[drone] = cell
            return "ok"
    if previous is not None:
        state.grid_assignments[drone] = previous
    return "GridFull"


def report_findings(state: SearchAndRescueState, location: Tuple[float, float],
                    finding_type: str, reporter: int, block_height: int,
                    registry: PermissionRegistry) -> str:
    """Append one finding; duplicates (same reporter, cell, type) are ignored.
    The zone boundary is inclusive at exactly the search radius."""
    if access_check(registry, reporter, RIGHT_REPORT_FINDING) != ALLOW:
        return "reporter lacks ReportFinding"
    if finding_type not in FINDING_TYPES:
        return f"unknown finding type {finding_type}"
    if not state.grid.in_zone(location):
        return "location outside search zone"
    row, col = state.grid.cell_of(location)
    key = (reporter, row, col, finding_type)
    if key in state._finding_keys:
        return "duplicate"
    state._finding_keys.add(key)
    state.findings.append(Finding(tuple(location), finding_type, reporter, block_height))
    state.notifications += 1
    return "ok"


def update_uav_status(state: SearchAndRescueState, drone: int,
                      battery_fraction: float, operational: bool, caller: int,
                      registry: PermissionRegistry) -> str:
    """Record battery and operational state; going non-operational frees any
    held grid cell. Only the drone itself or the owner may update."""
    if caller != drone and caller != state.owner:
        return "caller is neither the drone nor the owner"
    if access_check(registry, caller, RIGHT_UPDATE_STATUS) != ALLOW:
        return "caller lacks UpdateStatus"
    if drone not in registry.by_principal:
        return "unknown drone"
    state.uav_status[drone] = (battery_fraction, operational)
    if not operational:
        state.release(drone)
    return "ok"


def check_invariants(state: SearchAndRescueState, prev_findings_len: int) -> List[str]:
    """Post-finalization assertion suite; returns violation descriptions."""
    problems = []
    kept = set(state.grid.kept)
    for drone, cell in state.grid_assignments.items():
        if cell not in kept:
            problems.append(f"drone {drone} assigned cell {cell} outside the zone grid")
    cells = list(state.grid_assignments.values())
    if len(cells) != len(set(cells)):
        problems.append("grid cell assigned to two drones")
    if len(state.findings) < prev_findings_len:
        problems.append("findings list shrank")
    return problems


# ---- execution at finalization ----

def make_call_payload(contract: str, method: str, args: Dict) -> bytes:
    return json.dumps(
        {"contract": contract, "method": method, "args": args},
        sort_keys=True, separators=(",", ":"),
    ).encode("utf-8")


class ContractSet:
    """All contract state for one replica, advanced only by finalized blocks."""

    def __init__(self, owner: int, center: Tuple[float, float], radius_m: float,
                 cell_side_m: Optional[float] = None):
        self.permissions = PermissionRegistry()
        self.sar = SearchAndRescueState(
            owner=owner, grid=GridGeometry.build(center, radius_m, cell_side_m)
        )
        self.receipts: List[Receipt] = []
        self.applied_height = -1
        self.violations: List[str] = []

    def apply_block(self, block: Block) -> None:
        """Execute a finalized block's calls in transaction order and run the
        invariant suite; violations are recorded, not raised."""
        prev_findings = len(self.sar.findings)
        for tx in block.txs:
            if tx.kind != "contract_call":
                continue
            self.receipts.append(self._apply_call(tx, block.height))
        self.applied_height = block.height
        for problem in check_invariants(self.sar, prev_findings):
            self.violations.append(f"height {block.height}: {problem}")

    def _apply_call(self, tx: Transaction, height: int) -> Receipt:
        try:
            call = json.loads(tx.payload.decode("utf-8"))
            contract = call["contract"]
            method = call["method"]
            args = call.get("args", {})
        except (ValueError, KeyError, UnicodeDecodeError) as exc:
            return Receipt(tx.tx_id, "?", DENY, f"malformed call: {exc}", height)

        caller = tx.sender
        if contract == "sar":
            if method == "assign_grid":
                result = assign_search_grid(
                    self.sar, int(args.get("drone", caller)), caller, self.permissions
                )
            elif method == "report_finding":
                loc = args.get("location", (0.0, 0.0))
                result = report_findings(
                    self.sar, (float(loc[0]), float(loc[1])),
                    str(args.get("type", "")), caller, height, self.permissions,
                )
            elif method == "update_status":
                result = update_uav_status(
                    self.sar, int(args.get("drone", caller)),
                    float(args.get("battery", 0.0)),
                    bool(args.get("operational", True)),
                    caller, self.permissions,
                )
            else:
                result = f"unknown method {method}"
        elif contract == "access":
            if method == "check":
                result = access_check(self.permissions, caller, str(args.get("action", "")))
            else:
                result = f"unknown method {method}"
        else:
            result = f"unknown contract {contract}"

        verdict = ALLOW if result in ("ok", ALLOW) else DENY
        return Receipt(tx.tx_id, f"{contract}.{method}", verdict, result, height)

    def dump(self) -> Dict:
        """Canonical state snapshot; stable key order for byte-level replay checks."""
        return {
            "applied_height": self.applied_height,
            "access": {
                str(p): sorted(perm.rights)
                for p, perm in sorted(self.permissions.by_principal.items())
            },
            "sar": {
                "owner": self.sar.owner,
                "center": list(self.sar.grid.center),
                "radius_m": self.sar.grid.radius_m,
                "cells": len(self.sar.grid.kept),
                "assignments": {
                    str(d): list(c) for d, c in sorted(self.sar.grid_assignments.items())
                },
                "findings": [
                    {"location": list(f.location), "type": f.finding_type,
                     "reporter": f.reporter, "height": f.block_height}
                    for f in self.sar.findings
                ],
                "status": {
                    str(d): {"battery": b, "operational": op}
                    for d, (b, op) in sorted(self.sar.uav_status.items())
                },
                "notifications": self.sar.notifications,
            },
            "receipts": len(self.receipts),
            "denied": sum(1 for r in self.receipts if r.verdict == DENY),
            "violations": list(self.violations),
        }

    def dump_json(self) -> str:
        return json.dumps(self.dump(), sort_keys=True, indent=2) + "\n"
