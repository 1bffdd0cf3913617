"""Aerial link budget: log-distance path loss, SNR and Shannon capacity.

All dB quantities stay in the dB domain until the capacity step, which
converts SNR to linear. Distances are metres, rates bit/s.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Dict, Iterator, Optional

import numpy as np

# Folded default gain: absorbs receiver noise referencing so the budget works
# with noise_floor_dbm = 0. Equivalent physical split: 8 dBi gain, -100 dBm floor.
DEFAULT_GAIN_DB = 58.0


class ChannelError(ValueError):
    """Raised for non-physical inputs (distance <= 0, unknown UAV id)."""


@dataclass
class ChannelParams:
    """Propagation and radio constants shared by every link."""

    pl0_db: float = 40.0          # reference loss at d0
    exponent: float = 2.0         # path-loss exponent
    d0_m: float = 1.0             # reference distance
    tx_power_dbm: float = 10.0 * math.log10(2.0)  # 2 mW
    bandwidth_hz: float = 5e6
    snr_threshold_db: float = 3.0  # link up at or above this
    noise_floor_dbm: float = 0.0
    rate_cap_bps: float = 15e6
    default_gain_db: Optional[float] = DEFAULT_GAIN_DB
    antenna_gain_db: Dict[int, float] = field(default_factory=dict)

    def gain(self, uav_id: int) -> float:
        if uav_id in self.antenna_gain_db:
            return self.antenna_gain_db[uav_id]
        if self.default_gain_db is None:
            raise ChannelError(f"no antenna gain registered for UAV {uav_id}")
        return self.default_gain_db


@dataclass(frozen=True)
class LinkBudget:
    """Resolved budget for one ordered transmitter/receiver pair."""

    tx: int
    rx: int
    distance_m: float
    path_loss_db: float
    snr_db: float
    rate_bps: float
    is_up: bool


def path_loss(params: ChannelParams, distance_m: float) -> float:
    """Log-distance path loss in dB; errors on distance <= 0."""
    if distance_m <= 0.0:
        raise ChannelError(f"path loss undefined at distance {distance_m}")
    return params.pl0_db + 10.0 * params.exponent * math.log10(distance_m / params.d0_m)


def snr(params: ChannelParams, tx: int, rx: int, distance_m: float) -> float:
    """Received SNR in dB for the ordered pair (tx, rx)."""
    return (
        params.tx_power_dbm
        + params.gain(tx)
        + params.gain(rx)
        - path_loss(params, distance_m)
        - params.noise_floor_dbm
    )


def shannon_rate(params: ChannelParams, snr_db: float) -> float:
    """Capacity B*log2(1 + snr_linear) in bit/s, uncapped."""
    return params.bandwidth_hz * math.log2(1.0 + 10.0 ** (snr_db / 10.0))


def link_rate(params: ChannelParams, snr_db: float) -> float:
    """Shannon rate clamped to the supported cap."""
    return min(shannon_rate(params, snr_db), params.rate_cap_bps)


def link_budget(params: ChannelParams, tx: int, rx: int, distance_m: float) -> LinkBudget:
    pl = path_loss(params, distance_m)
    s = (
        params.tx_power_dbm
        + params.gain(tx)
        + params.gain(rx)
        - pl
        - params.noise_floor_dbm
    )
    return LinkBudget(
        tx=tx,
        rx=rx,
        distance_m=distance_m,
        path_loss_db=pl,
        snr_db=s,
        rate_bps=link_rate(params, s),
        is_up=distance_m > 0.0 and s >= params.snr_threshold_db,
    )


class LinkMatrix:
    """All ordered-pair link budgets for one snapshot of UAV positions.

    Backed by dense arrays so a 500-node step stays cheap; per-pair
    LinkBudget objects are materialized on demand.
    """

    def __init__(self, params: ChannelParams, ids: np.ndarray, positions: np.ndarray):
        self.params = params
        self.ids = np.asarray(ids, dtype=np.int64)
        n = len(self.ids)
        pos = np.asarray(positions, dtype=np.float64)
        diff = pos[:, None, :] - pos[None, :, :]
        self.distance_m = np.sqrt((diff * diff).sum(axis=2))

        gains = np.array([params.gain(int(i)) for i in self.ids], dtype=np.float64)
        with np.errstate(divide="ignore"):
            pl = params.pl0_db + 10.0 * params.exponent * np.log10(
                self.distance_m / params.d0_m
            )
        self.path_loss_db = pl
        self.snr_db = (
            params.tx_power_dbm
            + gains[:, None]
            + gains[None, :]
            - pl
            - params.noise_floor_dbm
        )
        rate = params.bandwidth_hz * np.log2(1.0 + 10.0 ** (self.snr_db / 10.0))
        self.rate_bps = np.minimum(rate, params.rate_cap_bps)
        self.up = (self.distance_m > 0.0) & (self.snr_db >= params.snr_threshold_db)
        np.fill_diagonal(self.up, False)
        self._index = {int(i): k for k, i in enumerate(self.ids)}

    def budget(self, tx: int, rx: int) -> LinkBudget:
        a, b = self._index[tx], self._index[rx]
        if a == b:
            raise ChannelError("no self link")
        return LinkBudget(
            tx=tx,
            rx=rx,
            distance_m=float(self.distance_m[a, b]),
            path_loss_db=float(self.path_loss_db[a, b]),
            snr_db=float(self.snr_db[a, b]),
            rate_bps=float(self.rate_bps[a, b]),
            is_up=bool(self.up[a, b]),
        )

    def budgets(self) -> Iterator[LinkBudget]:
        for tx in self.ids:
            for rx in self.ids:
                if tx != rx:
                    yield self.budget(int(tx), int(rx))

    def is_up(self, tx: int, rx: int) -> bool:
        return bool(self.up[self._index[tx], self._index[rx]])


def link_matrix(params: ChannelParams, ids, positions) -> LinkMatrix:
    """Budgets for every ordered pair; a single UAV yields an empty matrix."""
    return LinkMatrix(params, np.asarray(ids), np.asarray(positions))
