"""Flock mobility: smooth-potential separation/alignment/cohesion control,
sphere-obstacle repulsion, heading-misalignment limiting, Euler integration.

Interaction terms use the smoothed norm (1/eps)*(sqrt(1+eps*|z|^2)-1) so
potentials stay differentiable at zero range. All positions are metres,
velocities m/s, accelerations m/s^2. The whole fleet updates synchronously
from one snapshot per step.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

ROLE_DELIVERY = "delivery"
ROLE_SURVEY = "survey"
ROLE_CONNECTIVITY = "connectivity"
ROLE_MONITOR = "monitor"
ROLES = (ROLE_DELIVERY, ROLE_SURVEY, ROLE_CONNECTIVITY, ROLE_MONITOR)

BUMP_PLATEAU = 0.2  # bump() stays exactly 1 below this fraction of the cutoff


class FlockingError(ValueError):
    """Raised for invalid mobility parameters or malformed states."""


@dataclass
class UavState:
    """One UAV's kinematic and bookkeeping state."""

    uav_id: int
    role: str
    position: np.ndarray  # shape (3,)
    velocity: np.ndarray  # shape (3,)
    battery_j: float
    capacity_j: float
    stake: float
    sensing: float = 0.5    # sensing capability score in [0, 1]
    history: float = 0.5    # historical performance score in [0, 1]
    operational: bool = True

    def __post_init__(self) -> None:
        if self.role not in ROLES:
            raise FlockingError(f"unknown role {self.role!r} for UAV {self.uav_id}")
        self.position = np.asarray(self.position, dtype=np.float64)
        self.velocity = np.asarray(self.velocity, dtype=np.float64)
        if self.position.shape != (3,) or self.velocity.shape != (3,):
            raise FlockingError(f"UAV {self.uav_id} state vectors must be 3-d")
        if not 0.0 <= self.battery_j <= self.capacity_j:
            raise FlockingError(
                f"UAV {self.uav_id} battery {self.battery_j} outside [0, {self.capacity_j}]"
            )

    @property
    def fuel_fraction(self) -> float:
        return self.battery_j / self.capacity_j


@dataclass(frozen=True)
class Obstacle:
    """Solid sphere the fleet must route around."""

    center: Tuple[float, float, float]
    radius_m: float

    def __post_init__(self) -> None:
        if self.radius_m <= 0.0:
            raise FlockingError(f"obstacle radius must be positive: {self.radius_m}")


@dataclass
class FlockingParams:
    """Control gains and interaction ranges."""

    r_alpha_m: float = 150.0   # neighbor radius, strict
    r_beta_m: float = 60.0     # obstacle interaction radius
    d_min_m: float = 25.0      # preferred inter-UAV spacing
    epsilon: float = 0.1       # smoothed-norm curvature
    theta_max_rad: float = math.pi / 4.0  # heading misalignment limit
    v_max_mps: float = 20.0
    gains: Dict[str, float] = field(default_factory=lambda: {
        "separation": 1.5,
        "alignment": 1.2,
        "cohesion": 1.0,
        "navigation": 1.0,
    })
    obstacle_gain: float = 400.0
    nav_damping: float = 1.0
    nav_targets: Dict[str, Tuple[float, float, float]] = field(default_factory=dict)
    # battery drain per step: idle + per-speed + per-byte terms
    drain_idle_j: float = 5.0
    drain_speed_j: float = 1.0
    drain_byte_j: float = 1e-6

    def __post_init__(self) -> None:
        if not 0.0 < self.theta_max_rad < math.pi / 2.0:
            raise FlockingError(
                f"misalignment limit must lie in (0, pi/2): {self.theta_max_rad}"
            )
        if self.epsilon <= 0.0:
            raise FlockingError(f"epsilon must be positive: {self.epsilon}")
        if min(self.r_alpha_m, self.r_beta_m, self.d_min_m, self.v_max_mps) <= 0.0:
            raise FlockingError("ranges and speed cap must be positive")


def sigma_norm(z, epsilon: float) -> float:
    """Smoothed norm (1/eps)*(sqrt(1 + eps*|z|^2) - 1); zero iff z == 0."""
    z = np.asarray(z, dtype=np.float64)
    return float((math.sqrt(1.0 + epsilon * float(z.dot(z))) - 1.0) / epsilon)


def sigma_norm_of(r: float, epsilon: float) -> float:
    """Smoothed norm of any vector with Euclidean length r."""
    return (math.sqrt(1.0 + epsilon * r * r) - 1.0) / epsilon


def bump(z: float) -> float:
    """Smooth cutoff: 1 on [0, 0.2], cosine decay to 0 at 1, 0 beyond."""
    if z < 0.0:
        return 0.0
    if z <= BUMP_PLATEAU:
        return 1.0
    if z >= 1.0:
        return 0.0
    return 0.5 * (1.0 + math.cos(math.pi * (z - BUMP_PLATEAU) / (1.0 - BUMP_PLATEAU)))


def spacing_potential_slope(z: float, d_sigma: float) -> float:
    """Bounded attraction/repulsion slope, zero exactly at the preferred
    spacing's smoothed norm."""
    u = z - d_sigma
    return u / math.sqrt(1.0 + u * u)


def _bump_profile(z: np.ndarray) -> np.ndarray:
    # elementwise bump(); same branch boundaries
    out = np.zeros(z.shape, dtype=np.float64)
    out[(z >= 0.0) & (z <= BUMP_PLATEAU)] = 1.0
    mid = (z > BUMP_PLATEAU) & (z < 1.0)
    out[mid] = 0.5 * (1.0 + np.cos(np.pi * (z[mid] - BUMP_PLATEAU) / (1.0 - BUMP_PLATEAU)))
    return out


@dataclass
class ProximityGraph:
    """Alpha (UAV-UAV) and beta (UAV-obstacle) adjacency for one snapshot."""

    ids: List[int]
    alpha_neighbors: Dict[int, List[int]]
    beta_obstacles: Dict[int, List[int]]
    distance_m: np.ndarray   # dense pairwise distances, index-aligned with ids
    alpha_mask: np.ndarray   # boolean form of alpha_neighbors, false diagonal
    index: Dict[int, int]


def build_proximity_graph(states: Sequence[UavState],
                          obstacles: Sequence[Obstacle],
                          params: FlockingParams) -> ProximityGraph:
    """Strict-radius neighbor sets; beta edge iff the r_beta ball around a UAV
    intersects the obstacle sphere."""
    ids = [s.uav_id for s in states]
    if len(set(ids)) != len(ids):
        raise FlockingError("duplicate UAV ids in fleet")
    pos = np.array([s.position for s in states], dtype=np.float64).reshape(len(ids), 3)
    diff = pos[:, None, :] - pos[None, :, :]
    dist = np.sqrt((diff * diff).sum(axis=2))

    alpha: Dict[int, List[int]] = {}
    within = dist < params.r_alpha_m
    np.fill_diagonal(within, False)
    for k, uid in enumerate(ids):
        alpha[uid] = [ids[j] for j in np.nonzero(within[k])[0]]

    beta: Dict[int, List[int]] = {uid: [] for uid in ids}
    for oi, ob in enumerate(obstacles):
        center = np.asarray(ob.center, dtype=np.float64)
        d_center = np.sqrt(((pos - center) ** 2).sum(axis=1))
        for k in np.nonzero(d_center <= params.r_beta_m + ob.radius_m)[0]:
            beta[ids[k]].append(oi)

    return ProximityGraph(
        ids=ids,
        alpha_neighbors=alpha,
        beta_obstacles=beta,
        distance_m=dist,
        alpha_mask=within,
        index={uid: k for k, uid in enumerate(ids)},
    )


# ---- control law ----

def _fleet_arrays(states: Sequence[UavState]):
    pos = np.array([s.position for s in states], dtype=np.float64).reshape(-1, 3)
    vel = np.array([s.velocity for s in states], dtype=np.float64).reshape(-1, 3)
    return pos, vel


def _nav_target_rows(states: Sequence[UavState],
                     params: FlockingParams) -> Tuple[np.ndarray, np.ndarray]:
    # per-UAV target row plus a mask for roles without one
    tgt = np.zeros((len(states), 3), dtype=np.float64)
    has = np.zeros(len(states), dtype=bool)
    for k, s in enumerate(states):
        t = params.nav_targets.get(s.role)
        if t is not None:
            tgt[k] = t
            has[k] = True
    return tgt, has


def _accelerations(states: Sequence[UavState],
                   graph: ProximityGraph,
                   obstacles: Sequence[Obstacle],
                   params: FlockingParams) -> np.ndarray:
    """Fleet accelerations from one snapshot; one code path for step() and
    control_input() so they agree bit for bit. `states` must be the sequence
    the graph was built from."""
    if [s.uav_id for s in states] != graph.ids:
        raise FlockingError("states out of sync with graph")
    pos, vel = _fleet_arrays(states)
    eps = params.epsilon
    d_sigma = sigma_norm_of(params.d_min_m, eps)
    r_sigma = sigma_norm_of(params.r_alpha_m, eps)
    g = params.gains

    r = graph.distance_m
    adj = graph.alpha_mask
    sq = np.sqrt(1.0 + eps * r * r)
    z = (sq - 1.0) / eps
    rel = pos[None, :, :] - pos[:, None, :]
    # bounded direction: gradient of the smoothed norm
    n_ij = rel / sq[:, :, None]

    a_ij = np.where(adj, _bump_profile(z / r_sigma), 0.0)

    # spacing force fades with the same window as alignment, so the
    # interaction has no jump at the neighbor radius
    u = z - d_sigma
    slope = a_ij * (u / np.sqrt(1.0 + u * u))
    acc = g["cohesion"] * np.einsum("kj,kjd->kd", slope, n_ij)

    dvel = vel[None, :, :] - vel[:, None, :]
    acc += g["alignment"] * np.einsum("kj,kjd->kd", a_ij, dvel)

    close = adj & (r < params.d_min_m)
    if close.any():
        rc = np.maximum(r, 1e-6)
        mag = np.where(close, np.minimum((params.d_min_m - rc) / rc, 100.0), 0.0)
        acc -= g["separation"] * np.einsum("kj,kjd->kd", mag, rel / rc[:, :, None])

    tgt, has_t = _nav_target_rows(states, params)
    if has_t.any():
        to_t = tgt - pos
        pull = to_t / np.sqrt(1.0 + (to_t * to_t).sum(axis=1))[:, None]
        acc[has_t] += g["navigation"] * (pull - params.nav_damping * vel)[has_t]

    for k, s in enumerate(states):
        # beta edges are sparse; a plain loop stays cheap
        for oi in graph.beta_obstacles[s.uav_id]:
            ob = obstacles[oi]
            center = np.asarray(ob.center, dtype=np.float64)
            radial = pos[k] - center
            dist_c = float(np.linalg.norm(radial))
            outward = radial / dist_c if dist_c > 0.0 else np.array([1.0, 0.0, 0.0])
            d_surf = max(dist_c - ob.radius_m, 1e-3)
            if d_surf < params.r_beta_m:
                acc[k] += params.obstacle_gain / (d_surf * d_surf) * outward

    return acc


def control_input(uav_id: int,
                  states: Sequence[UavState],
                  graph: ProximityGraph,
                  obstacles: Sequence[Obstacle],
                  params: FlockingParams) -> np.ndarray:
    """Commanded acceleration for one UAV under the snapshot in `graph`."""
    if uav_id not in graph.index:
        raise FlockingError(f"UAV {uav_id} not in graph")
    return _accelerations(states, graph, obstacles, params)[graph.index[uav_id]]


# ---- misalignment limiting ----

def _orthonormal_perp(e1: np.ndarray) -> np.ndarray:
    # deterministic perpendicular for the antiparallel edge case
    trial = np.array([1.0, 0.0, 0.0])
    if abs(float(e1.dot(trial))) > 0.9:
        trial = np.array([0.0, 1.0, 0.0])
    perp = trial - float(e1.dot(trial)) * e1
    return perp / np.linalg.norm(perp)


def avoid_obstacle_filter(v, v_bar, theta_max_rad: float) -> np.ndarray:
    """Clamp the heading of v to at most theta_max against the desired
    direction v_bar, judged by <v, v_bar> >= cos(theta_max)*|v_bar|^2.

    Satisfying v (and any v when v_bar == 0) passes through unchanged;
    otherwise v is rotated in span{v, v_bar}, magnitude preserved, to meet
    the bound with equality. If no same-magnitude vector can satisfy it,
    the closest achievable (v_bar-aligned) vector is returned. A zero v is
    returned as-is since rotation cannot change it.
    """
    v = np.asarray(v, dtype=np.float64)
    vb = np.asarray(v_bar, dtype=np.float64)
    nb = float(np.linalg.norm(vb))
    if nb == 0.0:
        return v.copy()
    nv = float(np.linalg.norm(v))
    if nv == 0.0:
        return v.copy()
    need = math.cos(theta_max_rad) * nb * nb
    if float(v.dot(vb)) >= need:
        return v.copy()

    e1 = vb / nb
    along = float(v.dot(e1))
    perp_vec = v - along * e1
    np_norm = float(np.linalg.norm(perp_vec))
    e2 = perp_vec / np_norm if np_norm > 1e-12 else _orthonormal_perp(e1)

    cos_alpha = math.cos(theta_max_rad) * nb / nv
    if cos_alpha >= 1.0:
        return nv * e1  # bound unreachable at this magnitude
    sin_alpha = math.sqrt(1.0 - cos_alpha * cos_alpha)
    return nv * (cos_alpha * e1 + sin_alpha * e2)


def desired_direction(state: UavState, params: FlockingParams) -> np.ndarray:
    """Per-UAV desired direction: toward the role's nav target, scaled to the
    UAV's own speed so the misalignment bound is always satisfiable."""
    target = params.nav_targets.get(state.role)
    if target is None:
        return np.zeros(3)
    to_t = np.asarray(target, dtype=np.float64) - state.position
    dist = float(np.linalg.norm(to_t))
    speed = float(np.linalg.norm(state.velocity))
    if dist < 1e-9 or speed == 0.0:
        return np.zeros(3)
    return to_t / dist * speed


def misalignment_residual(states: Sequence[UavState], params: FlockingParams) -> float:
    """min over UAVs of <v, v_bar> - cos(theta_max)*|v_bar|^2; vacuously 0
    when every desired direction is zero."""
    worst = 0.0
    cos_t = math.cos(params.theta_max_rad)
    for s in states:
        vb = desired_direction(s, params)
        nb = float(np.linalg.norm(vb))
        if nb == 0.0:
            continue
        worst = min(worst, float(s.velocity.dot(vb)) - cos_t * nb * nb)
    return worst


# ---- integration ----

def step(states: Sequence[UavState],
         graph: ProximityGraph,
         obstacles: Sequence[Obstacle],
         params: FlockingParams,
         dt_s: float,
         bytes_sent: Optional[Dict[int, int]] = None) -> List[UavState]:
    """One synchronous explicit-Euler step over the whole fleet.

    Positions advance on the pre-update velocities, then velocities take the
    commanded acceleration, get clamped to v_max, and pass the misalignment
    filter. Battery drains by idle + speed + traffic terms per step.
    """
    if dt_s <= 0.0:
        raise FlockingError(f"dt must be positive: {dt_s}")
    acc = _accelerations(states, graph, obstacles, params)
    pos, vel = _fleet_arrays(states)
    new_pos = pos + dt_s * vel
    new_vel = vel + dt_s * acc
    speed = np.sqrt((new_vel * new_vel).sum(axis=1))
    over = speed > params.v_max_mps
    if over.any():
        new_vel[over] *= (params.v_max_mps / speed[over])[:, None]

    tgt, has_t = _nav_target_rows(states, params)
    to_t = tgt - new_pos
    dist = np.sqrt((to_t * to_t).sum(axis=1))
    spd = np.sqrt((new_vel * new_vel).sum(axis=1))
    gated = np.nonzero(has_t & (dist > 1e-9) & (spd > 0.0))[0]
    if gated.size:
        # cull the already-aligned majority; the filter re-checks its input
        dots = (new_vel[gated] * to_t[gated]).sum(axis=1)
        bound = math.cos(params.theta_max_rad) * spd[gated] * dist[gated]
        for k in gated[dots < bound]:
            new_vel[k] = avoid_obstacle_filter(
                new_vel[k], to_t[k] / dist[k] * spd[k], params.theta_max_rad
            )

    sent = np.zeros(len(states), dtype=np.float64)
    if bytes_sent is not None:
        for k, s in enumerate(states):
            sent[k] = bytes_sent.get(s.uav_id, 0)
    drain = (
        params.drain_idle_j
        + params.drain_speed_j * np.sqrt((new_vel * new_vel).sum(axis=1))
        + params.drain_byte_j * sent
    )
    battery = np.maximum(
        0.0, np.array([s.battery_j for s in states]) - drain
    )
    return [
        replace(s, position=new_pos[k].copy(), velocity=new_vel[k].copy(),
                battery_j=float(battery[k]))
        for k, s in enumerate(states)
    ]
