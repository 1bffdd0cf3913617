"""Flocking control tests. The fleet-wide acceleration kernel is compared
against a straightforward per-UAV reference written from the same control
law with the scalar helpers; frozen values below were computed independently
from the closed forms."""

import math

import numpy as np
import pytest

from uavnet.flocking import (ROLE_CONNECTIVITY, ROLE_DELIVERY, ROLE_MONITOR,
                             ROLE_SURVEY, ROLES, FlockingError, FlockingParams,
                             Obstacle, UavState, avoid_obstacle_filter, bump,
                             build_proximity_graph, control_input,
                             desired_direction, misalignment_residual,
                             sigma_norm, sigma_norm_of,
                             spacing_potential_slope, step)


def _uav(uid, role, pos, vel, battery=9e5, capacity=1e6, stake=20.0):
    return UavState(uav_id=uid, role=role,
                    position=np.asarray(pos, dtype=np.float64),
                    velocity=np.asarray(vel, dtype=np.float64),
                    battery_j=battery, capacity_j=capacity, stake=stake)


def _random_fleet(rng, n, box=150.0, vmax=10.0):
    roles = [ROLES[k % len(ROLES)] for k in range(n)]
    return [
        _uav(uid=100 + k, role=roles[k],
             pos=rng.uniform(-box, box, size=3),
             vel=rng.uniform(-vmax, vmax, size=3))
        for k in range(n)
    ]


# ---- scalar helpers ----

def test_sigma_norm_frozen_values():
    assert sigma_norm_of(25.0, 0.1) == pytest.approx(69.68688725254613, rel=1e-15)
    assert sigma_norm_of(150.0, 0.1) == pytest.approx(464.4470465710583, rel=1e-15)
    assert sigma_norm_of(0.0, 0.1) == 0.0


def test_sigma_norm_on_vectors():
    assert sigma_norm([0.0, 0.0, 0.0], 0.25) == 0.0
    assert sigma_norm([3.0, 4.0, 0.0], 0.25) == pytest.approx(
        sigma_norm_of(5.0, 0.25), rel=1e-15)


def test_bump_plateau_and_tail():
    for z in (0.0, 0.1, 0.2):
        assert bump(z) == 1.0
    for z in (1.0, 1.5, -0.3):
        assert bump(z) == 0.0


def test_bump_frozen_values():
    # midpoint of the cosine arc, and a point near the tail
    assert bump(0.6) == pytest.approx(0.5, abs=1e-15)
    assert bump(0.9) == pytest.approx(0.03806023374435663, rel=1e-14)


def test_bump_monotone_on_decay_arc():
    zs = np.linspace(0.2, 1.0, 200)
    vals = [bump(float(z)) for z in zs]
    assert all(a >= b for a, b in zip(vals, vals[1:]))


def test_spacing_slope_zero_at_preferred_spacing():
    d_sigma = sigma_norm_of(25.0, 0.1)
    assert spacing_potential_slope(d_sigma, d_sigma) == 0.0
    assert spacing_potential_slope(d_sigma + 3.0, d_sigma) > 0.0
    assert spacing_potential_slope(d_sigma - 3.0, d_sigma) < 0.0
    # odd around the zero, and bounded by 1
    assert spacing_potential_slope(d_sigma + 7.0, d_sigma) == pytest.approx(
        -spacing_potential_slope(d_sigma - 7.0, d_sigma), rel=1e-15)
    assert abs(spacing_potential_slope(d_sigma + 1e3, d_sigma)) < 1.0
    assert abs(spacing_potential_slope(d_sigma + 1e9, d_sigma)) <= 1.0


# ---- state and parameter validation ----

def test_uav_state_validation():
    with pytest.raises(FlockingError):
        _uav(1, "courier", [0, 0, 0], [0, 0, 0])
    with pytest.raises(FlockingError):
        _uav(1, ROLE_DELIVERY, [0, 0], [0, 0, 0])
    with pytest.raises(FlockingError):
        _uav(1, ROLE_DELIVERY, [0, 0, 0], [0, 0, 0], battery=2e6, capacity=1e6)
    s = _uav(1, ROLE_DELIVERY, [0, 0, 0], [0, 0, 0], battery=25e4, capacity=1e6)
    assert s.fuel_fraction == 0.25


def test_params_validation():
    with pytest.raises(FlockingError):
        FlockingParams(theta_max_rad=math.pi)
    with pytest.raises(FlockingError):
        FlockingParams(epsilon=0.0)
    with pytest.raises(FlockingError):
        FlockingParams(d_min_m=-1.0)
    with pytest.raises(FlockingError):
        Obstacle(center=(0.0, 0.0, 0.0), radius_m=0.0)


# ---- proximity graph ----

def test_graph_radius_is_strict():
    params = FlockingParams()
    a = _uav(1, ROLE_SURVEY, [0.0, 0.0, 0.0], [0, 0, 0])
    b = _uav(2, ROLE_SURVEY, [params.r_alpha_m, 0.0, 0.0], [0, 0, 0])
    c = _uav(3, ROLE_SURVEY, [0.0, params.r_alpha_m - 1e-6, 0.0], [0, 0, 0])
    g = build_proximity_graph([a, b, c], [], params)
    assert g.alpha_neighbors[1] == [3]
    assert g.alpha_neighbors[2] == []
    assert g.alpha_neighbors[3] == [1]
    assert not g.alpha_mask.diagonal().any()
    assert (g.alpha_mask == g.alpha_mask.T).all()


def test_graph_mask_matches_neighbor_lists():
    rng = np.random.default_rng(11)
    fleet = _random_fleet(rng, 40, box=300.0)
    g = build_proximity_graph(fleet, [], FlockingParams())
    for uid, nbrs in g.alpha_neighbors.items():
        k = g.index[uid]
        from_mask = [g.ids[j] for j in np.nonzero(g.alpha_mask[k])[0]]
        assert from_mask == nbrs


def test_graph_rejects_duplicate_ids():
    a = _uav(5, ROLE_SURVEY, [0, 0, 0], [0, 0, 0])
    b = _uav(5, ROLE_SURVEY, [10, 0, 0], [0, 0, 0])
    with pytest.raises(FlockingError):
        build_proximity_graph([a, b], [], FlockingParams())


def test_graph_beta_edge_iff_ball_touches_sphere():
    params = FlockingParams()  # r_beta 60
    ob = Obstacle(center=(0.0, 0.0, 0.0), radius_m=40.0)
    near = _uav(1, ROLE_SURVEY, [99.9, 0.0, 0.0], [0, 0, 0])
    far = _uav(2, ROLE_SURVEY, [100.1, 0.0, 0.0], [0, 0, 0])
    g = build_proximity_graph([near, far], [ob], params)
    assert g.beta_obstacles[1] == [0]
    assert g.beta_obstacles[2] == []


# ---- control law vs scalar reference ----

def _reference_accel(s, states, graph, obstacles, params):
    eps = params.epsilon
    d_sigma = sigma_norm_of(params.d_min_m, eps)
    r_sigma = sigma_norm_of(params.r_alpha_m, eps)
    g = params.gains
    acc = np.zeros(3)
    for j_id in graph.alpha_neighbors[s.uav_id]:
        other = states[graph.index[j_id]]
        rel = other.position - s.position
        r = float(np.linalg.norm(rel))
        z = sigma_norm_of(r, eps)
        n_ij = rel / math.sqrt(1.0 + eps * r * r)
        w = bump(z / r_sigma)
        acc = acc + g["cohesion"] * w * spacing_potential_slope(z, d_sigma) * n_ij
        acc = acc + g["alignment"] * w * (other.velocity - s.velocity)
        if r < params.d_min_m:
            rc = max(r, 1e-6)
            push = min((params.d_min_m - rc) / rc, 100.0)
            acc = acc - g["separation"] * push * rel / rc
    target = params.nav_targets.get(s.role)
    if target is not None:
        to_t = np.asarray(target, dtype=np.float64) - s.position
        pull = to_t / math.sqrt(1.0 + float(to_t.dot(to_t)))
        acc = acc + g["navigation"] * (pull - params.nav_damping * s.velocity)
    for oi in graph.beta_obstacles[s.uav_id]:
        ob = obstacles[oi]
        radial = s.position - np.asarray(ob.center, dtype=np.float64)
        dist_c = float(np.linalg.norm(radial))
        outward = radial / dist_c if dist_c > 0.0 else np.array([1.0, 0.0, 0.0])
        d_surf = max(dist_c - ob.radius_m, 1e-3)
        if d_surf < params.r_beta_m:
            acc = acc + params.obstacle_gain / (d_surf * d_surf) * outward
    return acc


def test_control_matches_per_uav_reference():
    rng = np.random.default_rng(99)
    params = FlockingParams(nav_targets={
        ROLE_DELIVERY: (500.0, 0.0, 50.0),
        ROLE_SURVEY: (-300.0, 200.0, 80.0),
    })
    fleet = _random_fleet(rng, 30, box=120.0)
    obstacles = [Obstacle(center=(40.0, 0.0, 0.0), radius_m=20.0),
                 Obstacle(center=(-60.0, -60.0, 30.0), radius_m=15.0)]
    graph = build_proximity_graph(fleet, obstacles, params)
    assert any(graph.beta_obstacles.values())  # the comparison must cover beta
    for s in fleet:
        got = control_input(s.uav_id, fleet, graph, obstacles, params)
        want = _reference_accel(s, fleet, graph, obstacles, params)
        np.testing.assert_allclose(got, want, rtol=1e-9, atol=1e-9)


def test_control_rejects_unknown_uav_and_stale_states():
    fleet = _random_fleet(np.random.default_rng(3), 5)
    params = FlockingParams()
    graph = build_proximity_graph(fleet, [], params)
    with pytest.raises(FlockingError):
        control_input(999, fleet, graph, [], params)
    with pytest.raises(FlockingError):
        control_input(100, list(reversed(fleet)), graph, [], params)


# ---- misalignment filter ----

def test_filter_passes_satisfying_velocity():
    v = np.array([1.0, 0.1, 0.0])
    vb = np.array([1.0, 0.0, 0.0])
    out = avoid_obstacle_filter(v, vb, math.pi / 4)
    np.testing.assert_array_equal(out, v)


def test_filter_rotation_preserves_magnitude_and_meets_bound():
    rng = np.random.default_rng(17)
    theta = math.pi / 4
    for _ in range(500):
        v = rng.uniform(-5.0, 5.0, size=3)
        vb = rng.uniform(-5.0, 5.0, size=3)
        if np.linalg.norm(v) < 1e-6 or np.linalg.norm(vb) < 1e-6:
            continue
        out = avoid_obstacle_filter(v, vb, theta)
        assert np.linalg.norm(out) == pytest.approx(np.linalg.norm(v), rel=1e-9)
        nb = np.linalg.norm(vb)
        need = math.cos(theta) * nb * nb
        if np.linalg.norm(v) >= math.cos(theta) * nb:
            # reachable: bound holds (with equality when the input violated it)
            assert float(out.dot(vb)) >= need - 1e-9 * max(1.0, need)
        else:
            # unreachable: closest achievable is the aligned vector
            np.testing.assert_allclose(
                out, np.linalg.norm(v) * vb / nb, rtol=1e-12, atol=1e-12)


def test_filter_zero_edge_cases():
    theta = math.pi / 4
    np.testing.assert_array_equal(
        avoid_obstacle_filter([1.0, 2.0, 3.0], [0.0, 0.0, 0.0], theta),
        [1.0, 2.0, 3.0])
    np.testing.assert_array_equal(
        avoid_obstacle_filter([0.0, 0.0, 0.0], [1.0, 0.0, 0.0], theta),
        [0.0, 0.0, 0.0])


def test_filter_antiparallel_is_deterministic():
    theta = math.pi / 4
    v = np.array([-2.0, 0.0, 0.0])
    vb = np.array([1.0, 0.0, 0.0])
    out1 = avoid_obstacle_filter(v, vb, theta)
    out2 = avoid_obstacle_filter(v, vb, theta)
    np.testing.assert_array_equal(out1, out2)
    assert np.linalg.norm(out1) == pytest.approx(2.0, rel=1e-12)
    assert float(out1.dot(vb)) >= math.cos(theta) * 1.0 - 1e-12


def test_desired_direction_matches_own_speed():
    params = FlockingParams(nav_targets={ROLE_DELIVERY: (100.0, 0.0, 0.0)})
    s = _uav(1, ROLE_DELIVERY, [0.0, 0.0, 0.0], [0.0, 3.0, 4.0])
    d = desired_direction(s, params)
    np.testing.assert_allclose(d, [5.0, 0.0, 0.0], rtol=1e-12)
    idle = _uav(2, ROLE_DELIVERY, [0.0, 0.0, 0.0], [0.0, 0.0, 0.0])
    np.testing.assert_array_equal(desired_direction(idle, params), np.zeros(3))
    other = _uav(3, ROLE_MONITOR, [0.0, 0.0, 0.0], [1.0, 0.0, 0.0])
    np.testing.assert_array_equal(desired_direction(other, params), np.zeros(3))


def test_misalignment_residual_signs():
    params = FlockingParams(nav_targets={ROLE_DELIVERY: (100.0, 0.0, 0.0)})
    toward = [_uav(1, ROLE_DELIVERY, [0, 0, 0], [5.0, 0.0, 0.0])]
    away = [_uav(1, ROLE_DELIVERY, [0, 0, 0], [-5.0, 0.0, 0.0])]
    assert misalignment_residual(toward, params) == 0.0
    assert misalignment_residual(away, params) < 0.0
    # vacuous when no role has a target
    assert misalignment_residual(
        [_uav(1, ROLE_CONNECTIVITY, [0, 0, 0], [1, 1, 1])], FlockingParams()) == 0.0


# ---- integration step ----

def test_step_euler_semantics():
    params = FlockingParams()
    fleet = _random_fleet(np.random.default_rng(8), 12, box=80.0, vmax=5.0)
    graph = build_proximity_graph(fleet, [], params)
    pre_pos = [s.position.copy() for s in fleet]
    pre_vel = [s.velocity.copy() for s in fleet]
    out = step(fleet, graph, [], params, dt_s=0.1)
    assert len(out) == len(fleet)
    for k, s in enumerate(out):
        # position advances on the pre-update velocity
        np.testing.assert_allclose(
            s.position, pre_pos[k] + 0.1 * pre_vel[k], rtol=1e-12)
        assert np.linalg.norm(s.velocity) <= params.v_max_mps + 1e-9
        assert s.battery_j < fleet[k].battery_j
        assert s.uav_id == fleet[k].uav_id and s.role == fleet[k].role


def test_step_speed_clamp():
    params = FlockingParams(v_max_mps=1.0)
    a = _uav(1, ROLE_SURVEY, [0.0, 0.0, 0.0], [0.9, 0.0, 0.0])
    b = _uav(2, ROLE_SURVEY, [5.0, 0.0, 0.0], [0.0, 0.0, 0.0])  # inside d_min
    graph = build_proximity_graph([a, b], [], params)
    out = step([a, b], graph, [], params, dt_s=1.0)
    for s in out:
        assert np.linalg.norm(s.velocity) <= 1.0 + 1e-12


def test_step_battery_drain_terms():
    params = FlockingParams()
    # lone stationary UAV, no neighbors, no targets: drain is the idle term
    s = _uav(1, ROLE_SURVEY, [0.0, 0.0, 0.0], [0.0, 0.0, 0.0], battery=1000.0,
             capacity=1e6)
    graph = build_proximity_graph([s], [], params)
    out = step([s], graph, [], params, dt_s=0.5)
    assert out[0].battery_j == pytest.approx(1000.0 - params.drain_idle_j)
    # traffic adds the per-byte term
    out2 = step([s], graph, [], params, dt_s=0.5, bytes_sent={1: 1_000_000})
    assert out2[0].battery_j == pytest.approx(
        1000.0 - params.drain_idle_j - params.drain_byte_j * 1_000_000)
    # battery never goes negative
    low = _uav(2, ROLE_SURVEY, [0.0, 0.0, 0.0], [0.0, 0.0, 0.0], battery=1.0,
               capacity=1e6)
    g2 = build_proximity_graph([low], [], params)
    assert step([low], g2, [], params, dt_s=0.5)[0].battery_j == 0.0


def test_step_rejects_bad_dt():
    fleet = _random_fleet(np.random.default_rng(2), 3)
    graph = build_proximity_graph(fleet, [], FlockingParams())
    with pytest.raises(FlockingError):
        step(fleet, graph, [], FlockingParams(), dt_s=0.0)


def test_step_enforces_misalignment_bound():
    params = FlockingParams(nav_targets={ROLE_DELIVERY: (1000.0, 0.0, 0.0)},
                            theta_max_rad=math.pi / 4)
    rng = np.random.default_rng(31)
    fleet = [
        _uav(uid=k, role=ROLE_DELIVERY,
             pos=rng.uniform(-50.0, 50.0, size=3),
             vel=rng.uniform(-8.0, 8.0, size=3))
        for k in range(20)
    ]
    states = fleet
    for _ in range(30):
        graph = build_proximity_graph(states, [], params)
        states = step(states, graph, [], params, dt_s=0.1)
        assert misalignment_residual(states, params) >= -1e-9
